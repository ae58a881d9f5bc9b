//! Attention overlays from feature maps: the channel-wise L1 norm at each
//! location, min-max normalized, upsampled and multiplied into the image.

use ndarray::{Array2, Array3, Axis};

use crate::image::{resize_plane, Image};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionMask {
    /// Normalized mask at feature-map resolution.
    pub mask: Array2<f32>,
    /// Original image weighted by the upsampled mask.
    pub overlay: Image,
    /// The norm map was constant, so the mask is all ones.
    pub degenerate: bool,
}

pub fn extract_attention_mask(f: &Array3<f64>, original: &Image) -> Result<AttentionMask> {
    let (_, h, w) = f.dim();
    if h == 0 || w == 0 {
        return Err(Error::EmptyFeatureMap);
    }
    if h > original.height() || w > original.width() {
        return Err(Error::Geometry(format!(
            "feature map {h}x{w} is larger than the image {}x{}",
            original.height(),
            original.width()
        )));
    }
    let norms = f.map_axis(Axis(0), |col| col.iter().map(|v| v.abs()).sum::<f64>());
    let lo = norms.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = norms.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let degenerate = hi <= lo;
    let mask = if degenerate {
        log::warn!("attention norm map is constant; emitting a pass-through mask");
        Array2::ones((h, w))
    } else {
        norms.mapv(|v| ((v - lo) / (hi - lo)) as f32)
    };
    let full = resize_plane(&mask, original.height(), original.width());
    let mut overlay = original.clone();
    for mut plane in overlay.data.axis_iter_mut(Axis(0)) {
        plane *= &full;
    }
    Ok(AttentionMask {
        mask,
        overlay,
        degenerate,
    })
}

//! Attention overlays from the student's feature maps.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::s;

use crate::error::IoContext;
use crate::features::{to_tensor, InputNorm};
use crate::image::Image;
use crate::netblocks::{extract_attention_mask, ReidNet};
use crate::views::{crop_view, ViewSpec};
use crate::Result;

/// For every `(stem, image)` writes `<stem>_input.png`, the backbone
/// overlay `<stem>_backbone.png` and one `<stem>_<view>.png` per
/// feature-map branch. Returns the written paths.
pub fn render_attention(
    net: &ReidNet,
    images: &[(String, Image)],
    holistic: &ViewSpec,
    norm: &InputNorm,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).at(out)?;
    let mut written = Vec::new();
    for (stem, img) in images {
        let crop = crop_view(img, holistic)?;
        let o = net.infer(&to_tensor(&[&crop], norm));
        let mut save = |name: &str, image: &Image| -> Result<()> {
            let path = out.join(format!("{stem}_{name}.png"));
            image.save_png(&path)?;
            written.push(path);
            Ok(())
        };
        save("input", &crop)?;
        let backbone = o.feature_map.slice(s![0, .., .., ..]).to_owned();
        save("backbone", &extract_attention_mask(&backbone, &crop)?.overlay)?;
        for (map, b) in o.attr_maps.iter().zip(&net.spec.branches) {
            let f = map.slice(s![0, .., .., ..]).to_owned();
            save(&b.view, &extract_attention_mask(&f, &crop)?.overlay)?;
        }
    }
    Ok(written)
}

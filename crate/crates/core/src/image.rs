//! Planar RGB images in `[0, 1]` and the handful of pixel operations the
//! views and evaluator need.

use std::path::Path;

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Resampling used to scale a view's stripe to its output size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Channels-first `(3, H, W)` image with `f32` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Array3::zeros((3, height, width));
        for (c, v) in rgb.iter().enumerate() {
            data.index_axis_mut(Axis(0), c).fill(*v);
        }
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Rows `[row0, row1)` over the full width.
    pub fn rows(&self, row0: usize, row1: usize) -> Image {
        Image::new(self.data.slice(s![.., row0..row1, ..]).to_owned())
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::new(self.data.slice(s![.., .., ..;-1]).to_owned())
    }

    /// Bilinear resize with half-pixel centres; resizing to the same size is
    /// the identity.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        let (c, h, w) = self.data.dim();
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let rows = sample_axis(h, out_h);
        let cols = sample_axis(w, out_w);
        let mut out = Array3::zeros((c, out_h, out_w));
        for ch in 0..c {
            let src = self.data.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                    let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                    dst[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        Image::new(out)
    }

    /// Nearest-neighbour resize sampling at half-pixel centres.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Image {
        let (c, h, w) = self.data.dim();
        let pick =
            |src: usize, dst: usize, o: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
        Image::new(Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
            self.data[[ch, pick(h, out_h, y), pick(w, out_w, x)]]
        }))
    }

    pub fn resize(&self, out_h: usize, out_w: usize, method: Interpolation) -> Image {
        match method {
            Interpolation::Bilinear => self.resize_bilinear(out_h, out_w),
            Interpolation::Nearest => self.resize_nearest(out_h, out_w),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        Ok(Image::new(data))
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let (_, h, w) = self.data.dim();
        ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// For each output coordinate: the two source taps and the weight of the second.
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a single-channel grid, used for attention masks.
pub fn resize_plane(plane: &ndarray::Array2<f32>, out_h: usize, out_w: usize) -> ndarray::Array2<f32> {
    let (h, w) = plane.dim();
    let img = Image::new(plane.clone().into_shape_with_order((1, h, w)).expect("contiguous"));
    img.resize_bilinear(out_h, out_w).data.index_axis_move(Axis(0), 0)
}

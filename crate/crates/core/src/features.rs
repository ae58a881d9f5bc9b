//! Image-to-tensor conversion and flip-averaged feature extraction, shared
//! by supervisory representation generation and test-time evaluation.

use ndarray::{s, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::netblocks::{ReidNet, Tensor2, Tensor4};

/// Per-channel normalization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Channel statistics over a set of images.
    pub fn measure(images: &[Image]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0f64;
        for img in images {
            for c in 0..3 {
                let plane = img.data.index_axis(Axis(0), c);
                sum[c] += plane.iter().map(|&v| v as f64).sum::<f64>();
                sq[c] += plane.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
            count += (img.height() * img.width()) as f64;
        }
        let mut norm = Self::IDENTITY;
        if count > 0.0 {
            for c in 0..3 {
                let mean = sum[c] / count;
                let var = (sq[c] / count - mean * mean).max(0.0);
                norm.mean[c] = mean as f32;
                norm.std[c] = var.sqrt().max(1e-3) as f32;
            }
        }
        norm
    }
}

/// Stacks equally sized images into an `(N, 3, H, W)` tensor.
pub fn to_tensor(images: &[&Image], norm: &InputNorm) -> Tensor4 {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut x = Tensor4::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "batch images differ in size");
        for c in 0..3 {
            let (m, sd) = (norm.mean[c], norm.std[c]);
            x.slice_mut(s![n, c, .., ..])
                .zip_mut_with(&img.data.index_axis(Axis(0), c), |o, &v| *o = ((v - m) / sd) as f64);
        }
    }
    x
}

/// Anything that maps an image batch to one feature row per image.
pub trait Embedder: Sync {
    fn embed_batch(&self, x: &Tensor4) -> Tensor2;
}

impl Embedder for ReidNet {
    fn embed_batch(&self, x: &Tensor4) -> Tensor2 {
        self.embed(x)
    }
}

/// `(f(x) + f(flip x)) / 2` for an image already cropped to its view.
pub fn flip_averaged<E: Embedder + ?Sized>(model: &E, image: &Image, norm: &InputNorm) -> Array1<f64> {
    let flipped = image.flip_horizontal();
    let f = model.embed_batch(&to_tensor(&[image, &flipped], norm));
    (&f.row(0) + &f.row(1)) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn normalization_round_trip() {
        let img = Image::new(Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f32 / 5.0));
        let norm = InputNorm::measure(std::slice::from_ref(&img));
        let t = to_tensor(&[&img], &norm);
        for c in 0..3 {
            let plane = t.slice(s![0, c, .., ..]);
            assert!(plane.mean().unwrap().abs() < 1e-6);
        }
    }
}

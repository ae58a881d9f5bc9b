//! Stabilized global max pooling: a stride-1, unpadded `m x m` average pool
//! followed by a global max per channel.
//!
//! `m = 1` is plain global max pooling and `m` equal to the map size is
//! global average pooling. A kernel larger than a spatial dimension is
//! clamped to that dimension. In the backward pass the gradient of each
//! channel flows uniformly into the winning window; ties go to the first
//! window in row-major order.

use ndarray::{Array1, Array3, Axis};

use super::layers::{Tensor2, Tensor4};
use crate::{Error, Result};

/// Pools a single `(C, H, W)` feature map to one value per channel.
pub fn stabilized_gmp(f: &Array3<f64>, m: usize) -> Result<Array1<f64>> {
    let (c, h, w) = f.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyFeatureMap);
    }
    if m == 0 {
        return Err(Error::Config("pooling kernel must be at least 1".into()));
    }
    let x = f.view().insert_axis(Axis(0)).to_owned();
    let (pooled, _) = pool(&x, m);
    Ok(pooled.index_axis_move(Axis(0), 0))
}

/// Winning window top-left `(row, col)` for every `(sample, channel)`.
type Winners = Vec<(usize, usize)>;

fn window_dims(h: usize, w: usize, m: usize) -> (usize, usize) {
    (m.min(h).max(1), m.min(w).max(1))
}

fn pool(x: &Tensor4, m: usize) -> (Tensor2, Winners) {
    let (n, c, h, w) = x.dim();
    let (mh, mw) = window_dims(h, w, m);
    let area = (mh * mw) as f64;
    let mut out = Tensor2::zeros((n, c));
    let mut winners = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(ndarray::s![ni, ci, .., ..]);
            let mut best = f64::NEG_INFINITY;
            let mut arg = (0, 0);
            let mut first = true;
            for y0 in 0..=h - mh {
                for x0 in 0..=w - mw {
                    let mut s = 0.0;
                    for y in y0..y0 + mh {
                        for xx in x0..x0 + mw {
                            s += plane[[y, xx]];
                        }
                    }
                    let avg = s / area;
                    if first || avg > best {
                        best = avg;
                        arg = (y0, x0);
                        first = false;
                    }
                }
            }
            out[[ni, ci]] = best;
            winners.push(arg);
        }
    }
    (out, winners)
}

/// Batched layer form used inside models.
#[derive(Debug, Clone)]
pub struct StabilizedGmp {
    pub kernel: usize,
    cache: Option<(Winners, (usize, usize, usize, usize))>,
}

impl StabilizedGmp {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::Config("pooling kernel must be at least 1".into()));
        }
        Ok(Self { kernel, cache: None })
    }

    pub fn infer(&self, x: &Tensor4) -> Tensor2 {
        pool(x, self.kernel).0
    }

    pub fn forward(&mut self, x: &Tensor4) -> Tensor2 {
        let (out, winners) = pool(x, self.kernel);
        self.cache = Some((winners, x.dim()));
        out
    }

    pub fn backward(&mut self, grad: &Tensor2) -> Tensor4 {
        let (winners, dims) = self.cache.take().expect("pooling backward without forward");
        let (n, c, h, w) = dims;
        let (mh, mw) = window_dims(h, w, self.kernel);
        let area = (mh * mw) as f64;
        let mut dx = Tensor4::zeros(dims);
        for ni in 0..n {
            for ci in 0..c {
                let (y0, x0) = winners[ni * c + ci];
                let g = grad[[ni, ci]] / area;
                for y in y0..y0 + mh {
                    for x in x0..x0 + mw {
                        dx[[ni, ci, y, x]] += g;
                    }
                }
            }
        }
        dx
    }
}

/// Plain global max pooling, per channel.
pub fn global_max(f: &Array3<f64>) -> Array1<f64> {
    f.map_axis(Axis(1), |col| col.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
}

/// Plain global average pooling, per channel.
pub fn global_avg(f: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = f.dim();
    f.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

//! Classification, masked regression and the weighted distillation
//! objective, each returning its value together with its gradient.
//!
//! The classification loss is a batch *sum* of cross-entropies. Regression
//! losses average over the unmasked samples only:
//! `1/(2N') * sum ||target - pred||^2`, and are zero when `N' = 0`.
//! The total is `L_cls + alpha/K * sum_k L_attr[k] + beta/K * sum_k L_metric[k]`.

use serde::{Deserialize, Serialize};

use crate::netblocks::Tensor2;
use crate::views::{erase_overlap_fraction, EraseRecord, ViewSpec};
use crate::{Error, Result};

/// Fraction of a view's area that may be erased before its regression
/// losses are dropped; the comparison is strict.
pub const ERASE_MASK_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const CANONICAL: LossWeights = LossWeights { alpha: 4.0, beta: 2.0 };

    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor2,
}

/// Sum over the batch of `-log softmax(z_i)[y_i]`. Labels are 0-based.
pub fn cls_loss(logits: &Tensor2, labels: &[usize]) -> Result<LossValue> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logits", labels.len())));
    }
    let mut value = 0.0;
    let mut grad = Tensor2::zeros((n, c));
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        value += log_z - row[y];
        for j in 0..c {
            grad[[i, j]] = (row[j] - log_z).exp();
        }
        grad[[i, y]] -= 1.0;
    }
    Ok(LossValue { value, grad })
}

#[derive(Debug, Clone)]
pub struct RegressionLoss {
    pub value: f64,
    pub grad: Tensor2,
    /// Number of samples that contributed.
    pub active: usize,
}

impl RegressionLoss {
    pub fn fully_masked(&self) -> bool {
        self.active == 0
    }
}

/// `1/(2N') * sum over unmasked i of ||target_i - pred_i||^2`, where
/// `mask[i] == true` means sample `i` contributes.
pub fn regression_loss(targets: &Tensor2, preds: &Tensor2, mask: &[bool]) -> Result<RegressionLoss> {
    if targets.dim() != preds.dim() {
        return Err(Error::Shape(format!(
            "regression target {:?} vs prediction {:?}",
            targets.dim(),
            preds.dim()
        )));
    }
    if mask.len() != preds.nrows() {
        return Err(Error::Shape(format!(
            "{} mask entries for {} samples",
            mask.len(),
            preds.nrows()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor2::zeros(preds.dim());
    if active == 0 {
        return Ok(RegressionLoss {
            value: 0.0,
            grad,
            active,
        });
    }
    let scale = 1.0 / active as f64;
    let mut value = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (j, (&t, &p)) in targets.row(i).iter().zip(preds.row(i)).enumerate() {
            let d = p - t;
            value += d * d;
            grad[[i, j]] = d * scale;
        }
    }
    Ok(RegressionLoss {
        value: 0.5 * scale * value,
        grad,
        active,
    })
}

/// Per-sample, per-view flag: does the sample contribute to the view's
/// regression losses?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMask {
    /// `keep[view][sample]`.
    pub keep: Vec<Vec<bool>>,
}

impl ViewMask {
    pub fn all(views: usize, samples: usize) -> Self {
        Self {
            keep: vec![vec![true; samples]; views],
        }
    }

    /// Drops `(sample, view)` pairs whose view is erased by more than 40%.
    /// Erase rectangles are in the coordinates of a `height x width` image.
    pub fn from_erasures(erases: &[EraseRecord], views: &[&ViewSpec], height: usize, width: usize) -> Self {
        let keep = views
            .iter()
            .map(|v| {
                erases
                    .iter()
                    .map(|e| erase_overlap_fraction(e, v, height, width) <= ERASE_MASK_THRESHOLD)
                    .collect()
            })
            .collect();
        Self { keep }
    }

    pub fn masked_count(&self, view: usize) -> usize {
        self.keep[view].iter().filter(|&&k| !k).count()
    }
}

/// Per-term values of one evaluation of the total loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub attr: Vec<f64>,
    pub metric: Vec<f64>,
    /// Samples masked out of each view's regression terms.
    pub masked: Vec<usize>,
    /// Views whose regression terms had no contributing sample.
    pub fully_masked_views: usize,
}

/// Combines the terms with weights `alpha/K` and `beta/K`. Empty term
/// lists contribute nothing (the corresponding branch family is disabled).
pub fn total_loss(cls: f64, attr: &[f64], metric: &[f64], views: usize, weights: LossWeights) -> LossBreakdown {
    let k = views.max(1) as f64;
    let total = cls + weights.alpha / k * attr.iter().sum::<f64>() + weights.beta / k * metric.iter().sum::<f64>();
    LossBreakdown {
        total,
        cls,
        attr: attr.to_vec(),
        metric: metric.to_vec(),
        ..Default::default()
    }
}

/// Inputs for one evaluation of the full distillation objective.
pub struct DistillBatch<'a> {
    pub logits: &'a Tensor2,
    pub labels: &'a [usize],
    /// Supervisory representations, one matrix per view.
    pub targets: &'a [Tensor2],
    /// Feature-map branch predictions (empty when that family is off).
    pub attr: &'a [Tensor2],
    /// Representation branch predictions (empty when that family is off).
    pub metric: &'a [Tensor2],
    pub mask: &'a ViewMask,
}

pub struct DistillGrads {
    pub logits: Tensor2,
    pub attr: Vec<Tensor2>,
    pub metric: Vec<Tensor2>,
}

/// Value, breakdown and gradients of the total objective.
pub fn distill_objective(batch: &DistillBatch<'_>, weights: LossWeights) -> Result<(LossBreakdown, DistillGrads)> {
    let k = batch.targets.len();
    for (name, preds) in [("attr", batch.attr), ("metric", batch.metric)] {
        if !preds.is_empty() && preds.len() != k {
            return Err(Error::Shape(format!(
                "{} {name} predictions for {k} views",
                preds.len()
            )));
        }
    }
    if batch.mask.keep.len() != k {
        return Err(Error::Shape(format!(
            "mask covers {} views, expected {k}",
            batch.mask.keep.len()
        )));
    }
    let cls = cls_loss(batch.logits, batch.labels)?;
    let scale_a = weights.alpha / k.max(1) as f64;
    let scale_m = weights.beta / k.max(1) as f64;
    let mut fully_masked = 0;
    let mut family = |preds: &[Tensor2], scale: f64| -> Result<(Vec<f64>, Vec<Tensor2>)> {
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for (v, p) in preds.iter().enumerate() {
            let r = regression_loss(&batch.targets[v], p, &batch.mask.keep[v])?;
            if r.fully_masked() {
                fully_masked += 1;
            }
            values.push(r.value);
            grads.push(r.grad * scale);
        }
        Ok((values, grads))
    };
    let (attr, attr_grads) = family(batch.attr, scale_a)?;
    let (metric, metric_grads) = family(batch.metric, scale_m)?;
    let mut breakdown = total_loss(cls.value, &attr, &metric, k, weights);
    breakdown.masked = (0..k).map(|v| batch.mask.masked_count(v)).collect();
    breakdown.fully_masked_views = fully_masked;
    Ok((
        breakdown,
        DistillGrads {
            logits: cls.grad,
            attr: attr_grads,
            metric: metric_grads,
        },
    ))
}

//! Learning-rate schedule and SGD with momentum.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::config::{OptimizerConfig, Schedule};
use crate::netblocks::{HasParams, ParamKind};

/// `lr0 * 2^-floor(epoch / halve_every)`.
pub fn lr_at(schedule: &Schedule, epoch: usize) -> f64 {
    let halvings = (epoch / schedule.halve_every.max(1)) as i32;
    schedule.lr * 0.5f64.powi(halvings)
}

/// Heavy-ball SGD: `v = mu * v + g + wd * w; w -= lr * v`. Decay applies to
/// [`ParamKind::Weight`] tensors, and to batch-norm scale and shift only
/// when configured.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_norm_params: bool,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            decay_norm_params: cfg.decay_norm_params,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable tensor for which `frozen(name)` is false.
    pub fn step(&mut self, net: &mut dyn HasParams, lr: f64, frozen: &dyn Fn(&str) -> bool) {
        let (mu, wd, decay_norm) = (self.momentum, self.weight_decay, self.decay_norm_params);
        let velocity = &mut self.velocity;
        net.visit_params("", &mut |name, p| {
            if p.kind == ParamKind::Buffer || frozen(name) {
                return;
            }
            let decay = match p.kind {
                ParamKind::Weight => wd,
                ParamKind::NoDecay if decay_norm => wd,
                _ => 0.0,
            };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| *v = mu * *v + g + decay * w);
            p.value.scaled_add(-lr, v);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::Param;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(&Schedule::TEACHER, 0), 0.0025);
        assert_eq!(lr_at(&Schedule::TEACHER, 19), 0.0025);
        assert_eq!(lr_at(&Schedule::TEACHER, 20), 0.00125);
        assert_eq!(lr_at(&Schedule::FINAL_STUDENT, 45), 0.0025 / 8.0);
    }

    #[test]
    fn schedule_is_nonincreasing_and_halves_on_period() {
        for s in [Schedule::TEACHER, Schedule::FINAL_STUDENT] {
            for e in 0..200 {
                let (a, b) = (lr_at(&s, e), lr_at(&s, e + 1));
                assert!(b <= a);
                if (e + 1) % s.halve_every == 0 {
                    assert_eq!(b, a / 2.0);
                } else {
                    assert_eq!(b, a);
                }
            }
        }
    }

    struct Two {
        w: Param,
        bn: Param,
        stat: Param,
    }

    impl HasParams for Two {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("w", &mut self.w);
            f("bn", &mut self.bn);
            f("stat", &mut self.stat);
        }
    }

    #[test]
    fn decay_skips_norm_params_and_buffers() {
        let mut m = Two {
            w: Param::filled(&[1], 2.0, ParamKind::Weight),
            bn: Param::filled(&[1], 2.0, ParamKind::NoDecay),
            stat: Param::filled(&[1], 2.0, ParamKind::Buffer),
        };
        let mut sgd = Sgd::new(&OptimizerConfig::CANONICAL);
        sgd.step(&mut m, 0.1, &|_| false);
        // Zero gradients: only decay moves anything.
        assert_eq!(m.w.value[[0]], 2.0 - 0.1 * 0.0005 * 2.0);
        assert_eq!(m.bn.value[[0]], 2.0);
        assert_eq!(m.stat.value[[0]], 2.0);
        sgd.step(&mut m, 0.1, &|n| n == "w");
        assert_eq!(m.w.value[[0]], 2.0 - 0.1 * 0.0005 * 2.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = Two {
            w: Param::filled(&[1], 0.0, ParamKind::Weight),
            bn: Param::filled(&[1], 0.0, ParamKind::NoDecay),
            stat: Param::filled(&[1], 0.0, ParamKind::Buffer),
        };
        m.bn.grad.fill(1.0);
        let mut sgd = Sgd::new(&OptimizerConfig::CANONICAL);
        sgd.step(&mut m, 1.0, &|_| false);
        sgd.step(&mut m, 1.0, &|_| false);
        assert!((m.bn.value[[0]] + 1.0 + 1.9).abs() < 1e-12);
    }
}

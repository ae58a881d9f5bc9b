use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// How the optimizer treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv / FC weights: trained, L2-decayed.
    Weight,
    /// Batch-norm scale/shift and biases: trained, never decayed.
    NoDecay,
    /// Running statistics: checkpointed, never trained.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: ArrayD<f64>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, kind }
    }

    pub fn zeros(shape: &[usize], kind: ParamKind) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)), kind)
    }

    pub fn filled(shape: &[usize], v: f64, kind: ParamKind) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v), kind)
    }

    /// Zero-mean Gaussian weights with the given standard deviation.
    pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || std * rng.sample::<f64, _>(StandardNormal));
        Self::new(value, ParamKind::Weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters. Names are dotted paths, stable across runs.
pub trait HasParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.kind != ParamKind::Buffer {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

//! Re-identification network: backbone, stabilized pooling, embedding and a
//! bias-free classifier, plus optional per-view factorization branches.
//!
//! A teacher (and the initial student) is the network without branches.
//! The distilled student adds, for every distilled view `k`:
//!
//! * a feature-map branch: `1x1 conv + BN + ReLU` on the backbone map,
//!   stabilized pooling, then `FC + BN` producing `r_attr[k]`;
//! * a representation branch: `FC + BN + ReLU` on the embedding (omitted for
//!   the holistic view), then `FC + BN` producing `r_metric[k]`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{Backbone, BackboneConfig};
use super::layers::{BatchNorm2d, Conv2d, Layer, Linear, Relu, Tensor2, Tensor4};
use super::param::{join, HasParams, Param};
use super::pooling::StabilizedGmp;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub view: String,
    /// Dimension of the teacher's supervisory representation for this view.
    pub sr_dim: usize,
    pub holistic: bool,
}

/// Everything that determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub input_height: usize,
    pub input_width: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub pool_kernel: usize,
    pub branch_pool_kernel: usize,
    pub fmfb_channels: usize,
    pub rfb_dim: usize,
    pub branches: Vec<BranchSpec>,
}

impl ModelSpec {
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("embedding_dim", self.embedding_dim),
            ("num_classes", self.num_classes),
            ("pool_kernel", self.pool_kernel),
            ("branch_pool_kernel", self.branch_pool_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if !self.branches.is_empty() && (self.fmfb_channels == 0 || self.rfb_dim == 0) {
            return Err(Error::Config("branch widths must be positive".into()));
        }
        for b in &self.branches {
            if b.sr_dim == 0 {
                return Err(Error::Config(format!("view {} has a zero-dimensional target", b.view)));
            }
        }
        Ok(())
    }

    /// Shapes of every output for a batch of `n` images.
    pub fn output_shapes(&self, n: usize) -> Result<OutputShapes> {
        let (c, h, w) = self.backbone.output_shape(self.input_height, self.input_width)?;
        Ok(OutputShapes {
            feature_map: (n, c, h, w),
            pooled: (n, c),
            embedding: (n, self.embedding_dim),
            logits: (n, self.num_classes),
            attr: self.branches.iter().map(|b| (n, b.sr_dim)).collect(),
            metric: self.branches.iter().map(|b| (n, b.sr_dim)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputShapes {
    pub feature_map: (usize, usize, usize, usize),
    pub pooled: (usize, usize),
    pub embedding: (usize, usize),
    pub logits: (usize, usize),
    pub attr: Vec<(usize, usize)>,
    pub metric: Vec<(usize, usize)>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `FC (no bias) + BN`, used for embeddings and mappings.
pub struct EmbeddingBlock {
    pub fc: Linear,
    pub bn: BatchNorm2d,
}

impl EmbeddingBlock {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            fc: Linear::new(in_dim, out_dim, false, (2.0 / in_dim as f64).sqrt(), rng),
            bn: BatchNorm2d::new(out_dim),
        }
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        self.bn.infer2(&self.fc.infer(x))
    }

    pub fn forward(&mut self, x: &Tensor2) -> Tensor2 {
        let h = self.fc.forward(x);
        self.bn.forward2(&h)
    }

    pub fn backward(&mut self, g: &Tensor2) -> Tensor2 {
        let g = self.bn.backward2(g);
        self.fc.backward(&g)
    }
}

impl HasParams for EmbeddingBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc.visit_params(&join(prefix, "fc"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
}

/// `FC + BN + ReLU` selecting view-relevant components of the embedding.
pub struct FeatSelRfb {
    pub block: EmbeddingBlock,
    relu: Relu,
}

impl FeatSelRfb {
    fn infer(&self, x: &Tensor2) -> Tensor2 {
        self.block.infer(x).mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor2) -> Tensor2 {
        let h = self.block.forward(x);
        self.relu.forward_any(&h)
    }

    fn backward(&mut self, g: &Tensor2) -> Tensor2 {
        let g = self.relu.backward_any(g);
        self.block.backward(&g)
    }
}

/// `1x1 conv + BN + ReLU` selecting view-relevant feature-map channels.
pub struct FeatSelFmfb {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Relu,
}

impl FeatSelFmfb {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        self.bn.infer4(&self.conv.infer(x)).mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let h = self.conv.forward(x);
        let h = self.bn.forward4(&h);
        self.relu.forward_any(&h)
    }

    fn backward(&mut self, g: &Tensor4) -> Tensor4 {
        let g = self.relu.backward_any(g);
        let g = self.bn.backward4(&g);
        self.conv.backward(&g)
    }
}

pub struct FmfbBranch {
    pub featsel: FeatSelFmfb,
    pub pool: StabilizedGmp,
    pub embedding: EmbeddingBlock,
}

impl FmfbBranch {
    fn infer(&self, f: &Tensor4) -> (Tensor4, Tensor2) {
        let fk = self.featsel.infer(f);
        let r = self.embedding.infer(&self.pool.infer(&fk));
        (fk, r)
    }

    fn forward(&mut self, f: &Tensor4) -> (Tensor4, Tensor2) {
        let fk = self.featsel.forward(f);
        let q = self.pool.forward(&fk);
        let r = self.embedding.forward(&q);
        (fk, r)
    }

    fn backward(&mut self, g: &Tensor2) -> Tensor4 {
        let g = self.embedding.backward(g);
        let g = self.pool.backward(&g);
        self.featsel.backward(&g)
    }
}

impl HasParams for FmfbBranch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.featsel.conv.visit_params(&join(prefix, "featsel.conv"), f);
        self.featsel.bn.visit_params(&join(prefix, "featsel.bn"), f);
        self.embedding.visit_params(&join(prefix, "embedding"), f);
    }
}

pub struct RfbBranch {
    pub featsel: Option<FeatSelRfb>,
    pub mapping: EmbeddingBlock,
}

impl RfbBranch {
    fn infer(&self, r: &Tensor2) -> Tensor2 {
        match &self.featsel {
            Some(fs) => self.mapping.infer(&fs.infer(r)),
            None => self.mapping.infer(r),
        }
    }

    fn forward(&mut self, r: &Tensor2) -> Tensor2 {
        match &mut self.featsel {
            Some(fs) => {
                let h = fs.forward(r);
                self.mapping.forward(&h)
            }
            None => self.mapping.forward(r),
        }
    }

    fn backward(&mut self, g: &Tensor2) -> Tensor2 {
        let g = self.mapping.backward(g);
        match &mut self.featsel {
            Some(fs) => fs.backward(&g),
            None => g,
        }
    }
}

impl HasParams for RfbBranch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(fs) = &mut self.featsel {
            fs.block.visit_params(&join(prefix, "featsel"), f);
        }
        self.mapping.visit_params(&join(prefix, "mapping"), f);
    }
}

/// Which branch families a training forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSelection {
    pub fmfb: bool,
    pub rfb: bool,
}

impl BranchSelection {
    pub const NONE: BranchSelection = BranchSelection {
        fmfb: false,
        rfb: false,
    };
    pub const ALL: BranchSelection = BranchSelection { fmfb: true, rfb: true };
}

/// Every tensor the losses and visualizations need from one pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub feature_map: Tensor4,
    pub pooled: Tensor2,
    pub embedding: Tensor2,
    pub logits: Tensor2,
    /// Per branch: the selected feature map `f^k` and `r_attr[k]`; empty when
    /// the family was not evaluated.
    pub attr_maps: Vec<Tensor4>,
    pub attr: Vec<Tensor2>,
    pub metric: Vec<Tensor2>,
}

/// Upstream gradients; `None` means the output does not reach the loss.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub logits: Option<Tensor2>,
    pub embedding: Option<Tensor2>,
    pub attr: Vec<Option<Tensor2>>,
    pub metric: Vec<Option<Tensor2>>,
}

pub struct ReidNet {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub pool: StabilizedGmp,
    pub embedding: EmbeddingBlock,
    pub classifier: Linear,
    pub fmfb: Vec<FmfbBranch>,
    pub rfb: Vec<RfbBranch>,
    last_selection: BranchSelection,
}

pub const CLASSIFIER_STD: f64 = 0.01;

impl ReidNet {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        spec.validate()?;
        let backbone = spec.backbone.build(seed)?;
        let channels = backbone.out_channels;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let embedding = EmbeddingBlock::new(channels, spec.embedding_dim, &mut rng);
        let classifier = Linear::new(spec.embedding_dim, spec.num_classes, false, CLASSIFIER_STD, &mut rng);
        let mut fmfb = Vec::new();
        let mut rfb = Vec::new();
        for b in &spec.branches {
            fmfb.push(FmfbBranch {
                featsel: FeatSelFmfb {
                    conv: Conv2d::new(channels, spec.fmfb_channels, 1, 1, 0, false, &mut rng),
                    bn: BatchNorm2d::new(spec.fmfb_channels),
                    relu: Relu::new(),
                },
                pool: StabilizedGmp::new(spec.branch_pool_kernel)?,
                embedding: EmbeddingBlock::new(spec.fmfb_channels, b.sr_dim, &mut rng),
            });
            let (featsel, map_in) = if b.holistic {
                (None, spec.embedding_dim)
            } else {
                let fs = FeatSelRfb {
                    block: EmbeddingBlock::new(spec.embedding_dim, spec.rfb_dim, &mut rng),
                    relu: Relu::new(),
                };
                (Some(fs), spec.rfb_dim)
            };
            rfb.push(RfbBranch {
                featsel,
                mapping: EmbeddingBlock::new(map_in, b.sr_dim, &mut rng),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            backbone,
            pool: StabilizedGmp::new(spec.pool_kernel)?,
            embedding,
            classifier,
            fmfb,
            rfb,
            last_selection: BranchSelection::NONE,
        })
    }

    /// Fails when a branch's output width differs from its teacher's
    /// representation width.
    pub fn check_target_dims(&self, dims: &[(String, usize)]) -> Result<()> {
        for b in &self.spec.branches {
            let found = dims.iter().find(|(v, _)| *v == b.view).map(|(_, d)| *d);
            match found {
                Some(d) if d == b.sr_dim => {}
                Some(d) => {
                    return Err(Error::Config(format!(
                        "branch {} predicts {} dims but its teacher emits {d}",
                        b.view, b.sr_dim
                    )))
                }
                None => return Err(Error::Config(format!("no teacher for distilled view {}", b.view))),
            }
        }
        Ok(())
    }

    /// Training-mode pass. Batch statistics are used and caches are kept
    /// for [`ReidNet::backward`].
    pub fn forward(&mut self, x: &Tensor4, sel: BranchSelection) -> Outputs {
        let f = self.backbone.forward(x);
        let p = self.pool.forward(&f);
        let r = self.embedding.forward(&p);
        let z = self.classifier.forward(&r);
        let (mut attr_maps, mut attr, mut metric) = (Vec::new(), Vec::new(), Vec::new());
        if sel.fmfb {
            for br in &mut self.fmfb {
                let (fk, ra) = br.forward(&f);
                attr_maps.push(fk);
                attr.push(ra);
            }
        }
        if sel.rfb {
            for br in &mut self.rfb {
                metric.push(br.forward(&r));
            }
        }
        self.last_selection = sel;
        Outputs {
            feature_map: f,
            pooled: p,
            embedding: r,
            logits: z,
            attr_maps,
            attr,
            metric,
        }
    }

    pub fn backward(&mut self, grads: &OutputGrads) {
        let sel = self.last_selection;
        let (n, d) = self.embedding_shape_hint(grads);
        let mut g_r = Tensor2::zeros((n, d));
        if let Some(gz) = &grads.logits {
            g_r += &self.classifier.backward(gz);
        }
        if let Some(ge) = &grads.embedding {
            g_r += ge;
        }
        if sel.rfb {
            for (br, g) in self.rfb.iter_mut().zip(&grads.metric) {
                if let Some(g) = g {
                    g_r += &br.backward(g);
                }
            }
        }
        let g_p = self.embedding.backward(&g_r);
        let mut g_f = self.pool.backward(&g_p);
        if sel.fmfb {
            for (br, g) in self.fmfb.iter_mut().zip(&grads.attr) {
                if let Some(g) = g {
                    g_f += &br.backward(g);
                }
            }
        }
        self.backbone.backward(&g_f);
    }

    fn embedding_shape_hint(&self, grads: &OutputGrads) -> (usize, usize) {
        let n = grads
            .logits
            .as_ref()
            .map(|g| g.nrows())
            .or_else(|| grads.embedding.as_ref().map(|g| g.nrows()))
            .or_else(|| {
                grads
                    .attr
                    .iter()
                    .chain(&grads.metric)
                    .flatten()
                    .map(|g| g.nrows())
                    .next()
            })
            .unwrap_or(0);
        (n, self.spec.embedding_dim)
    }

    /// Evaluation-mode pass over every output, using running statistics.
    pub fn infer(&self, x: &Tensor4) -> Outputs {
        let f = self.backbone.infer(x);
        let p = self.pool.infer(&f);
        let r = self.embedding.infer(&p);
        let z = self.classifier.infer(&r);
        let (mut attr_maps, mut attr) = (Vec::new(), Vec::new());
        for br in &self.fmfb {
            let (fk, ra) = br.infer(&f);
            attr_maps.push(fk);
            attr.push(ra);
        }
        let metric = self.rfb.iter().map(|br| br.infer(&r)).collect();
        Outputs {
            feature_map: f,
            pooled: p,
            embedding: r,
            logits: z,
            attr_maps,
            attr,
            metric,
        }
    }

    /// Evaluation-mode retrieval embedding only.
    pub fn embed(&self, x: &Tensor4) -> Tensor2 {
        let f = self.backbone.infer(x);
        self.embedding.infer(&self.pool.infer(&f))
    }
}

impl HasParams for ReidNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.embedding.visit_params(&join(prefix, "embedding"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
        for (b, spec) in self.fmfb.iter_mut().zip(&self.spec.branches) {
            b.visit_params(&join(prefix, &format!("fmfb.{}", spec.view)), f);
        }
        for (b, spec) in self.rfb.iter_mut().zip(&self.spec.branches) {
            b.visit_params(&join(prefix, &format!("rfb.{}", spec.view)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::param::ParamKind;

    pub(crate) fn tiny_spec(branches: Vec<BranchSpec>) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::reference([4, 4, 6, 8]),
            input_height: 32,
            input_width: 16,
            embedding_dim: 6,
            num_classes: 5,
            pool_kernel: 2,
            branch_pool_kernel: 2,
            fmfb_channels: 5,
            rfb_dim: 4,
            branches,
        }
    }

    fn two_branches() -> Vec<BranchSpec> {
        vec![
            BranchSpec {
                view: "Holistic".into(),
                sr_dim: 6,
                holistic: true,
            },
            BranchSpec {
                view: "Up1".into(),
                sr_dim: 3,
                holistic: false,
            },
        ]
    }

    #[test]
    fn holistic_rfb_has_no_featsel() {
        let net = ReidNet::build(&tiny_spec(two_branches()), 0).unwrap();
        assert!(net.rfb[0].featsel.is_none());
        assert!(net.rfb[1].featsel.is_some());
    }

    #[test]
    fn output_shapes_follow_spec() {
        let spec = tiny_spec(two_branches());
        let mut net = ReidNet::build(&spec, 0).unwrap();
        let x = Tensor4::from_shape_fn((3, 3, 32, 16), |(n, c, y, x)| ((n * 7 + c * 3 + y + x) % 5) as f64);
        let out = net.forward(&x, BranchSelection::ALL);
        let shapes = spec.output_shapes(3).unwrap();
        assert_eq!(out.feature_map.dim(), shapes.feature_map);
        assert_eq!(out.embedding.dim(), shapes.embedding);
        assert_eq!(out.logits.dim(), shapes.logits);
        assert_eq!(out.attr.iter().map(|a| a.dim()).collect::<Vec<_>>(), shapes.attr);
        assert_eq!(out.metric.iter().map(|a| a.dim()).collect::<Vec<_>>(), shapes.metric);
    }

    #[test]
    fn zero_weights_give_bn_bias() {
        let spec = tiny_spec(two_branches());
        let mut net = ReidNet::build(&spec, 3).unwrap();
        let mut k = 0.0;
        net.visit_params("", &mut |name, p| {
            if p.kind == ParamKind::Weight {
                p.value.fill(0.0);
            }
            if name.ends_with("bn.beta") {
                k += 0.25;
                p.value.fill(k);
            }
        });
        let x = Tensor4::from_shape_fn((4, 3, 32, 16), |(n, c, y, x)| ((n + c + y + x) % 3) as f64);
        let out = net.forward(&x, BranchSelection::ALL);
        let mut betas = std::collections::HashMap::new();
        net.visit_params("", &mut |name, p| {
            if name.ends_with("bn.beta") {
                betas.insert(name.to_string(), p.value[[0]]);
            }
        });
        let check = |t: &Tensor2, name: &str| {
            let b = betas[name];
            assert!(t.iter().all(|&v| (v - b).abs() < 1e-12), "{name}");
        };
        check(&out.embedding, "embedding.bn.beta");
        check(&out.attr[0], "fmfb.Holistic.embedding.bn.beta");
        check(&out.attr[1], "fmfb.Up1.embedding.bn.beta");
        check(&out.metric[0], "rfb.Holistic.mapping.bn.beta");
        check(&out.metric[1], "rfb.Up1.mapping.bn.beta");
    }

    #[test]
    fn target_dim_mismatch_is_a_config_error() {
        let net = ReidNet::build(&tiny_spec(two_branches()), 0).unwrap();
        assert!(net
            .check_target_dims(&[("Holistic".into(), 6), ("Up1".into(), 3)])
            .is_ok());
        assert!(matches!(
            net.check_target_dims(&[("Holistic".into(), 6), ("Up1".into(), 4)]),
            Err(Error::Config(_))
        ));
        assert!(net.check_target_dims(&[("Holistic".into(), 6)]).is_err());
    }

    #[test]
    fn eval_pass_is_deterministic() {
        let net = ReidNet::build(&tiny_spec(vec![]), 1).unwrap();
        let x = Tensor4::from_shape_fn((2, 3, 32, 16), |(n, c, y, x)| ((n + 2 * c + y * x) % 9) as f64 / 9.0);
        assert_eq!(net.embed(&x), net.embed(&x));
    }
}

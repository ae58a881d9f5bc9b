//! Feature extractors with output stride 16.
//!
//! The reference CNN is the desk-scale workhorse. The ResNet and SqueezeNet
//! adapters follow the published layouts (ResNet with the stride of the
//! first block of its third stage reset to 1; SqueezeNet 1.1 with padded
//! pooling) so every student of the roster has a buildable, shape-correct
//! backbone. None of them load pretrained weights.

use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Layer, MaxPool2d, Relu, Sequential, Tensor4};
use super::param::{join, HasParams, Param};
use crate::{Error, Result};

pub const BACKBONE_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Four stride-2 stages of `3x3 conv + BN + ReLU`, each followed by
    /// `extra_convs` stride-1 convs of the same width.
    Reference {
        widths: [usize; 4],
        extra_convs: usize,
    },
    /// `depth` in {18, 34, 50, 101, 152}; `base_width` is 64 for the
    /// standard networks.
    ResNet {
        depth: usize,
        base_width: usize,
    },
    SqueezeNet,
}

impl BackboneConfig {
    pub fn reference(widths: [usize; 4]) -> Self {
        BackboneConfig::Reference { widths, extra_convs: 1 }
    }

    pub fn resnet(depth: usize) -> Self {
        BackboneConfig::ResNet { depth, base_width: 64 }
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(match self {
            BackboneConfig::Reference { widths, .. } => widths[3],
            BackboneConfig::ResNet { depth, base_width } => {
                let (bottleneck, _) = resnet_layout(*depth)?;
                base_width * 8 * if bottleneck { 4 } else { 1 }
            }
            BackboneConfig::SqueezeNet => 512,
        })
    }

    /// Feature-map shape for an input of `height x width`: every backbone
    /// halves (rounding up) four times.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        Ok((
            self.out_channels()?,
            height.div_ceil(BACKBONE_STRIDE),
            width.div_ceil(BACKBONE_STRIDE),
        ))
    }

    pub fn build(&self, seed: u64) -> Result<Backbone> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = match self {
            BackboneConfig::Reference { widths, extra_convs } => reference_cnn(*widths, *extra_convs, &mut rng),
            BackboneConfig::ResNet { depth, base_width } => resnet(*depth, *base_width, &mut rng)?,
            BackboneConfig::SqueezeNet => squeezenet(&mut rng),
        };
        Ok(Backbone {
            config: self.clone(),
            out_channels: self.out_channels()?,
            body,
        })
    }
}

fn resnet_layout(depth: usize) -> Result<(bool, [usize; 4])> {
    Ok(match depth {
        18 => (false, [2, 2, 2, 2]),
        34 => (false, [3, 4, 6, 3]),
        50 => (true, [3, 4, 6, 3]),
        101 => (true, [3, 4, 23, 3]),
        152 => (true, [3, 8, 36, 3]),
        d => return Err(Error::Config(format!("unsupported ResNet depth {d}"))),
    })
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub out_channels: usize,
    body: Sequential,
}

impl Backbone {
    pub fn infer(&self, x: &Tensor4) -> Tensor4 {
        self.body.infer(x)
    }

    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.body.forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        self.body.backward(grad)
    }

    /// `(C, H, W)` of the feature map for an RGB input of `height x width`.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        self.body.out_shape((3, height, width))
    }
}

impl HasParams for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.body.visit_params(prefix, f);
    }
}

fn reference_cnn(widths: [usize; 4], extra: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    let mut in_c = 3;
    for (i, &w) in widths.iter().enumerate() {
        seq.push_conv_bn_relu(
            &format!("stage{}.down", i + 1),
            Conv2d::new(in_c, w, 3, 2, 1, false, rng),
        );
        for j in 0..extra {
            seq.push_conv_bn_relu(
                &format!("stage{}.conv{}", i + 1, j + 1),
                Conv2d::new(w, w, 3, 1, 1, false, rng),
            );
        }
        in_c = w;
    }
    seq
}

/// `relu(main(x) + shortcut(x))`.
struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
    relu: Relu,
}

impl HasParams for Residual {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.main.visit_params(prefix, f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_params(&join(prefix, "downsample"), f);
        }
    }
}

impl Layer for Residual {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        let skip = self.shortcut.as_ref().map_or_else(|| x.clone(), |s| s.infer(x));
        (self.main.infer(x) + skip).mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        let y = self.main.forward(x) + skip;
        self.relu.forward_any(&y)
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        let g = self.relu.backward_any(grad);
        let gx = self.main.backward(&g);
        match &mut self.shortcut {
            Some(s) => gx + s.backward(&g),
            None => gx + g,
        }
    }

    fn out_shape(&self, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        self.main.out_shape(shape)
    }
}

fn residual_block(
    in_c: usize,
    planes: usize,
    stride: usize,
    bottleneck: bool,
    rng: &mut ChaCha8Rng,
) -> (Residual, usize) {
    let mut main = Sequential::new();
    let out_c = if bottleneck {
        main.push_conv_bn_relu("conv1", Conv2d::new(in_c, planes, 1, 1, 0, false, rng));
        main.push_conv_bn_relu("conv2", Conv2d::new(planes, planes, 3, stride, 1, false, rng));
        main.push("conv3", Conv2d::new(planes, planes * 4, 1, 1, 0, false, rng));
        main.push("bn3", BatchNorm2d::new(planes * 4));
        planes * 4
    } else {
        main.push_conv_bn_relu("conv1", Conv2d::new(in_c, planes, 3, stride, 1, false, rng));
        main.push("conv2", Conv2d::new(planes, planes, 3, 1, 1, false, rng));
        main.push("bn2", BatchNorm2d::new(planes));
        planes
    };
    let shortcut = (stride != 1 || in_c != out_c).then(|| {
        let mut sc = Sequential::new();
        sc.push("0", Conv2d::new(in_c, out_c, 1, stride, 0, false, rng));
        sc.push("1", BatchNorm2d::new(out_c));
        sc
    });
    (
        Residual {
            main,
            shortcut,
            relu: Relu::new(),
        },
        out_c,
    )
}

fn resnet(depth: usize, base: usize, rng: &mut ChaCha8Rng) -> Result<Sequential> {
    let (bottleneck, blocks) = resnet_layout(depth)?;
    let mut seq = Sequential::new();
    seq.push_conv_bn_relu("stem", Conv2d::new(3, base, 7, 2, 3, false, rng));
    seq.push("maxpool", MaxPool2d::new(3, 2, 1));
    // Stage strides with the first block of the third stage reset from 2 to 1.
    let strides = [1, 2, 1, 2];
    let mut in_c = base;
    for (stage, (&n, &stride)) in blocks.iter().zip(strides.iter()).enumerate() {
        let planes = base << stage;
        for b in 0..n {
            let (block, out_c) = residual_block(in_c, planes, if b == 0 { stride } else { 1 }, bottleneck, rng);
            seq.push(format!("layer{}.{}", stage + 1, b), block);
            in_c = out_c;
        }
    }
    Ok(seq)
}

/// Squeeze 1x1, then parallel 1x1 and 3x3 expansions concatenated on channels.
struct Fire {
    squeeze: Sequential,
    expand1: Sequential,
    expand3: Sequential,
    split: usize,
}

impl Fire {
    fn new(in_c: usize, squeeze: usize, expand: usize, rng: &mut ChaCha8Rng) -> Self {
        let branch = |k: usize, pad: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let mut s = Sequential::new();
            s.push("conv", Conv2d::new(cin, cout, k, 1, pad, true, rng));
            s.push("relu", Relu::new());
            s
        };
        Self {
            squeeze: branch(1, 0, in_c, squeeze, rng),
            expand1: branch(1, 0, squeeze, expand, rng),
            expand3: branch(3, 1, squeeze, expand, rng),
            split: expand,
        }
    }
}

impl HasParams for Fire {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.expand1.visit_params(&join(prefix, "expand1x1"), f);
        self.expand3.visit_params(&join(prefix, "expand3x3"), f);
    }
}

impl Layer for Fire {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        let s = self.squeeze.infer(x);
        concatenate(Axis(1), &[self.expand1.infer(&s).view(), self.expand3.infer(&s).view()])
            .expect("same spatial size")
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let s = self.squeeze.forward(x);
        let a = self.expand1.forward(&s);
        let b = self.expand3.forward(&s);
        concatenate(Axis(1), &[a.view(), b.view()]).expect("same spatial size")
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        let ga = grad.slice(s![.., ..self.split, .., ..]).to_owned();
        let gb = grad.slice(s![.., self.split.., .., ..]).to_owned();
        let gs = self.expand1.backward(&ga) + self.expand3.backward(&gb);
        self.squeeze.backward(&gs)
    }

    fn out_shape(&self, (_, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        (2 * self.split, h, w)
    }
}

fn squeezenet(rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    seq.push("conv1", Conv2d::new(3, 64, 3, 2, 1, true, rng));
    seq.push("relu1", Relu::new());
    seq.push("pool1", MaxPool2d::new(3, 2, 1));
    seq.push("fire2", Fire::new(64, 16, 64, rng));
    seq.push("fire3", Fire::new(128, 16, 64, rng));
    seq.push("pool3", MaxPool2d::new(3, 2, 1));
    seq.push("fire4", Fire::new(128, 32, 128, rng));
    seq.push("fire5", Fire::new(256, 32, 128, rng));
    seq.push("pool5", MaxPool2d::new(3, 2, 1));
    seq.push("fire6", Fire::new(256, 48, 192, rng));
    seq.push("fire7", Fire::new(384, 48, 192, rng));
    seq.push("fire8", Fire::new(384, 64, 256, rng));
    seq.push("fire9", Fire::new(512, 64, 256, rng));
    seq
}

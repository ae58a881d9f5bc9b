//! Network building blocks: layers with hand-written gradients, backbones,
//! stabilized pooling, the re-identification model with its factorization
//! branches, checkpoints and attention overlays.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod param;
pub mod pooling;

pub use attention::{extract_attention_mask, AttentionMask};
pub use backbone::{Backbone, BackboneConfig};
pub use checkpoint::Checkpoint;
pub use layers::{Tensor2, Tensor4};
pub use model::{BranchSelection, BranchSpec, ModelSpec, OutputGrads, Outputs, ReidNet};
pub use param::{HasParams, Param, ParamKind};
pub use pooling::{global_avg, global_max, stabilized_gmp, StabilizedGmp};

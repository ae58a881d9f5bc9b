//! Experiment configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SyntheticSpec;
use crate::error::IoContext;
use crate::losses::LossWeights;
use crate::netblocks::model::hex;
use crate::netblocks::BackboneConfig;
use crate::views::{AugmentParams, AugmentStage, ViewRegistry};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A Market-1501 style tree that already exists.
    Directory { root: PathBuf, name: String },
    /// Rendered on demand into `root` when no manifest is present.
    Synthetic { root: PathBuf, spec: SyntheticSpec },
}

impl DatasetSource {
    pub fn root(&self) -> &Path {
        match self {
            DatasetSource::Directory { root, .. } | DatasetSource::Synthetic { root, .. } => root,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub backbone: BackboneConfig,
    pub holistic_dim: usize,
    pub partial_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub backbone: BackboneConfig,
    pub embedding_dim: usize,
    /// Output channels of the feature-map branch selection blocks.
    pub fmfb_channels: usize,
    /// Output width of the representation branch selection blocks.
    pub rfb_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Kernel of the stabilized pooling after the backbone.
    pub kernel: usize,
    /// Kernel of the stabilized pooling inside feature-map branches.
    pub branch_kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// L2 decay on convolution and fully connected weights.
    pub weight_decay: f64,
    /// Also decay batch-norm scale and shift.
    #[serde(default)]
    pub decay_norm_params: bool,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub const CANONICAL: OptimizerConfig = OptimizerConfig {
        lr: 0.0025,
        momentum: 0.9,
        weight_decay: 0.0005,
        decay_norm_params: false,
        batch_size: 32,
    };
}

/// Step schedule: the rate halves every `halve_every` epochs and training
/// stops after `epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub halve_every: usize,
    pub epochs: usize,
}

impl Schedule {
    pub const TEACHER: Schedule = Schedule {
        lr: 0.0025,
        halve_every: 20,
        epochs: 80,
    };
    pub const FINAL_STUDENT: Schedule = Schedule {
        lr: 0.0025,
        halve_every: 15,
        epochs: 50,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub partial_teacher: AugmentStage,
    pub holistic_teacher: AugmentStage,
    pub initial_student: AugmentStage,
    pub final_student: AugmentStage,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            partial_teacher: AugmentStage::PartialTeacher,
            holistic_teacher: AugmentStage::HolisticOrInitialStudent,
            initial_student: AugmentStage::HolisticOrInitialStudent,
            final_student: AugmentStage::FinalStudent,
        }
    }
}

/// Per-channel input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Mean and standard deviation measured on the training split.
    TrainingSet,
    Fixed {
        mean: [f32; 3],
        std: [f32; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub views: ViewRegistry,
    /// Views whose teachers supervise the final student; empty means all.
    #[serde(default)]
    pub distill_views: Vec<String>,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub pooling: PoolingConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub teacher_schedule: Schedule,
    pub student_schedule: Schedule,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub augment_params: AugmentParams,
    pub normalization: Normalization,
    pub seeds: Seeds,
}

/// One row of the student roster: short name, backbone, embedding width.
pub fn student_roster() -> Vec<(&'static str, BackboneConfig, usize)> {
    vec![
        ("S", BackboneConfig::SqueezeNet, 512),
        ("R18a", BackboneConfig::resnet(18), 512),
        ("R50a", BackboneConfig::resnet(50), 512),
        ("R50b", BackboneConfig::resnet(50), 2048),
        ("R101a", BackboneConfig::resnet(101), 512),
        ("R152a", BackboneConfig::resnet(152), 512),
        ("R152b", BackboneConfig::resnet(152), 2048),
    ]
}

impl FdConfig {
    /// Full-scale settings for a Market-1501 style tree at `root`, with the
    /// named roster student and ResNet-`teacher_depth` teachers.
    pub fn canonical(root: &Path, student: &str, teacher_depth: usize) -> Result<Self> {
        let (_, backbone, embedding_dim) = student_roster()
            .into_iter()
            .find(|(n, _, _)| *n == student)
            .ok_or_else(|| Error::Config(format!("unknown student {student}")))?;
        Ok(Self {
            name: format!("{student}-r{teacher_depth}"),
            dataset: DatasetSource::Directory {
                root: root.to_path_buf(),
                name: "market1501".into(),
            },
            views: ViewRegistry::canonical(),
            distill_views: Vec::new(),
            teacher: TeacherConfig {
                backbone: BackboneConfig::resnet(teacher_depth),
                holistic_dim: 512,
                partial_dim: 256,
            },
            student: StudentConfig {
                backbone,
                embedding_dim,
                fmfb_channels: 512,
                rfb_dim: 512,
            },
            pooling: PoolingConfig {
                kernel: 4,
                branch_kernel: 4,
            },
            loss: LossWeights::CANONICAL,
            optimizer: OptimizerConfig::CANONICAL,
            teacher_schedule: Schedule::TEACHER,
            student_schedule: Schedule::FINAL_STUDENT,
            augment: AugmentConfig::default(),
            augment_params: AugmentParams::default(),
            normalization: Normalization::TrainingSet,
            seeds: Seeds { init: 1, data: 2 },
        })
    }

    /// Small synthetic setup that runs end to end on a laptop CPU.
    pub fn desk(root: &Path, seed: u64) -> Self {
        Self {
            name: "desk".into(),
            dataset: DatasetSource::Synthetic {
                root: root.to_path_buf(),
                spec: SyntheticSpec::default(),
            },
            views: ViewRegistry::with_resolutions((64, 32), (32, 32)),
            distill_views: Vec::new(),
            teacher: TeacherConfig {
                backbone: BackboneConfig::Reference {
                    widths: [16, 24, 32, 48],
                    extra_convs: 1,
                },
                holistic_dim: 64,
                partial_dim: 32,
            },
            student: StudentConfig {
                backbone: BackboneConfig::Reference {
                    widths: [8, 12, 16, 24],
                    extra_convs: 0,
                },
                embedding_dim: 32,
                fmfb_channels: 32,
                rfb_dim: 32,
            },
            pooling: PoolingConfig {
                kernel: 2,
                branch_kernel: 2,
            },
            loss: LossWeights::CANONICAL,
            optimizer: OptimizerConfig {
                lr: 0.01,
                batch_size: 32,
                ..OptimizerConfig::CANONICAL
            },
            teacher_schedule: Schedule {
                lr: 0.01,
                halve_every: 8,
                epochs: 16,
            },
            student_schedule: Schedule {
                lr: 0.01,
                halve_every: 6,
                epochs: 12,
            },
            augment: AugmentConfig::default(),
            augment_params: AugmentParams::default(),
            normalization: Normalization::TrainingSet,
            seeds: Seeds {
                init: seed,
                data: seed.wrapping_add(1),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        self.loss.validate()?;
        self.distilled_views()?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for s in [&self.teacher_schedule, &self.student_schedule] {
            if s.halve_every == 0 || s.lr.is_nan() || s.lr <= 0.0 {
                return Err(Error::Config(format!("invalid schedule {s:?}")));
            }
        }
        if self.pooling.kernel == 0 || self.pooling.branch_kernel == 0 {
            return Err(Error::Config("pooling kernels must be positive".into()));
        }
        if self.views.holistic().is_none() {
            return Err(Error::Config("the registry needs a holistic view".into()));
        }
        Ok(())
    }

    /// Views supervising the final student, in registry order.
    pub fn distilled_views(&self) -> Result<ViewRegistry> {
        if self.distill_views.is_empty() {
            Ok(self.views.clone())
        } else {
            let wanted: Vec<String> = self
                .views
                .names()
                .into_iter()
                .filter(|n| self.distill_views.contains(n))
                .collect();
            if wanted.len() != self.distill_views.len() {
                return Err(Error::Config(format!(
                    "distill_views {:?} not all in the registry",
                    self.distill_views
                )));
            }
            self.views.subset(&wanted)
        }
    }

    pub fn teacher_dim(&self, holistic: bool) -> usize {
        if holistic {
            self.teacher.holistic_dim
        } else {
            self.teacher.partial_dim
        }
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, toml::to_string_pretty(self)?).at(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_values() {
        let c = FdConfig::canonical(Path::new("/data/market"), "R50b", 101).unwrap();
        assert_eq!(c.optimizer.batch_size, 32);
        assert_eq!(c.optimizer.lr, 0.0025);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.weight_decay, 0.0005);
        assert_eq!((c.teacher_schedule.halve_every, c.teacher_schedule.epochs), (20, 80));
        assert_eq!((c.student_schedule.halve_every, c.student_schedule.epochs), (15, 50));
        assert_eq!(c.student.embedding_dim, 2048);
        assert_eq!((c.loss.alpha, c.loss.beta), (4.0, 2.0));
        assert_eq!(c.pooling.kernel, 4);
        assert!(FdConfig::canonical(Path::new("."), "R34", 101).is_err());
        assert_eq!(student_roster().len(), 7);
    }

    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let c = FdConfig::desk(Path::new("data/synthetic"), 3);
        c.save(&path).unwrap();
        let back = FdConfig::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn distill_subset_follows_registry_order() {
        let mut c = FdConfig::desk(Path::new("x"), 1);
        c.distill_views = vec!["Mid1".into(), "Holistic".into()];
        assert_eq!(c.distilled_views().unwrap().names(), vec!["Holistic", "Mid1"]);
        c.distill_views = vec!["Nope".into()];
        assert!(c.validate().is_err());
    }
}

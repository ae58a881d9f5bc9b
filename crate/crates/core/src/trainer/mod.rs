//! Training: per-view models with the classification loss, and the final
//! student with the full distillation objective.

mod optim;
mod pipeline;
mod visualize;

pub use optim::{lr_at, Sgd};
pub use pipeline::{
    build_sr_cache, eval_checkpoint, loss_ablation, measure_norm, resolve_dataset, run_pipeline, run_sweep,
    teacher_ablation, PipelineOptions, PipelineReport, RunPaths, RunState, Step, SweepReport, SweepRow, SweepVariant,
};
pub use visualize::render_attention;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FdConfig, Schedule};
use crate::error::IoContext;
use crate::features::{to_tensor, InputNorm};
use crate::image::Image;
use crate::losses::{cls_loss, distill_objective, DistillBatch, LossBreakdown, ViewMask};
use crate::netblocks::{BranchSelection, BranchSpec, Checkpoint, HasParams, ModelSpec, OutputGrads, ReidNet, Tensor4};
use crate::srstore::SrCache;
use crate::views::{augment, crop_view, AugmentStage, EraseRecord, ViewRegistry, ViewSpec};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";

/// Stateless 64-bit mixing of two seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-name seed offset.
fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Which network a per-view training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    InitialStudent,
}

/// Shapes of a teacher or initial student for `view`.
pub fn view_model_spec(cfg: &FdConfig, view: &ViewSpec, role: Role, num_classes: usize) -> ModelSpec {
    let (backbone, embedding_dim) = match role {
        Role::Teacher => (cfg.teacher.backbone.clone(), cfg.teacher_dim(view.is_holistic())),
        Role::InitialStudent => (cfg.student.backbone.clone(), cfg.student.embedding_dim),
    };
    ModelSpec {
        backbone,
        input_height: view.out_height,
        input_width: view.out_width,
        embedding_dim,
        num_classes,
        pool_kernel: cfg.pooling.kernel,
        branch_pool_kernel: cfg.pooling.branch_kernel,
        fmfb_channels: cfg.student.fmfb_channels,
        rfb_dim: cfg.student.rfb_dim,
        branches: Vec::new(),
    }
}

/// The distilled student: the initial student plus one branch pair per
/// distilled view.
pub fn student_spec(cfg: &FdConfig, holistic: &ViewSpec, num_classes: usize, distilled: &ViewRegistry) -> ModelSpec {
    let mut spec = view_model_spec(cfg, holistic, Role::InitialStudent, num_classes);
    spec.branches = distilled
        .views
        .iter()
        .map(|v| BranchSpec {
            view: v.name.clone(),
            sr_dim: cfg.teacher_dim(v.is_holistic()),
            holistic: v.is_holistic(),
        })
        .collect();
    spec
}

/// Training inputs shared by every run.
pub struct TrainData<'a> {
    pub images: &'a [Image],
    pub labels: &'a [usize],
    pub norm: InputNorm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample total loss.
    pub loss: f64,
    pub cls: f64,
    pub attr: Vec<f64>,
    pub metric: Vec<f64>,
    /// Samples dropped from each view's regression terms.
    pub masked: Vec<usize>,
    pub fully_masked_views: usize,
    pub seconds: f64,
}

struct Batch {
    x: Tensor4,
    labels: Vec<usize>,
    samples: Vec<u64>,
    erases: Vec<EraseRecord>,
}

/// Crops and augments `indices` in parallel; each sample's randomness
/// depends only on `(seed, sample)`.
fn make_batch(
    data: &TrainData<'_>,
    indices: &[usize],
    view: &ViewSpec,
    stage: AugmentStage,
    params: &crate::views::AugmentParams,
    seed: u64,
) -> Result<Batch> {
    let augmented = indices
        .par_iter()
        .map(|&i| {
            Ok(augment(
                &crop_view(&data.images[i], view)?,
                stage,
                params,
                mix(seed, i as u64),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = augmented.iter().map(|a| &a.image).collect();
    Ok(Batch {
        x: to_tensor(&refs, &data.norm),
        labels: indices.iter().map(|&i| data.labels[i]).collect(),
        samples: indices.iter().map(|&i| i as u64).collect(),
        erases: augmented.iter().map(|a| a.erase).collect(),
    })
}

/// Shuffled batches of an epoch. Batches smaller than two samples are
/// dropped because batch normalization needs a spread.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = File::options().create(true).append(true).open(path).at(path)?;
    writeln!(f, "{}", serde_json::to_string(log)?).at(path)
}

/// Forward, loss and backward for the batch of sample indices, given a seed.
type BatchStep<'a> = dyn FnMut(&mut ReidNet, &[usize], u64) -> Result<LossBreakdown> + 'a;

/// The shared epoch loop. `step` runs forward, loss and backward for one
/// batch and returns the loss breakdown; the optimizer then updates every
/// parameter not `frozen`. The checkpoint in `out` is rewritten after every
/// finite epoch, so a divergence leaves the last finite one on disk.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut ReidNet,
    cfg: &FdConfig,
    schedule: &Schedule,
    n_samples: usize,
    seed: u64,
    out: &Path,
    views: Option<&ViewRegistry>,
    frozen: &dyn Fn(&str) -> bool,
    step: &mut BatchStep<'_>,
) -> Result<Vec<EpochLog>> {
    fs::create_dir_all(out).at(out)?;
    let log_path = out.join(LOG_FILE);
    if log_path.exists() {
        fs::remove_file(&log_path).at(&log_path)?;
    }
    let mut sgd = Sgd::new(&cfg.optimizer);
    let mut logs = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let lr = lr_at(schedule, epoch);
        let epoch_seed = mix(seed, epoch as u64);
        let mut log = EpochLog {
            epoch,
            lr,
            ..Default::default()
        };
        let mut seen = 0usize;
        for (b, idx) in epoch_batches(n_samples, cfg.optimizer.batch_size, epoch_seed)
            .iter()
            .enumerate()
        {
            net.zero_grad();
            let br = step(net, idx, mix(epoch_seed, b as u64 + 1))?;
            if !br.total.is_finite() {
                return Err(Error::Diverged { epoch, loss: br.total });
            }
            sgd.step(net, lr, frozen);
            seen += idx.len();
            log.loss += br.total;
            log.cls += br.cls;
            accumulate(&mut log.attr, &br.attr);
            accumulate(&mut log.metric, &br.metric);
            if log.masked.len() < br.masked.len() {
                log.masked.resize(br.masked.len(), 0);
            }
            for (m, v) in log.masked.iter_mut().zip(&br.masked) {
                *m += v;
            }
            log.fully_masked_views += br.fully_masked_views;
        }
        let per = 1.0 / seen.max(1) as f64;
        log.loss *= per;
        log.cls *= per;
        log.seconds = start.elapsed().as_secs_f64();
        log::info!("{}: epoch {epoch} lr {lr:.5} loss {:.4}", out.display(), log.loss);
        let mut metrics = BTreeMap::new();
        metrics.insert("loss".to_string(), log.loss);
        Checkpoint::capture(net, views, epoch + 1, metrics).save(out)?;
        append_log(&log_path, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

fn accumulate(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.len() < v.len() {
        acc.resize(v.len(), 0.0);
    }
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Trains a teacher or the initial student for `view` with the
/// classification loss only, writing the checkpoint and a JSONL log to
/// `out`.
pub fn train_view_model(
    cfg: &FdConfig,
    view: &ViewSpec,
    role: Role,
    data: &TrainData<'_>,
    num_classes: usize,
    out: &Path,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let spec = view_model_spec(cfg, view, role, num_classes);
    let (stage, schedule, tag) = match role {
        Role::Teacher if view.is_holistic() => (cfg.augment.holistic_teacher, cfg.teacher_schedule, 1),
        Role::Teacher => (cfg.augment.partial_teacher, cfg.teacher_schedule, 1),
        Role::InitialStudent => (cfg.augment.initial_student, cfg.teacher_schedule, 2),
    };
    let seed = mix(name_seed(&view.name), tag);
    let mut net = ReidNet::build(&spec, mix(cfg.seeds.init, seed))?;
    let registry = ViewRegistry {
        views: vec![view.clone()],
    };
    let logs = fit(
        &mut net,
        cfg,
        &schedule,
        data.images.len(),
        mix(cfg.seeds.data, seed),
        out,
        Some(&registry),
        &|_| false,
        &mut |net, idx, batch_seed| {
            let batch = make_batch(data, idx, view, stage, &cfg.augment_params, batch_seed)?;
            let outputs = net.forward(&batch.x, BranchSelection::NONE);
            let l = cls_loss(&outputs.logits, &batch.labels)?;
            net.backward(&OutputGrads {
                logits: Some(l.grad),
                ..Default::default()
            });
            Ok(LossBreakdown {
                total: l.value,
                cls: l.value,
                ..Default::default()
            })
        },
    )?;
    Ok((Checkpoint::load(out, Some(&spec.config_hash()))?, logs))
}

/// Trains the final student on the distillation objective. Backbone,
/// embedding and classifier start from `init`; branch parameters of a
/// family whose loss weight is zero are neither evaluated nor updated.
pub fn train_student_fd(
    cfg: &FdConfig,
    data: &TrainData<'_>,
    num_classes: usize,
    cache: &SrCache,
    init: &Checkpoint,
    out: &Path,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let holistic = cfg
        .views
        .holistic()
        .ok_or_else(|| Error::Config("the registry needs a holistic view".into()))?
        .clone();
    let distilled = cfg.distilled_views()?;
    let spec = student_spec(cfg, &holistic, num_classes, &distilled);
    let mut net = ReidNet::build(&spec, mix(cfg.seeds.init, 3))?;
    let dims: Vec<(String, usize)> = distilled
        .names()
        .into_iter()
        .map(|v| {
            let d = cache.dim(&v).ok_or_else(|| Error::MissingSr {
                sample_id: 0,
                view_id: v.clone(),
            })?;
            Ok((v, d))
        })
        .collect::<Result<_>>()?;
    net.check_target_dims(&dims)?;
    let mut shared = 0;
    net.visit_params("", &mut |n, _| {
        if !is_branch_param(n) {
            shared += 1
        }
    });
    let copied = init.copy_into(&mut net, |n| !is_branch_param(n))?;
    if copied != shared {
        return Err(Error::Config(format!(
            "initial student provided {copied} of {shared} shared tensors"
        )));
    }
    let sel = BranchSelection {
        fmfb: cfg.loss.alpha > 0.0,
        rfb: cfg.loss.beta > 0.0,
    };
    let view_refs: Vec<&ViewSpec> = distilled.views.iter().collect();
    let names = distilled.names();
    let stage = cfg.augment.final_student;
    let frozen = |n: &str| (!sel.fmfb && n.starts_with("fmfb.")) || (!sel.rfb && n.starts_with("rfb."));
    let logs = fit(
        &mut net,
        cfg,
        &cfg.student_schedule,
        data.images.len(),
        mix(cfg.seeds.data, 3),
        out,
        Some(&distilled),
        &frozen,
        &mut |net, idx, batch_seed| {
            let batch = make_batch(data, idx, &holistic, stage, &cfg.augment_params, batch_seed)?;
            let targets = names
                .iter()
                .map(|v| cache.batch(&batch.samples, v))
                .collect::<Result<Vec<_>>>()?;
            let mask = ViewMask::from_erasures(&batch.erases, &view_refs, holistic.out_height, holistic.out_width);
            let outputs = net.forward(&batch.x, sel);
            let (breakdown, grads) = distill_objective(
                &DistillBatch {
                    logits: &outputs.logits,
                    labels: &batch.labels,
                    targets: &targets,
                    attr: &outputs.attr,
                    metric: &outputs.metric,
                    mask: &mask,
                },
                cfg.loss,
            )?;
            net.backward(&OutputGrads {
                logits: Some(grads.logits),
                embedding: None,
                attr: grads.attr.into_iter().map(Some).collect(),
                metric: grads.metric.into_iter().map(Some).collect(),
            });
            Ok(breakdown)
        },
    )?;
    Ok((Checkpoint::load(out, Some(&spec.config_hash()))?, logs))
}

pub fn is_branch_param(name: &str) -> bool {
    name.starts_with("fmfb.") || name.starts_with("rfb.")
}

//! The three-step procedure as a resumable run directory, and ablation
//! sweeps on top of it.
//!
//! ```text
//! <out>/state.json            config hash, completed steps, input normalization
//! <out>/teachers/<view>/      one checkpoint per view
//! <out>/initial_student/
//! <out>/sr_cache/sr_<view>.bin
//! <out>/student/
//! <out>/report.json, report.txt
//! <out>/manifest.json         inventory of the artifacts above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_student_fd, train_view_model, Role, TrainData};
use crate::config::{DatasetSource, FdConfig, Normalization};
use crate::datasets::{generate_synthetic, ingest, Dataset, SyntheticSpec};
use crate::error::IoContext;
use crate::evaluator::{evaluate_dataset, EvalReport, Protocol};
use crate::features::InputNorm;
use crate::losses::LossWeights;
use crate::netblocks::{Checkpoint, ReidNet};
use crate::srstore::{build_cache, cache_file, cache_hash, BuildStats, SrCache, TeacherHandle};
use crate::views::{GROUP1, GROUP2, HOLISTIC};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Teachers,
    SrCache,
    Student,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub norm: InputNorm,
    pub completed: Vec<Step>,
    /// Hash of the representation cache when the student step finished.
    pub sr_cache_hash: Option<String>,
}

impl RunState {
    pub fn done(&self, step: Step) -> bool {
        self.completed.contains(&step)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }
}

/// Locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }
    pub fn teacher(&self, view: &str) -> PathBuf {
        self.root.join("teachers").join(view)
    }
    pub fn initial_student(&self) -> PathBuf {
        self.root.join("initial_student")
    }
    pub fn sr_cache(&self) -> PathBuf {
        self.root.join("sr_cache")
    }
    pub fn student(&self) -> PathBuf {
        self.root.join("student")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    /// Stop once this step is complete.
    pub stop_after: Option<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub initial_student: Option<EvalReport>,
    pub student: Option<EvalReport>,
    pub sr_cache_hash: Option<String>,
    /// Wall-clock seconds per step executed in this invocation.
    pub seconds: BTreeMap<String, f64>,
    pub skipped: Vec<Step>,
}

/// Loads the configured dataset, rendering or ingesting it when needed.
pub fn resolve_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic { root, spec } => {
            let spec_path = root.join("synthetic_spec.json");
            let current = fs::read(&spec_path)
                .ok()
                .and_then(|b| serde_json::from_slice::<SyntheticSpec>(&b).ok());
            if current.as_ref() != Some(spec) || !root.join(crate::datasets::MANIFEST_FILE).exists() {
                fs::create_dir_all(root).at(root)?;
                generate_synthetic(spec, root)?;
                fs::write(&spec_path, serde_json::to_vec_pretty(spec)?).at(&spec_path)?;
            }
            Dataset::open(root)
        }
        DatasetSource::Directory { root, name } => {
            let manifest = ingest(root, name)?;
            manifest.save(root)?;
            Dataset::from_manifest(root, manifest)
        }
    }
}

pub fn measure_norm(cfg: &FdConfig, data: &Dataset) -> InputNorm {
    match &cfg.normalization {
        Normalization::TrainingSet => InputNorm::measure(&data.train),
        Normalization::Fixed { mean, std } => InputNorm { mean: *mean, std: *std },
    }
}

fn open_or_init_state(cfg: &FdConfig, paths: &RunPaths, data: &Dataset) -> Result<RunState> {
    let hash = cfg.hash();
    if paths.state().exists() {
        let state = RunState::load(&paths.state())?;
        if state.config_hash != hash {
            return Err(Error::ConfigHashMismatch {
                expected: state.config_hash,
                found: hash,
            });
        }
        if state.dataset_fingerprint != data.fingerprint() {
            return Err(Error::Provenance(format!(
                "run was started on dataset {}, found {}",
                state.dataset_fingerprint,
                data.fingerprint()
            )));
        }
        return Ok(state);
    }
    fs::create_dir_all(&paths.root).at(&paths.root)?;
    let state = RunState {
        config_hash: hash,
        dataset_fingerprint: data.fingerprint().to_string(),
        norm: measure_norm(cfg, data),
        completed: Vec::new(),
        sr_cache_hash: None,
    };
    state.save(&paths.state())?;
    Ok(state)
}

/// A checkpoint from a finished earlier attempt, if any.
fn finished(dir: &Path, hash: &str, epochs: usize) -> Option<Checkpoint> {
    Checkpoint::load(dir, Some(hash))
        .ok()
        .filter(|c| c.manifest.epoch == epochs)
}

/// Step 1: every view's teacher plus the initial student, in parallel.
fn step_teachers(cfg: &FdConfig, paths: &RunPaths, data: &Dataset, norm: InputNorm) -> Result<()> {
    let labels = data.labels()?;
    let train = TrainData {
        images: &data.train,
        labels: &labels,
        norm,
    };
    let holistic = cfg.views.holistic().expect("validated config").clone();
    let mut jobs: Vec<(PathBuf, crate::views::ViewSpec, Role)> = cfg
        .views
        .views
        .iter()
        .map(|v| (paths.teacher(&v.name), v.clone(), Role::Teacher))
        .collect();
    jobs.push((paths.initial_student(), holistic, Role::InitialStudent));
    let classes = data.manifest.num_classes;
    jobs.par_iter()
        .map(|(dir, view, role)| {
            let hash = super::view_model_spec(cfg, view, *role, classes).config_hash();
            if finished(dir, &hash, cfg.teacher_schedule.epochs).is_some() {
                log::info!("reusing {}", dir.display());
                return Ok(());
            }
            train_view_model(cfg, view, *role, &train, classes, dir).map(|_| ())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

fn load_teachers(cfg: &FdConfig, teachers: &Path, classes: usize) -> Result<BTreeMap<String, (ReidNet, String)>> {
    cfg.views
        .views
        .iter()
        .map(|v| {
            let hash = super::view_model_spec(cfg, v, Role::Teacher, classes).config_hash();
            let ckpt = Checkpoint::load(&teachers.join(&v.name), Some(&hash))?;
            Ok((v.name.clone(), (ckpt.to_model()?, hash)))
        })
        .collect()
}

/// Step 2: representations of every training image under every teacher
/// found in `<teachers>/<view>/`, written to `out`.
pub fn build_sr_cache(
    cfg: &FdConfig,
    teachers: &Path,
    data: &Dataset,
    norm: InputNorm,
    out: &Path,
) -> Result<BuildStats> {
    let teachers = load_teachers(cfg, teachers, data.manifest.num_classes)?;
    let handles: BTreeMap<String, TeacherHandle<'_>> = teachers
        .iter()
        .map(|(v, (net, hash))| {
            (
                v.clone(),
                TeacherHandle {
                    model: net,
                    hash: hash.clone(),
                    dim: net.spec.embedding_dim,
                },
            )
        })
        .collect();
    let stats = build_cache(out, &cfg.views, &handles, &data.train, data.fingerprint(), &norm)?;
    log::info!("representation cache: {stats:?}");
    Ok(stats)
}

fn initial_student(cfg: &FdConfig, paths: &RunPaths, classes: usize) -> Result<Checkpoint> {
    let holistic = cfg.views.holistic().expect("validated config");
    let hash = super::view_model_spec(cfg, holistic, Role::InitialStudent, classes).config_hash();
    Checkpoint::load(&paths.initial_student(), Some(&hash))
}

/// Step 3 for `cfg` into `out`, reading the cache of `paths`. Returns the
/// cache hash, which must not change while the student trains.
fn step_student(cfg: &FdConfig, paths: &RunPaths, data: &Dataset, norm: InputNorm, out: &Path) -> Result<String> {
    let labels = data.labels()?;
    let train = TrainData {
        images: &data.train,
        labels: &labels,
        norm,
    };
    let classes = data.manifest.num_classes;
    let distilled = cfg.distilled_views()?;
    let before = cache_hash(&paths.sr_cache(), &distilled)?;
    let cache = SrCache::open(&paths.sr_cache(), &distilled, data.fingerprint())?;
    cache.check_complete(data.train.len())?;
    let init = initial_student(cfg, paths, classes)?;
    train_student_fd(cfg, &train, classes, &cache, &init, out)?;
    let after = cache_hash(&paths.sr_cache(), &distilled)?;
    if before != after {
        return Err(Error::Pipeline(
            "representation cache changed during distillation".into(),
        ));
    }
    Ok(after)
}

pub fn eval_checkpoint(dir: &Path, name: &str, cfg: &FdConfig, data: &Dataset, norm: &InputNorm) -> Result<EvalReport> {
    let net = Checkpoint::load(dir, None)?.to_model()?;
    let holistic = cfg.views.holistic().expect("validated config");
    let r = evaluate_dataset(&net, data, holistic, norm, Protocol::Standard)?;
    Ok(EvalReport::new(name, &data.manifest.name, &r))
}

/// Runs Steps 1-3 and the evaluation, skipping steps already recorded in
/// `<out>/state.json`. A state written under a different configuration is
/// refused. On failure the state keeps every completed step.
pub fn run_pipeline(cfg: &FdConfig, out: &Path, opts: PipelineOptions) -> Result<PipelineReport> {
    cfg.validate()?;
    let paths = RunPaths::new(out);
    let data = resolve_dataset(&cfg.dataset)?;
    let mut state = open_or_init_state(cfg, &paths, &data)?;
    let norm = state.norm;
    let mut report = PipelineReport {
        config_hash: state.config_hash.clone(),
        dataset_fingerprint: state.dataset_fingerprint.clone(),
        initial_student: None,
        student: None,
        sr_cache_hash: state.sr_cache_hash.clone(),
        seconds: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for step in [Step::Teachers, Step::SrCache, Step::Student, Step::Evaluate] {
        if state.done(step) {
            report.skipped.push(step);
        } else {
            let start = Instant::now();
            let result = match step {
                Step::Teachers => step_teachers(cfg, &paths, &data, norm),
                Step::SrCache => {
                    build_sr_cache(cfg, &paths.root.join("teachers"), &data, norm, &paths.sr_cache()).map(|_| ())
                }
                Step::Student => step_student(cfg, &paths, &data, norm, &paths.student()).map(|h| {
                    state.sr_cache_hash = Some(h.clone());
                    report.sr_cache_hash = Some(h);
                }),
                Step::Evaluate => {
                    let init = eval_checkpoint(&paths.initial_student(), "initial_student", cfg, &data, &norm)?;
                    let fd = eval_checkpoint(&paths.student(), "student", cfg, &data, &norm)?;
                    let text = format!("{}{}", init.to_text(), fd.to_text());
                    fs::write(paths.root.join("report.txt"), text).at(&paths.root)?;
                    fs::write(paths.report(), serde_json::to_vec_pretty(&[&init, &fd])?).at(paths.report())?;
                    Ok(())
                }
            };
            if let Err(e) = result {
                state.save(&paths.state())?;
                return Err(e);
            }
            state.completed.push(step);
            state.save(&paths.state())?;
            report
                .seconds
                .insert(format!("{step:?}").to_lowercase(), start.elapsed().as_secs_f64());
        }
        if opts.stop_after == Some(step) {
            break;
        }
    }
    if state.done(Step::Evaluate) {
        let evals: Vec<EvalReport> = serde_json::from_slice(&fs::read(paths.report()).at(paths.report())?)?;
        report.initial_student = evals.first().cloned();
        report.student = evals.get(1).cloned();
        write_manifest(cfg, &paths)?;
    }
    Ok(report)
}

fn write_manifest(cfg: &FdConfig, paths: &RunPaths) -> Result<()> {
    let rel = |p: PathBuf| p.strip_prefix(&paths.root).unwrap_or(&p).display().to_string();
    let manifest = serde_json::json!({
        "config_hash": cfg.hash(),
        "teachers": cfg.views.names().iter().map(|v| rel(paths.teacher(v))).collect::<Vec<_>>(),
        "initial_student": rel(paths.initial_student()),
        "sr_cache": cfg.views.names().iter().map(|v| rel(cache_file(&paths.sr_cache(), v))).collect::<Vec<_>>(),
        "student": rel(paths.student()),
        "report": rel(paths.report()),
    });
    let path = paths.manifest();
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)
}

/// One cell of an ablation: loss weights and the distilled views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepVariant {
    pub name: String,
    pub loss: LossWeights,
    pub distill_views: Vec<String>,
}

/// Loss ablation: classification only, plus each regression family, plus both.
pub fn loss_ablation(cfg: &FdConfig) -> Vec<SweepVariant> {
    let LossWeights { alpha, beta } = cfg.loss;
    [
        ("L_cls", 0.0, 0.0),
        ("+L_attr", alpha, 0.0),
        ("+L_metric", 0.0, beta),
        ("+L_attr+L_metric", alpha, beta),
    ]
    .into_iter()
    .map(|(name, alpha, beta)| SweepVariant {
        name: name.into(),
        loss: LossWeights { alpha, beta },
        distill_views: cfg.distill_views.clone(),
    })
    .collect()
}

/// Teacher ablation: holistic only, plus the first group, plus both groups.
pub fn teacher_ablation(cfg: &FdConfig) -> Vec<SweepVariant> {
    let hol = vec![HOLISTIC.to_string()];
    let g1: Vec<String> = hol
        .iter()
        .cloned()
        .chain(GROUP1.iter().map(|s| s.to_string()))
        .collect();
    let all: Vec<String> = g1.iter().cloned().chain(GROUP2.iter().map(|s| s.to_string())).collect();
    [("Hol", hol), ("Hol+PartialG1", g1), ("Hol+PartialG1+PartialG2", all)]
        .into_iter()
        .map(|(name, views)| SweepVariant {
            name: name.into(),
            loss: cfg.loss,
            distill_views: views,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub teachers: Vec<String>,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_markdown(&self) -> String {
        let mut s =
            String::from("| variant | alpha | beta | teachers | Rank-1 (%) | mAP (%) |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {:.2} |\n",
                r.variant,
                r.alpha,
                r.beta,
                r.teachers.join(","),
                100.0 * r.rank1,
                100.0 * r.map
            ));
        }
        s
    }
}

/// Runs Steps 1-2 once under `<out>/base`, then Step 3 and evaluation for
/// every variant under `<out>/variants/<name>`, and writes
/// `sweep_report.json` and `sweep_report.md`.
pub fn run_sweep(cfg: &FdConfig, out: &Path, variants: &[SweepVariant]) -> Result<SweepReport> {
    let base = out.join("base");
    let mut base_cfg = cfg.clone();
    base_cfg.distill_views.clear();
    run_pipeline(
        &base_cfg,
        &base,
        PipelineOptions {
            stop_after: Some(Step::SrCache),
        },
    )?;
    let paths = RunPaths::new(&base);
    let data = resolve_dataset(&cfg.dataset)?;
    let norm = RunState::load(&paths.state())?.norm;
    let mut rows = Vec::new();
    for v in variants {
        let mut vcfg = cfg.clone();
        vcfg.loss = v.loss;
        vcfg.distill_views = v.distill_views.clone();
        vcfg.validate()?;
        let dir = out.join("variants").join(v.name.replace(['+', '/'], "_"));
        step_student(&vcfg, &paths, &data, norm, &dir)?;
        let eval = eval_checkpoint(&dir, &v.name, &vcfg, &data, &norm)?;
        rows.push(SweepRow {
            variant: v.name.clone(),
            alpha: v.loss.alpha,
            beta: v.loss.beta,
            teachers: vcfg.distilled_views()?.names(),
            rank1: eval.rank1,
            map: eval.map,
        });
    }
    let report = SweepReport { rows };
    let json = out.join("sweep_report.json");
    fs::write(&json, serde_json::to_vec_pretty(&report)?).at(&json)?;
    let md = out.join("sweep_report.md");
    fs::write(&md, report.to_markdown()).at(&md)?;
    Ok(report)
}

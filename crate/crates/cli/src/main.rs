use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fd_core::config::FdConfig;
use fd_core::datasets::{generate_synthetic, Dataset};
use fd_core::evaluator::{evaluate_dataset, EvalReport, Protocol};
use fd_core::netblocks::Checkpoint;
use fd_core::trainer::{
    build_sr_cache, loss_ablation, measure_norm, render_attention, resolve_dataset, run_pipeline, run_sweep,
    teacher_ablation, PipelineOptions, RunPaths, RunState, Step,
};
use fd_core::views::ViewRegistry;

/// Factorized distillation for person re-identification.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Losses,
    Teachers,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Student,
    InitialStudent,
}

#[derive(Subcommand)]
enum Command {
    /// Print the view registry of a config (or the canonical one) as JSON.
    Views {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a starting config file.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Dataset root the config points at.
        #[arg(long)]
        data: PathBuf,
        /// Roster student for the canonical preset.
        #[arg(long, default_value = "R50a")]
        student: String,
        #[arg(long, default_value_t = 101)]
        teacher_depth: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic dataset of a config into a directory.
    GenerateSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 1: train every view's teacher and the initial student.
    TrainTeachers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 2: extract supervisory representations. Without `--teachers`
    /// the run directory `--out` is resumed up to this step.
    BuildSr {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding one teacher checkpoint per view.
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 3: train the final student in a run directory.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// All steps plus evaluation, resumable.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model of a run directory, optionally on another
    /// dataset (direct transfer).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "student")]
        model: Model,
        /// Market-1501 style root of another dataset.
        #[arg(long)]
        transfer_to: Option<PathBuf>,
        /// Where to write the report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss or teacher ablation as one sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention overlays of the final student on query images.
    Attention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn set_workers() -> fd_core::Result<()> {
    if let Ok(v) = std::env::var("FD_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| fd_core::Error::Config(format!("FD_WORKERS must be a number, got {v}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fd_core::Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> fd_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn pipeline(config: &Path, out: &Path, stop_after: Option<Step>) -> fd_core::Result<()> {
    let cfg = FdConfig::load(config)?;
    let report = run_pipeline(&cfg, out, PipelineOptions { stop_after })?;
    print_json(&report)
}

fn run(cli: Cli) -> fd_core::Result<()> {
    match cli.command {
        Command::Views { config } => {
            let views = match config {
                Some(c) => FdConfig::load(&c)?.views,
                None => ViewRegistry::canonical(),
            };
            print_json(&views)
        }
        Command::InitConfig {
            preset,
            data,
            student,
            teacher_depth,
            seed,
            out,
        } => {
            let cfg = match preset {
                Preset::Desk => FdConfig::desk(&data, seed),
                Preset::Canonical => FdConfig::canonical(&data, &student, teacher_depth)?,
            };
            cfg.save(&out)
        }
        Command::GenerateSynthetic { config, out } => {
            let cfg = FdConfig::load(&config)?;
            let fd_core::config::DatasetSource::Synthetic { spec, .. } = &cfg.dataset else {
                return Err(fd_core::Error::Config(
                    "config does not describe a synthetic dataset".into(),
                ));
            };
            let m = generate_synthetic(spec, &out)?;
            println!(
                "{} train / {} query / {} gallery images, fingerprint {}",
                m.train.len(),
                m.query.len(),
                m.gallery.len(),
                m.fingerprint
            );
            Ok(())
        }
        Command::TrainTeachers { config, out } => pipeline(&config, &out, Some(Step::Teachers)),
        Command::BuildSr { config, teachers, out } => match teachers {
            None => pipeline(&config, &out, Some(Step::SrCache)),
            Some(t) => {
                let cfg = FdConfig::load(&config)?;
                let data = resolve_dataset(&cfg.dataset)?;
                let norm = match RunState::load(&t.join("..").join("state.json")) {
                    Ok(s) => s.norm,
                    Err(_) => measure_norm(&cfg, &data),
                };
                print_json(&build_sr_cache(&cfg, &t, &data, norm, &out)?)
            }
        },
        Command::TrainStudent { config, out } => pipeline(&config, &out, Some(Step::Student)),
        Command::RunAll { config, out } => pipeline(&config, &out, None),
        Command::Evaluate {
            config,
            run,
            model,
            transfer_to,
            out,
        } => {
            let cfg = FdConfig::load(&config)?;
            let paths = RunPaths::new(&run);
            let state = RunState::load(&paths.state())?;
            let (dir, name) = match model {
                Model::Student => (paths.student(), "student"),
                Model::InitialStudent => (paths.initial_student(), "initial_student"),
            };
            let net = Checkpoint::load(&dir, None)?.to_model()?;
            let (data, protocol) = match transfer_to {
                Some(root) => {
                    let manifest = fd_core::datasets::ingest(&root, "transfer")?;
                    (Dataset::from_manifest(&root, manifest)?, Protocol::CrossDataset)
                }
                None => (resolve_dataset(&cfg.dataset)?, Protocol::Standard),
            };
            let holistic = cfg
                .views
                .holistic()
                .ok_or_else(|| fd_core::Error::Config("no holistic view".into()))?;
            let r = evaluate_dataset(&net, &data, holistic, &state.norm, protocol)?;
            let report = EvalReport::new(name, &data.manifest.name, &r);
            print!("{}", report.to_text());
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_vec_pretty(&report)?).map_err(|e| fd_core::Error::io(&out, e))?;
            }
            Ok(())
        }
        Command::Sweep { config, kind, out } => {
            let cfg = FdConfig::load(&config)?;
            let variants = match kind {
                SweepKind::Losses => loss_ablation(&cfg),
                SweepKind::Teachers => teacher_ablation(&cfg),
            };
            let report = run_sweep(&cfg, &out, &variants)?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::Attention {
            config,
            run,
            count,
            out,
        } => {
            let cfg = FdConfig::load(&config)?;
            let paths = RunPaths::new(&run);
            let state = RunState::load(&paths.state())?;
            let net = Checkpoint::load(&paths.student(), None)?.to_model()?;
            let data = resolve_dataset(&cfg.dataset)?;
            let images: Vec<_> = data
                .manifest
                .query
                .iter()
                .zip(&data.query)
                .take(count)
                .map(|(r, img)| {
                    let stem = Path::new(&r.path)
                        .file_stem()
                        .map_or_else(String::new, |s| s.to_string_lossy().into());
                    (stem, img.clone())
                })
                .collect();
            let holistic = cfg
                .views
                .holistic()
                .ok_or_else(|| fd_core::Error::Config("no holistic view".into()))?;
            let written = render_attention(&net, &images, holistic, &state.norm, &out)?;
            println!("wrote {} overlays to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = set_workers().and_then(|_| run(cli)) {
        log::error!("{e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

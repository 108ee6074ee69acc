//! `ser`: train, evaluate, pseudo-label, relabel, gradient-check and plot.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure. Failures print one line to stderr:
//! `ser: error kind=<config|data|numeric>: <message>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ser_core::config::{Granularity, RunConfig};
use ser_core::datapipe::manifest::{read_jsonl, write_jsonl, write_manifest};
use ser_core::datapipe::pseudo::{pseudolabel, ConsensusConfig, DurationRecord, PredictorWindow};
use ser_core::datapipe::synth::{synth_dataset, SynthConfig};
use ser_core::datapipe::{relabel_manifest, Dataset, Split};
use ser_core::error::ErrorKind;
use ser_core::evaluation::{evaluate_dataset, load_ensemble, parse_report_csv, select_top_checkpoints};
use ser_core::gradcheck::{check_model, GradcheckOptions};
use ser_core::report::{uar_bar_svg, ReportInput};
use ser_core::training::{read_state, train_loop, CONFIG_FILE};
use ser_core::{Result, SerError};

#[derive(Parser, Debug)]
#[command(name = "ser", version, about = "Speech emotion recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `section.key=value` override; repeatable, applied after --config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run seed; also seeds model initialization.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score checkpoints (averaged) on a manifest.
    Eval {
        /// Checkpoint file; repeat to ensemble.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Run directory; its top-k checkpoints by dev loss are ensembled.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV output.
        #[arg(long)]
        report: PathBuf,
        /// Optional SVG bar chart of the UAR metrics.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        granularity: Option<Granularity>,
        /// Run configuration holding the model architecture. Defaults to the
        /// run directory's config.toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Two-predictor window consensus into utterance labels.
    Pseudolabel {
        #[arg(long)]
        pred_a: PathBuf,
        #[arg(long)]
        pred_b: PathBuf,
        /// JSONL of `{"id", "duration_s"}`.
        #[arg(long)]
        durations: PathBuf,
        /// Labels JSONL; stats go to `<out>.stats.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        min_frac: f64,
    },
    /// Relabel a manifest with a trained model or ensemble.
    Relabel {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic vs finite-difference gradients on a small seeded model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Grouped UAR bar chart from report CSVs.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        svg: PathBuf,
    },
    /// Write a synthetic manifest and feature files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_per_class: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "")]
        prefix: String,
    },
}

/// Failure that maps to an exit code.
struct Failure {
    kind: ErrorKind,
    message: String,
}

impl From<SerError> for Failure {
    fn from(e: SerError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SerError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| SerError::io(path, e))
}

/// The run directory's config.toml for a checkpoint at `<run>/checkpoints/<file>`.
fn model_config(explicit: Option<&Path>, overrides: &[String], checkpoints: &[PathBuf]) -> Result<RunConfig> {
    let base = match explicit {
        Some(p) => RunConfig::load(p)?,
        None => {
            let guess = checkpoints
                .first()
                .and_then(|c| c.parent())
                .and_then(|d| d.parent())
                .map(|run| run.join(CONFIG_FILE))
                .filter(|p| p.exists());
            match guess {
                Some(p) => RunConfig::load(&p)?,
                None => {
                    return Err(SerError::Config(
                        "cannot find the model configuration next to the checkpoints; pass --config".into(),
                    ))
                }
            }
        }
    };
    base.with_overrides(overrides)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            train,
            dev,
            out,
            seed,
        } => {
            let base = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let mut cfg = base.with_overrides(&overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.model.seed = s;
            }
            let train = Dataset::load(&train)?;
            let dev = Dataset::load(&dev)?;
            let state = train_loop(&cfg, &train, &dev, &out)?;
            println!(
                "trained {} epochs ({} steps); best dev cat loss {}; run dir {}",
                state.epoch,
                state.global_step,
                state.best_dev_cat_loss,
                out.display()
            );
        }
        Command::Eval {
            mut checkpoint,
            run,
            manifest,
            report,
            svg,
            classes,
            granularity,
            config,
            overrides,
        } => {
            let mut cfg = match (&run, &config) {
                (Some(r), None) => RunConfig::load(&r.join(CONFIG_FILE))?.with_overrides(&overrides)?,
                _ => model_config(config.as_deref(), &overrides, &checkpoint)?,
            };
            if let Some(c) = classes {
                cfg.eval.classes = c;
            }
            if let Some(g) = granularity {
                cfg.eval.granularity = g;
            }
            cfg.validate()?;
            if let Some(r) = &run {
                let state = read_state(r)?;
                for h in select_top_checkpoints(&state.history, cfg.eval.top_k)? {
                    checkpoint.push(r.join(h.path));
                }
            }
            if checkpoint.is_empty() {
                return Err(SerError::Config("pass at least one --checkpoint or a --run directory".into()).into());
            }
            let models = load_ensemble(&checkpoint, &cfg.model)?;
            let data = Dataset::load(&manifest)?;
            let rep = evaluate_dataset(&models, &data, &cfg.eval)?;
            write_file(&report, &rep.to_csv())?;
            if let Some(svg) = svg {
                let label = report
                    .file_stem()
                    .map_or("report".into(), |s| s.to_string_lossy().into_owned());
                write_file(
                    &svg,
                    &uar_bar_svg(&[ReportInput {
                        label,
                        rows: rep.rows(),
                    }]),
                )?;
            }
            println!(
                "uar_7 {:.4} uar_4 {:.4} weighted_accuracy {:.4} over {} units from {} checkpoint(s)",
                rep.uar_7,
                rep.uar_4,
                rep.weighted_accuracy,
                rep.n_scored,
                models.len()
            );
        }
        Command::Pseudolabel {
            pred_a,
            pred_b,
            durations,
            out,
            min_frac,
        } => {
            let a: Vec<PredictorWindow> = read_jsonl(&pred_a)?;
            let b: Vec<PredictorWindow> = read_jsonl(&pred_b)?;
            let d: Vec<DurationRecord> = read_jsonl(&durations)?;
            let cfg = ConsensusConfig {
                min_emotional_fraction: min_frac,
                ..ConsensusConfig::default()
            };
            let (labels, stats) = pseudolabel(&a, &b, &d, &cfg)?;
            write_jsonl(&out, &labels)?;
            let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
            let mut stats_path = out.clone().into_os_string();
            stats_path.push(".stats.json");
            write_file(Path::new(&stats_path), &stats_json)?;
            println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
        }
        Command::Relabel {
            checkpoint,
            manifest,
            out,
            config,
        } => {
            if checkpoint.is_empty() {
                return Err(SerError::Config("pass at least one --checkpoint".into()).into());
            }
            let cfg = model_config(config.as_deref(), &[], &checkpoint)?;
            let models = load_ensemble(&checkpoint, &cfg.model)?;
            let (records, stats) = relabel_manifest(&manifest, &models)?;
            write_manifest(&out, &records)?;
            println!(
                "relabeled {} of {} records, {} changed, {} skipped",
                stats.relabeled,
                stats.total,
                stats.changed,
                stats.skipped.len()
            );
        }
        Command::Gradcheck { seed, tolerance } => {
            let report = check_model(&GradcheckOptions {
                seed,
                ..GradcheckOptions::default()
            })?;
            println!("total loss {}", report.loss);
            for m in report.by_module() {
                println!(
                    "{:<8} params {:>3}  max rel err {:.3e}  ({})",
                    m.module, m.params, m.max_rel_err, m.worst_param
                );
            }
            let worst = report.worst().expect("model has trainable parameters");
            if worst.max_rel_err.is_nan() || worst.max_rel_err >= tolerance {
                return Err(Failure {
                    kind: ErrorKind::Numeric,
                    message: format!(
                        "gradient check failed: max rel err {:.3e} >= tolerance {tolerance:e} at '{}' element {}",
                        worst.max_rel_err, worst.name, worst.worst_index
                    ),
                });
            }
            println!("pass: max rel err {:.3e} < {tolerance:e}", worst.max_rel_err);
        }
        Command::Report { inputs, svg } => {
            let mut reports = Vec::with_capacity(inputs.len());
            for p in &inputs {
                let text = fs::read_to_string(p).map_err(|e| SerError::io(p, e))?;
                reports.push(ReportInput {
                    label: p
                        .file_stem()
                        .map_or("report".into(), |s| s.to_string_lossy().into_owned()),
                    rows: parse_report_csv(&text, p)?,
                });
            }
            write_file(&svg, &uar_bar_svg(&reports))?;
            println!("wrote {} ({} group(s))", svg.display(), reports.len());
        }
        Command::Synth {
            out,
            n_per_class,
            frames,
            dim,
            seed,
            split,
            prefix,
        } => {
            let split: Split = serde_json::from_value(serde_json::Value::String(split.clone()))
                .map_err(|_| SerError::Config(format!("split must be train, dev or eval, got '{split}'")))?;
            let cfg = SynthConfig {
                n_per_class,
                frames,
                dim,
                seed,
                split,
                id_prefix: prefix,
                ..SynthConfig::default()
            };
            let records = synth_dataset(&cfg, &out)?;
            println!(
                "wrote {} records to {}",
                records.len(),
                out.join("manifest.jsonl").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SER_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("ser: error kind=config: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "ser: error kind={}: {}",
                kind_name(f.kind),
                f.message.replace('\n', " ")
            );
            ExitCode::from(exit_code(f.kind))
        }
    }
}

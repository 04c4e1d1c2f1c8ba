//! Command-line entry point: `generate`, `train`, `eval`, `sweep-blocks`, `gradcheck`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::data::{generate_synthetic, load_jsonl, DatasetSplit, SplitRole, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradcheckOptions};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::train::{evaluate, sweep_blocks, train, write_sweep_csv, Splits};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "safrlm",
    version,
    about = "Text-audio sentiment regression with self-adjusting fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic JSON-lines dataset.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `data.train`, select by `data.validation`.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Multi-seed runs for several total crossmodal block counts.
    SweepBlocks {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated even totals, e.g. 2,4,6.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set xadjust.heads=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

impl ConfigArgs {
    /// File, then `SAFRLM_SEED`, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply_env()?;
        apply_overrides(&mut cfg, &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = std::path::absolute(d).map_err(|e| Error::io(d, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_split(path: &Option<PathBuf>, key: &str, role: SplitRole) -> Result<DatasetSplit> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("config key data.{key} is required")))?;
    load_jsonl(p, role)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join(RESOLVED_CONFIG_FILE), cfg)
}

/// Parses `argv` (including the program name) and runs one subcommand.
/// Returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_VALIDATION
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cmd {
        Command::Generate { spec, out: dest } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let mut s: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            if let Ok(v) = std::env::var(crate::config::SEED_ENV) {
                s.seed = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{}={v} is not an unsigned integer", crate::config::SEED_ENV))
                })?;
            }
            let split = generate_synthetic(&s)?;
            split.save_jsonl(&dest)?;
            write_json(&dest.with_extension("spec.json"), &s)?;
            writeln!(out, "wrote {} records to {}", split.len(), dest.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let train_split = load_split(&cfg.data.train, "train", SplitRole::Train)?;
            let val_split = load_split(&cfg.data.validation, "validation", SplitRole::Validation)?;
            prepare_output(&cfg)?;
            let run = train::<f32>(
                &train_split,
                &val_split,
                &cfg.model_config(),
                &cfg.train,
                cfg.metrics.binarize,
            )?;
            let dir = &cfg.output_dir;
            write_json(
                &dir.join("checkpoint.json"),
                &run.best.checkpoint(run.history.best_epoch),
            )?;
            write_json(&dir.join("history.json"), &run.history)?;
            for e in &run.history.epochs {
                writeln!(
                    out,
                    "epoch {:>3}  train loss {:.6}  val mae {:.4}  val acc2 {:.1}",
                    e.epoch, e.train_loss, e.validation.mae, e.validation.acc2
                )
                .map_err(io)?;
            }
            writeln!(
                out,
                "best epoch {} -> {}",
                run.history.best_epoch,
                dir.join("checkpoint.json").display()
            )
            .map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Eval { cfg, checkpoint, data } => {
            let cfg = cfg.resolve()?;
            let text = fs::read_to_string(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
            let ckpt: Checkpoint =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", checkpoint.display())))?;
            if ckpt.model != cfg.model_config() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    checkpoint.display()
                )));
            }
            let model = Model::<f32>::from_checkpoint(&ckpt)?;
            let split = load_jsonl(&data, SplitRole::Test)?;
            let report = evaluate(&model, &split, cfg.metrics.binarize)?;
            prepare_output(&cfg)?;
            write_json(&cfg.output_dir.join("metrics.json"), &report)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::SweepBlocks { cfg, n } => {
            let cfg = cfg.resolve()?;
            for &v in &n {
                crate::train::blocks_per_stage(v)?;
            }
            let train_split = load_split(&cfg.data.train, "train", SplitRole::Train)?;
            let val_split = load_split(&cfg.data.validation, "validation", SplitRole::Validation)?;
            let test_split = load_split(&cfg.data.test, "test", SplitRole::Test)?;
            prepare_output(&cfg)?;
            let splits = Splits {
                train: &train_split,
                validation: &val_split,
                test: &test_split,
            };
            let rows = sweep_blocks::<f32>(
                &splits,
                &cfg.model_config(),
                &cfg.train,
                cfg.metrics.binarize,
                &cfg.train.default_seeds(),
                &n,
            )?;
            let csv_path = cfg.output_dir.join("sweep_blocks.csv");
            write_sweep_csv(&rows, &csv_path)?;
            write_json(&cfg.output_dir.join("sweep_blocks.json"), &rows)?;
            for r in &rows {
                writeln!(
                    out,
                    "n {:>2} ({} per stage): acc2 {:.2}  mae {:.4}",
                    r.n, r.blocks_per_stage, r.result.mean.acc2, r.result.mean.mae
                )
                .map_err(io)?;
            }
            writeln!(out, "wrote {}", csv_path.display()).map_err(io)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            config,
            tolerance,
            overrides,
        } => {
            let (model_cfg, seed, dir) = match config {
                Some(p) => {
                    let mut cfg = RunConfig::load(&p)?;
                    cfg.apply_env()?;
                    apply_overrides(&mut cfg, &overrides)?;
                    cfg.validate()?;
                    prepare_output(&cfg)?;
                    (cfg.model_config(), cfg.train.seed, Some(cfg.output_dir))
                }
                None => {
                    if !overrides.is_empty() {
                        return Err(Error::Config("--set needs --config".into()));
                    }
                    (ModelConfig::tiny(), 0, None)
                }
            };
            if tolerance.is_nan() || tolerance < 0.0 {
                return Err(Error::Config(format!("tolerance {tolerance} must be non-negative")));
            }
            let report = gradcheck(
                &model_cfg,
                &GradcheckOptions {
                    tolerance,
                    seed,
                    ..Default::default()
                },
            )?;
            write!(out, "{}", report.render()).map_err(io)?;
            if let Some(dir) = dir {
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            Ok(if report.passed { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

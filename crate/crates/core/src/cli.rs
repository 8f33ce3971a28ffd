//! `uman` command line: synth, train, eval, gradcheck, ablate.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric failure (a
//! non-finite training value or a failed gradient check).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablate::{ablate, AblationTable};
use crate::data::{generate_dataset_parallel, read_dataset, split, write_dataset, DatasetSpec, ShapeFamily};
use crate::error::{Error, Result};
use crate::gradcheck::scopes;
use crate::train::{evaluate_checkpoint, train_with, RunConfig, CONFIG_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "uman", version, about = "Multi-scale KAN segmentation network: data, training, checks and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic segmentation dataset.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// ellipse or blob
        #[arg(long, default_value = "ellipse")]
        family: ShapeFamily,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train on a dataset directory and write the best checkpoint.
    Train {
        /// Run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config seed (initialization, split and shuffling).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on every sample of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        /// A layer scope or `all`.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Train every arm of an ablation table on the same split.
    Ablate {
        /// overall, man or pagf
        #[arg(long)]
        table: AblationTable,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.optim.seed = s;
    }
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth {
            n,
            size,
            seed,
            out: dir,
            family,
            workers,
        } => {
            let spec = DatasetSpec {
                n_samples: n,
                size,
                family,
                seed,
                ..DatasetSpec::default()
            };
            let samples = generate_dataset_parallel(&spec, workers)?;
            write_dataset(&dir, &samples)?;
            writeln!(out, "wrote {} {}x{} samples to {}", samples.len(), size, size, dir.display())?;
        }
        Command::Train {
            config,
            data,
            seed,
            out: dir,
            epochs,
        } => {
            let cfg = load_config(config.as_deref(), seed, epochs)?;
            let samples = read_dataset(&data)?;
            let (tr, va) = split(&samples, cfg.train_fraction, cfg.optim.seed)?;
            writeln!(out, "training on {} samples, validating on {}", tr.len(), va.len())?;
            writeln!(out, "{:>5}  {:>10}  {:>10}  {:>7}  {:>7}", "epoch", "train loss", "val loss", "val IoU", "val F1")?;
            let mut sink = Ok(());
            let result = train_with(&cfg, &tr, &va, Some(&dir), |e| {
                if sink.is_ok() {
                    sink = writeln!(
                        out,
                        "{:>5}  {:>10.5}  {:>10.5}  {:>7.4}  {:>7.4}",
                        e.epoch, e.train_loss, e.val.loss, e.val.iou, e.val.f1
                    );
                }
            })?;
            sink?;
            let r = &result.report;
            writeln!(out, "parameters: {}", r.parameters)?;
            writeln!(
                out,
                "best epoch {}: val IoU {:.4}, F1 {:.4}; checkpoint in {}",
                r.best_epoch,
                r.best.iou,
                r.best.f1,
                dir.display()
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            config,
        } => {
            let config = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(CONFIG_FILE)
            });
            let cfg = RunConfig::load(&config)?;
            let samples = read_dataset(&data)?;
            let m = evaluate_checkpoint(&checkpoint, &cfg, &samples)?;
            writeln!(out, "{:>7}  {:>7}  {:>7}  {:>9}", "samples", "IoU", "F1", "loss")?;
            writeln!(out, "{:>7}  {:>7.4}  {:>7.4}  {:>9.5}", samples.len(), m.iou, m.f1, m.loss)?;
        }
        Command::Gradcheck { scope } => {
            let report = scopes::run(&scope)?;
            write!(out, "{report}")?;
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            writeln!(out, "gradcheck {scope}: {verdict}")?;
            if !report.passed() {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Ablate {
            table,
            data,
            out: dir,
            config,
            seed,
            epochs,
        } => {
            let cfg = load_config(config.as_deref(), seed, epochs)?;
            let samples = read_dataset(&data)?;
            let (tr, va) = split(&samples, cfg.train_fraction, cfg.optim.seed)?;
            writeln!(out, "ablation `{}`: {} train / {} val samples", table.as_str(), tr.len(), va.len())?;
            let mut sink = Ok(());
            let report = ablate(table, &cfg, &tr, &va, Some(&dir), |r| {
                if sink.is_ok() {
                    sink = writeln!(out, "  done: {} (IoU {:.4})", r.label, r.metrics.iou);
                }
            })?;
            sink?;
            write!(out, "{report}")?;
            writeln!(out, "report written to {}", dir.join("report.tsv").display())?;
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("uman").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn help_and_version_succeed() {
        let (c, out, _) = call(&["--help"]);
        assert_eq!(c, EXIT_OK);
        for sub in ["synth", "train", "eval", "gradcheck", "ablate"] {
            assert!(out.contains(sub), "{out}");
        }
        assert_eq!(call(&["--version"]).0, EXIT_OK);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&[]).0, EXIT_USAGE);
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(call(&["ablate", "--table", "bogus", "--data", "x", "--out", "y"]).0, EXIT_USAGE);
        let (c, _, err) = call(&["gradcheck", "--scope", "nope"]);
        assert_eq!(c, EXIT_USAGE);
        assert!(err.contains("unknown gradcheck scope"));
    }

    #[test]
    fn gradcheck_single_scope_passes() {
        let (c, out, _) = call(&["gradcheck", "--scope", "kan_layer"]);
        assert_eq!(c, EXIT_OK, "{out}");
        assert!(out.contains("kan_layer") && out.contains("PASS"));
    }

    #[test]
    fn synth_train_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run_dir = dir.path().join("run");
        let cfg = dir.path().join("tiny.txt");
        std::fs::write(
            &cfg,
            "embed_dims = 2, 3, 4, 5, 6\nman_depths = 1, 1, 1\nepochs = 2\nbatch_size = 4\n",
        )
        .unwrap();
        let d = data.to_str().unwrap();
        let r = run_dir.to_str().unwrap();
        assert_eq!(call(&["synth", "--n", "6", "--size", "32", "--seed", "3", "--out", d]).0, EXIT_OK);
        let (c, out, err) = call(&["train", "--config", cfg.to_str().unwrap(), "--data", d, "--seed", "1", "--out", r]);
        assert_eq!(c, EXIT_OK, "{err}");
        assert!(out.contains("best epoch"));
        let ck = run_dir.join("checkpoint.bin");
        let (c, out, err) = call(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", d]);
        assert_eq!(c, EXIT_OK, "{err}");
        assert!(out.lines().nth(1).unwrap().trim_start().starts_with('6'));

        // truncated checkpoint: clean parse error, exit 1
        let bytes = std::fs::read(&ck).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 3]).unwrap();
        let conf = run_dir.join("config.txt");
        let (c, _, err) = call(&["eval", "--checkpoint", cut.to_str().unwrap(), "--data", d, "--config", conf.to_str().unwrap()]);
        assert_eq!(c, EXIT_USAGE);
        assert!(err.contains("checkpoint"), "{err}");
    }
}

//! Command line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msgdas_core::engine::EpochMetrics;
use msgdas_core::searchspace::{count_skip_connect, derive_genotype};

use crate::config::{DatasetKind, SearchConfig};
use crate::error::{HarnessError, Result};
use crate::inspect::{render, Format};
use crate::persist::{claim_outputs, read_genotype, write_genotype, write_json, Checkpoint, EVAL_FILE, GENOTYPE_FILE};
use crate::run::{evaluate, search_to_dir, OutputMode};
use crate::selftest;

#[derive(Parser, Debug)]
#[command(name = "msgdas", version, about = "Differentiable architecture search with mutually exclusive sub-graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

/// Settings shared by `search` and `eval`. Flags override the config file.
#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config; keys it omits take the full-scale defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in base config when no --config is given.
    #[arg(long, value_enum, conflicts_with = "config")]
    profile: Option<Profile>,
    /// Seed for data generation, the split, the search and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Sub-graphs per step.
    #[arg(long)]
    k: Option<usize>,
    /// Search epochs (for `eval`: training epochs).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, value_name = "DIR")]
    cifar_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a search; writes genotype.json, metrics.csv, checkpoint.bin and config.toml.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from <out>/checkpoint.bin.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Derive a genotype from the logits in a checkpoint.
    Derive {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print skip-connect counts and per-edge softmax(alpha).
    Inspect {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Sampler distribution checks and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a genotype from scratch and report validation accuracy; writes eval.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to <out>/genotype.json.
        #[arg(long, value_name = "PATH")]
        genotype: Option<PathBuf>,
    },
}

fn resolve(args: &RunArgs, eval: bool) -> Result<SearchConfig> {
    let mut cfg = match (&args.config, args.profile) {
        (Some(path), _) => SearchConfig::load(path)?,
        (None, Some(Profile::Full)) => SearchConfig::full(),
        (None, _) => SearchConfig::desk(),
    };
    if let Some(seed) = args.seed {
        cfg.search.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(k) = args.k {
        cfg.search.k = k;
    }
    if let Some(epochs) = args.epochs {
        if eval {
            cfg.eval.epochs = epochs;
        } else {
            cfg.search.epochs = epochs;
        }
    }
    if let Some(d) = args.dataset {
        cfg.data.dataset = d;
    }
    if let Some(dir) = &args.cifar_dir {
        cfg.data.cifar10.dir = Some(dir.clone());
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &SearchConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| HarnessError::Config("no output directory: pass --out or set `out` in the config".into()))
}

fn log_epoch(m: &EpochMetrics) {
    eprintln!(
        "epoch {:>4}  train {:.4}  val {:.4}  acc {:.3}  tau {:.2}  skip {}/{}  {:.1}s",
        m.epoch, m.train_loss, m.val_loss, m.val_acc, m.tau, m.skip_count_normal, m.skip_count_reduce, m.seconds
    );
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    let w = |stdout: &mut dyn Write, s: &str| {
        stdout
            .write_all(s.as_bytes())
            .map_err(|e| HarnessError::Io { path: PathBuf::from("<stdout>"), source: e })
    };
    match cmd {
        Command::Search { run, resume } => {
            let cfg = resolve(&run, false)?;
            let out = out_dir(&cfg)?;
            let mode = match (resume, run.force) {
                (true, _) => OutputMode::Resume,
                (false, true) => OutputMode::Force,
                _ => OutputMode::Fresh,
            };
            let g = search_to_dir(&cfg, &out, mode, log_epoch)?;
            let c = count_skip_connect(&g);
            w(
                stdout,
                &format!(
                    "wrote {} (skip_connect normal {} reduce {})\n",
                    out.join(GENOTYPE_FILE).display(),
                    c.normal,
                    c.reduce
                ),
            )
        }
        Command::Derive { checkpoint, out, force } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            claim_outputs(&out, &[GENOTYPE_FILE], force)?;
            let g = derive_genotype(&ckpt.state.alpha);
            write_genotype(&out.join(GENOTYPE_FILE), &g)?;
            w(stdout, &format!("wrote {}\n", out.join(GENOTYPE_FILE).display()))
        }
        Command::Inspect { checkpoint, format } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            w(stdout, &render(&ckpt.state.alpha, format)?)
        }
        Command::Selftest { seed } => {
            let results = selftest::run_all(seed)?;
            let mut failed = Vec::new();
            for r in &results {
                w(stdout, &format!("{} {}: {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))?;
                if !r.passed {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Selftest(failed.join(", ")))
            }
        }
        Command::Eval { run, genotype } => {
            let cfg = resolve(&run, true)?;
            let out = out_dir(&cfg)?;
            let path = genotype.unwrap_or_else(|| out.join(GENOTYPE_FILE));
            let g = read_genotype(&path)?;
            claim_outputs(&out, &[EVAL_FILE], run.force)?;
            let report = evaluate(&cfg, &g)?;
            let json = serde_json::json!({
                "genotype": path,
                "val_acc": report.val_acc,
                "train_loss": report.train_loss,
            });
            write_json(&out.join(EVAL_FILE), &json)?;
            w(stdout, &format!("val_acc {:.4}\n", report.val_acc))
        }
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage
/// error.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    cli_main_with(argv, &mut std::io::stdout())
}

pub fn cli_main_with<I, S>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}


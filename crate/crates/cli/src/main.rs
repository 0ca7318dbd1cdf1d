//! `milood`: generate bags, train, score and evaluate from one JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use milood::metrics::{pct, render_table, EvalReport};
use milood::pipeline::{self, RunConfig};
use milood::scorers::Method;
use milood::verify::{self, CheckResult};
use milood::Error;

/// Environment variable naming the root for relative dataset paths.
const DATA_DIR_ENV: &str = "MILOOD_DATA_DIR";

#[derive(Parser)]
#[command(name = "milood", version, about = "Bag-level out-of-distribution detection for attention MIL models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample bags and write the split manifests.
    Generate(RunArgs),
    /// Train a model on the generated bags.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the ID test and OOD bags with a trained checkpoint.
    Score {
        #[command(flatten)]
        run: RunArgs,
        /// Scoring methods (repeatable or comma-separated); default: the config's list.
        #[arg(long = "method", value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Compute AUROC and FPR@95 from the scores and ID accuracy.
    Evaluate(RunArgs),
    /// Run generate, train, score and evaluate in sequence.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference check of every gradient, printing max relative errors.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the default-size conv28 model.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            cfg.resolve_data_paths(&PathBuf::from(root));
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed)?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn with_epochs(mut cfg: RunConfig, epochs: Option<usize>) -> RunConfig {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg
}

fn parse_methods(names: &[String], cfg: &RunConfig) -> Result<Vec<Method>> {
    if names.is_empty() {
        return Ok(cfg.scorers.methods.clone());
    }
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.trim().parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn run_generate(cfg: &RunConfig) -> Result<()> {
    let entries = pipeline::generate(cfg).context("stage generate")?;
    for e in entries {
        println!(
            "{:<9} {:<32} {:>6} bags  sha256 {}",
            e.role.as_str(),
            e.path.display(),
            e.n_bags,
            e.sha256
        );
    }
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let s = pipeline::train(cfg, |r| {
        println!(
            "epoch {:>3}  train loss {:.4}  val loss {:.4}  val acc {}%  best {}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            pct(r.val_accuracy),
            r.best_epoch,
            r.elapsed_seconds
        );
    })
    .context("stage train")?;
    println!(
        "best epoch {} of {}: val accuracy {}%  checkpoint sha256 {}",
        s.best_epoch,
        s.epochs_run,
        pct(s.val_accuracy),
        s.checkpoint_sha256
    );
    Ok(())
}

fn run_score(cfg: &RunConfig, methods: &[Method]) -> Result<()> {
    let s = pipeline::score(cfg, methods).context("stage score")?;
    let names: Vec<&str> = s.methods.iter().map(|m| m.name()).collect();
    for (id, n) in &s.datasets {
        println!("{id:<24} {n:>6} bags");
    }
    println!("{} scores ({}) sha256 {}", s.rows, names.join(", "), s.sha256);
    Ok(())
}

fn run_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let report = pipeline::evaluate(cfg).context("stage evaluate")?;
    print!("{}", render_table(&report));
    Ok(report)
}

fn print_checks(results: &[CheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<44} {:>10.3e}  < {:.0e}  {verdict}", r.name, r.max_rel_error, r.tolerance);
    }
    ok
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => run_generate(&a.load()?),
        Command::Train { run, epochs } => run_train(&with_epochs(run.load()?, epochs)),
        Command::Score { run, methods } => {
            let cfg = run.load()?;
            let methods = parse_methods(&methods, &cfg)?;
            run_score(&cfg, &methods)
        }
        Command::Evaluate(a) => run_evaluate(&a.load()?).map(|_| ()),
        Command::Benchmark { run, epochs } => {
            let cfg = with_epochs(run.load()?, epochs);
            run_generate(&cfg).context("benchmark")?;
            run_train(&cfg).context("benchmark")?;
            run_score(&cfg, &cfg.scorers.methods).context("benchmark")?;
            run_evaluate(&cfg).context("benchmark")?;
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Gradcheck { seed, quick } => {
            let mut ok = print_checks(&verify::primitive_checks(seed)?);
            ok &= print_checks(&verify::model_checks(seed, !quick)?);
            if ok {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check exceeded its tolerance".into()).into())
            }
        }
    }
}

/// 2: usage or configuration, 3: numeric failure, 4: I/O or on-disk data.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => 3,
        Some(Error::Io { .. } | Error::Format(_) | Error::Consistency(_) | Error::Bounds(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use calibrar::experiment::{self, ExperimentConfig};
use calibrar::Error;

/// Robustness-conditioned adaptive label smoothing experiments.
#[derive(Parser)]
#[command(name = "calibrar", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set data.spread=1.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output root (config key `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for model initialisation and minibatch order.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits as CSV.
    GenerateData,
    /// Train one model under a supervision policy.
    Train {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Number of robustness subsets.
        #[arg(long = "R", alias = "subsets")]
        subsets: Option<usize>,
        /// Re-attack the model being trained after every epoch.
        #[arg(long)]
        on_the_fly: bool,
        #[arg(long)]
        name: Option<String>,
    },
    /// Attack a trained model and write robustness partitions.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "R", alias = "subsets")]
        subsets: Option<usize>,
    },
    /// Evaluate a run on clean and corrupted test data.
    Eval {
        /// Run directory (default `<out>/<run name>`).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Evaluate even if `--config` differs from the config stored in the run.
        #[arg(long)]
        force: bool,
    },
    /// Train one run per grid value and pick the lowest validation ECE.
    Sweep {
        #[arg(long)]
        policy: Option<String>,
        /// `epsilon` or `alpha`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train an ensemble.
    EnsembleTrain {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated member seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Collect evaluated runs into plot-ready tables.
    Report {
        /// Evaluated run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// List config keys, defaults and environment variable names.
    Keys,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::HashMismatch { .. } => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn push<T: ToString>(over: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        over.push((key.to_string(), v.to_string()));
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut over = Vec::new();
    for s in &cli.common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        over.push((k.trim().to_string(), v.trim().to_string()));
    }
    push(&mut over, "out", cli.common.out.as_ref().map(|p| p.display()));
    push(&mut over, "model.seed", cli.common.seed);
    push(&mut over, "train.seed", cli.common.seed);

    match &cli.command {
        Command::Train {
            policy,
            epsilon,
            alpha,
            subsets,
            on_the_fly,
            name,
        } => {
            push(&mut over, "policy", policy.as_ref());
            push(&mut over, "policy.epsilon", *epsilon);
            push(&mut over, "policy.alpha", *alpha);
            push(&mut over, "policy.subsets", *subsets);
            push(&mut over, "run.name", name.as_ref());
            if *on_the_fly {
                push(&mut over, "policy.on_the_fly", Some(true));
            }
        }
        Command::Attack { checkpoint, subsets } => {
            push(&mut over, "attack.checkpoint", checkpoint.as_ref().map(|p| p.display()));
            push(&mut over, "policy.subsets", *subsets);
        }
        Command::Sweep {
            policy,
            param,
            grid,
            jobs,
        } => {
            push(&mut over, "policy", policy.as_ref());
            push(&mut over, "sweep.param", param.as_ref());
            push(&mut over, "sweep.grid", grid.as_ref());
            push(&mut over, "jobs", *jobs);
        }
        Command::EnsembleTrain {
            policy,
            mode,
            seeds,
            alpha,
            epsilon,
            name,
        } => {
            push(&mut over, "policy", policy.as_ref());
            push(&mut over, "ensemble.mode", mode.as_ref());
            push(&mut over, "ensemble.seeds", seeds.as_ref());
            push(&mut over, "policy.alpha", *alpha);
            push(&mut over, "policy.epsilon", *epsilon);
            push(&mut over, "run.name", name.as_ref());
        }
        _ => {}
    }

    let cfg = ExperimentConfig::resolve(cli.common.config.as_deref(), std::env::vars(), &over)?;

    match cli.command {
        Command::GenerateData => {
            for p in experiment::generate_data(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { .. } => {
            let (dir, m) = experiment::train_run(&cfg)?;
            println!(
                "{}: test accuracy {:.4}, confidence {:.4}, ECE {:.4}",
                dir.display(),
                m.test.accuracy,
                m.test.confidence,
                m.test.ece
            );
        }
        Command::Attack { .. } => {
            for s in experiment::attack_run(&cfg)? {
                println!(
                    "{}: attack success rate {:.2}% ({}/{}, {} errors) -> {}",
                    s.split,
                    100.0 * s.success_rate(),
                    s.succeeded,
                    s.attempted,
                    s.failed,
                    s.path.display()
                );
            }
        }
        Command::Eval { run, force } => {
            let dir = run.unwrap_or_else(|| cfg.out_dir().join(cfg.run_name()));
            let given = cli.common.config.is_some();
            let report = experiment::eval_run(&dir, given.then_some(&cfg), force)?;
            for r in &report.rows {
                println!(
                    "{:<22} accuracy {:.4} confidence {:.4} ECE {:.4}",
                    r.test_set, r.metrics.accuracy, r.metrics.confidence, r.metrics.ece
                );
            }
            println!("wrote {}", dir.join("eval").display());
        }
        Command::Sweep { .. } => {
            let res = experiment::sweep_run(&cfg)?;
            for p in &res.points {
                match (&p.val_ece, &p.error) {
                    (Some(e), _) => println!("{} = {}: val ECE {e:.5}", res.param, p.value),
                    (None, Some(err)) => println!("{} = {}: failed: {err}", res.param, p.value),
                    _ => {}
                }
            }
            match res.best {
                Some(b) => println!("best {} = {b}", res.param),
                None => return Err(Failure::Runtime("every sweep run failed".into())),
            }
        }
        Command::EnsembleTrain { .. } => {
            let (dir, m) = experiment::ensemble_train(&cfg)?;
            println!(
                "{}: ensemble test accuracy {:.4}, confidence {:.4}, ECE {:.4}",
                dir.display(),
                m.ensemble.accuracy,
                m.ensemble.confidence,
                m.ensemble.ece
            );
        }
        Command::Report { runs } => {
            for p in experiment::report(&cfg, &runs)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Keys => {
            for (k, d, doc) in experiment::KEYS {
                println!(
                    "{k:<28} {:<12} {:<34} {doc}",
                    if d.is_empty() { "\"\"" } else { d },
                    format!("{}{}", experiment::ENV_PREFIX, k.to_ascii_uppercase().replace('.', "_"))
                );
            }
        }
    }
    Ok(())
}

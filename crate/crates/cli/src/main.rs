use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use irregrid_core::experiment::{self, ExperimentConfig, ExperimentReport};
use irregrid_core::{Error, Result};

/// Super-resolution of along-track observations with locally-adapted
/// convolutional operators.
#[derive(Parser)]
#[command(name = "irregrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set truth.n_days=30`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Put every artifact in this directory (overrides `paths`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate truth, covariate and along-track observations.
    Gen(Common),
    /// Optimal-interpolation baseline on the low-resolution grid.
    Oi(Common),
    /// Fit the global operator and the operator dictionaries.
    Train {
        #[command(flatten)]
        common: Common,
        /// Write the global design matrix to this CSV.
        #[arg(long)]
        dump_design: Option<PathBuf>,
    },
    /// Reconstruct the high-resolution field with every requested method.
    Reconstruct(Common),
    /// Score reconstructions and write metrics, histogram and table CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write PGM panels of this day.
        #[arg(long, value_name = "DAY")]
        render: Option<i64>,
    },
    /// gen, oi, train, reconstruct and eval in one run.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DAY")]
        render: Option<i64>,
    },
    /// Print the resolved config as JSON.
    Config(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let sets = common
        .sets
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("--set expects KEY=VALUE, got {s:?}"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p, &sets)?,
        None => ExperimentConfig::resolve(None, &sets)?,
    };
    if let Some(dir) = &common.out {
        cfg.paths = experiment::Paths::under(dir);
    }
    if let Ok(seed) = std::env::var("IRREGRID_SEED") {
        let seed = seed.trim().parse().map_err(|_| {
            Error::InvalidParameter(format!("IRREGRID_SEED must be an integer, got {seed:?}"))
        })?;
        cfg.override_seeds(seed);
    }
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::InvalidParameter("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    Ok(cfg)
}

fn print_report(report: &ExperimentReport) {
    let show = |label: &str, mean: Option<f64>, note: &str| match mean {
        Some(m) => println!("{label:<10} {m:.4}{note}"),
        None => println!("{label:<10} FAILED{note}"),
    };
    println!("mean relative RMSE");
    show("lr", report.baseline.mean, "");
    for s in &report.series {
        let note = match (&s.error, s.fallbacks) {
            (Some(e), _) => format!("  ({e})"),
            (None, Some(f)) if f > 0 => format!("  ({f} fallbacks)"),
            _ => String::new(),
        };
        show(&s.label, s.mean, &note);
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Gen(c) => json(&experiment::cmd_gen(&load(&c)?)?)?,
        Command::Oi(c) => json(&experiment::cmd_oi(&load(&c)?)?)?,
        Command::Train {
            common,
            dump_design,
        } => json(&experiment::cmd_train(
            &load(&common)?,
            dump_design.as_deref(),
        )?)?,
        Command::Reconstruct(c) => json(&experiment::cmd_reconstruct(&load(&c)?)?)?,
        Command::Eval { common, render } => {
            print_report(&experiment::cmd_eval(&load(&common)?, render)?)
        }
        Command::Report { common, render } => {
            let cfg = load(&common)?;
            print_report(&experiment::cmd_report(&cfg, render)?);
            eprintln!(
                "outputs in {} ({:.1} s)",
                cfg.paths.outputs.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Config(c) => json(&load(&c)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}

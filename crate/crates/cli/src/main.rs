//! `zubov`: train, verify and certify neural Lyapunov controllers.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use commands::{summary_row, Run, SummaryRow};
use config::{resolve, CliConfig, Overrides, Preset, SchemeName};
use error::{CliError, CliResult};
use manifest::RunManifest;

/// Environment variable capping concurrent runs in `batch`.
const THREADS_ENV: &str = "ZUBOV_THREADS";

#[derive(Parser)]
#[command(name = "zubov", version, about = "Neural Lyapunov controller synthesis and region-of-attraction certification")]
struct Cli {
    /// Log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; JSON is accepted as a fallback.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Run directory; defaults to `output_dir` from the config, else
    /// `runs/<system>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct VerifyArgs {
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Wall-clock budget in seconds; exceeding it exits with code 3.
    #[arg(long)]
    timeout: Option<f64>,
    /// Subdomains bounded per iteration.
    #[arg(long)]
    batch: Option<usize>,
    /// Threshold margin after a counterexample.
    #[arg(long)]
    eps: Option<f64>,
    /// Check forward invariance of `V ≤ c1` alone, with `c2 = c1 + eps`.
    #[arg(long)]
    thin_band: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: joint controller and Lyapunov training with domain growth.
    Train(Common),
    /// Stage 2: counterexample-guided fine-tuning.
    Cegis(Common),
    /// Branch-and-bound verification with adaptive thresholds.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: VerifyArgs,
    },
    /// Empirical PGD and trajectory verification of the verified levels.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Schemes to run; all configured schemes when omitted.
        #[arg(long, value_enum)]
        scheme: Vec<SchemeName>,
        /// Overrides the trajectory count (or PGD restart count).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write closed-loop rollouts from inside the certified set as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Keep every k-th state.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Monte-Carlo volume of the certified ROA and of the unverified hole.
    Volume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Check artifact hashes and emit the summary row and V slices.
    Report(Common),
    /// train, cegis, verify, certify, volume and report in one go.
    Run(Common),
    /// Full runs over consecutive seeds, each in `<out>/seed-<k>`.
    Batch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Print the effective configuration as TOML.
    Config(Common),
}

fn load(c: &Common) -> CliResult<CliConfig> {
    let ov = Overrides {
        system: c.system.clone(),
        seed: c.seed,
        preset: c.preset,
        output_dir: c.out.clone(),
    };
    resolve(c.config.as_deref(), &ov)
}

fn open(c: &Common) -> CliResult<Run> {
    Run::new(load(c)?, c.out.clone())
}

fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn batch(c: &Common, seeds: u64) -> CliResult<i32> {
    let base = load(c)?;
    let root = c
        .out
        .clone()
        .or_else(|| base.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-batch", base.run.system)));
    std::fs::create_dir_all(&root)?;
    let first = base.run.seed;
    let next = Mutex::new(0u64);
    let rows: Mutex<Vec<(u64, CliResult<(i32, SummaryRow)>)>> = Mutex::new(vec![]);
    let workers = threads()?.min(seeds.max(1) as usize);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("seed counter");
                    if *n >= seeds {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let seed = first + k;
                let mut cfg = base.clone();
                cfg.run.seed = seed;
                let dir = root.join(format!("seed-{seed}"));
                let out = Run::new(cfg, Some(dir.clone())).and_then(|r| {
                    let code = r.run_all()?;
                    let row = summary_row(&RunManifest::load(&dir)?)?;
                    Ok((code, row))
                });
                rows.lock().expect("results").push((seed, out));
            });
        }
    });
    let mut rows = rows.into_inner().expect("results");
    rows.sort_by_key(|r| r.0);
    let mut w = csv::Writer::from_path(root.join("batch_summary.csv"))?;
    let mut worst = 0;
    let mut volumes = vec![];
    for (seed, r) in rows {
        match r {
            Ok((code, row)) => {
                println!("{}", row.line());
                volumes.extend(row.roa_volume);
                w.serialize(&row)?;
                worst = worst.max(code);
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                worst = worst.max(e.exit_code());
            }
        }
    }
    w.flush()?;
    if !volumes.is_empty() {
        let n = volumes.len() as f64;
        let mean = volumes.iter().sum::<f64>() / n;
        let sd = (volumes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        println!("ROA volume over {} seeds: {mean:.3} ± {sd:.3}", volumes.len());
    }
    Ok(worst)
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train(c) => open(&c)?.train(),
        Command::Cegis(c) => open(&c)?.cegis(),
        Command::Verify { common, args } => {
            let mut cfg = load(&common)?;
            cfg.run.c1 = args.c1.or(cfg.run.c1);
            cfg.run.c2 = args.c2.or(cfg.run.c2);
            let v = &mut cfg.run.verify;
            v.timeout_secs = args.timeout.or(v.timeout_secs);
            v.batch = args.batch.unwrap_or(v.batch);
            v.eps = args.eps.unwrap_or(v.eps);
            cfg.validate()?;
            Run::new(cfg, common.out.clone())?.verify(args.thin_band)
        }
        Command::Certify { common, scheme, samples } => {
            let mut cfg = load(&common)?;
            let schemes = if scheme.is_empty() { cfg.schemes.clone() } else { scheme };
            if let Some(n) = samples {
                cfg.trajectories = n;
                cfg.pgd_restarts = n;
            }
            cfg.validate()?;
            Run::new(cfg, common.out.clone())?.certify(&schemes)
        }
        Command::Simulate { common, n, stride } => open(&common)?.simulate(n, stride),
        Command::Volume { common, samples } => {
            let mut cfg = load(&common)?;
            cfg.volume_samples = samples.unwrap_or(cfg.volume_samples);
            cfg.validate()?;
            Run::new(cfg, common.out.clone())?.volume()
        }
        Command::Report(c) => open(&c)?.report(),
        Command::Run(c) => open(&c)?.run_all(),
        Command::Batch { common, seeds } => batch(&common, seeds),
        Command::Config(c) => {
            print!("{}", load(&c)?.to_toml()?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match dispatch(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

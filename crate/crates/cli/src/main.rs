use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use otnet::runner::{self, ConfigSources, GroundTruthConfig, GROUND_TRUTH_DIR};

/// Neural optimal transport experiments on 2D point clouds.
#[derive(Parser)]
#[command(name = "otnet", version)]
struct Cli {
    /// Root for run directories and the shared ground truth.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or reuse) the ground-truth reference map.
    GroundTruth {
        #[arg(long)]
        seed: Option<u64>,
        /// Ground-truth setting, e.g. `size=500` or `epsilon=0.02`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one registered experiment.
    Run {
        /// Registry name; optional when --config names the experiment.
        name: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total iterations T.
        #[arg(long)]
        iters: Option<usize>,
        /// JSON file with run fields, merged over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted field assignment, e.g. `training.batch_source=128`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the resolved configuration and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Tabulate finished runs.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// List registered experiments.
    List,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn ground_truth_config(
    seed: Option<u64>,
    overrides: &[String],
) -> anyhow::Result<GroundTruthConfig> {
    let mut tree = serde_json::to_value(GroundTruthConfig::default())?;
    for o in overrides {
        runner::apply_override(&mut tree, o)?;
    }
    if let Some(s) = seed {
        tree["seed"] = s.into();
    }
    let cfg: GroundTruthConfig = serde_json::from_value(tree).context("ground-truth settings")?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let out = std::path::absolute(&cli.out).map_err(usage)?;
    let gt_dir = out.join(GROUND_TRUTH_DIR);
    match cli.command {
        Command::List => {
            for p in runner::registry() {
                println!(
                    "{:<32} {:<12} T={}",
                    p.name,
                    format!("{:?}", p.family).to_lowercase(),
                    p.total_iterations()
                );
            }
        }
        Command::GroundTruth { seed, overrides } => {
            let cfg = ground_truth_config(seed, &overrides).map_err(usage)?;
            let gt = runner::ensure_ground_truth(&gt_dir, &cfg).map_err(runtime)?;
            println!("ground truth: {} pairs in {}", gt.len(), gt_dir.display());
        }
        Command::Run {
            name,
            seed,
            iters,
            config,
            overrides,
            dry_run,
        } => {
            let src = ConfigSources {
                name,
                file: config,
                overrides,
                seed,
                iterations: iters,
            };
            let run = runner::resolve_config(&src, &out).map_err(usage)?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&run).map_err(runtime)?);
                return Ok(());
            }
            let record = runner::run(&run, &gt_dir).map_err(runtime)?;
            if let Some(r) = record.report {
                println!(
                    "{}: min eps2 {:.4} at step {} of {} ({})",
                    run.experiment_name,
                    r.min_eps2,
                    r.t_min,
                    r.total_steps,
                    run.output_dir.display()
                );
            }
        }
        Command::Summarize { dirs } => {
            let summary = runner::summarize(&dirs).map_err(runtime)?;
            summary.write(&out).map_err(runtime)?;
            print!("{}", summary.text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

use anfr_harness::report::write_report;
use anfr_harness::run::{run, run_dir};
use anfr_harness::sweep::sweep;
use anfr_harness::{checkpoint, load_config, ExperimentConfig, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "anfr", version, about = "Federated normalization-free CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed of an experiment.
    Run {
        config: PathBuf,
        /// Seed to run; defaults to the first of `experiment.seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root, overriding the env var and the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several seeds in parallel and summarize them.
    Sweep {
        config: PathBuf,
        /// Comma-separated seeds; defaults to `experiment.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the architecture × aggregation table from completed runs.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "accuracy")]
        metric: String,
    },
    /// Print the tensors stored in a checkpoint.
    Inspect { checkpoint: PathBuf },
}

/// `--out`, then `ANFR_OUTPUT_ROOT`, then `experiment.output_dir`.
fn output_root(cfg: &ExperimentConfig, out: Option<PathBuf>, env: Option<String>) -> PathBuf {
    out.or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| cfg.experiment.output_dir.clone())
}

fn inspect(path: &Path) -> Result<()> {
    let params = checkpoint::load(path)?;
    let width = params.keys().map(String::len).max().unwrap_or(4).max(4);
    println!("{:width$}  {:>16}  {:>12}  {:>12}  {:>12}", "name", "shape", "mean", "abs max", "l2 norm");
    let mut total = 0;
    for (name, t) in &params {
        let d = t.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let l2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += d.len();
        println!(
            "{name:width$}  {:>16}  {mean:>12.4e}  {max:>12.4e}  {l2:>12.4e}",
            format!("{:?}", t.dims())
        );
    }
    println!("{} tensors, {total} values", params.len());
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    let env_root = std::env::var("ANFR_OUTPUT_ROOT").ok();
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
            let root = output_root(&cfg, out, env_root);
            let m = run(&cfg, seed, &root)?;
            println!("{}: {:?}", run_dir(&root, &m.name, seed).display(), m.status);
        }
        Command::Sweep { config, seeds, out } => {
            let cfg = load_config(&config)?;
            let seeds = seeds.unwrap_or_else(|| cfg.experiment.seeds.clone());
            let root = output_root(&cfg, out, env_root);
            let s = sweep(&cfg, &seeds, &root)?;
            println!("{}", s.dir.display());
            for r in &s.summary {
                println!("{:<20} {:.4} ± {:.4} (n = {})", r.metric, r.mean, r.std, r.n);
            }
        }
        Command::Report { dir, metric } => {
            print!("{}", write_report(&dir, &metric)?.to_text());
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! `beamsim` command line: run scenarios, sweep parameters, summarize runs.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{parse_seeds, Point, ScenarioFile};
use crate::output::{aggregate, load_records, run_one, write_report, write_summary, RunRecord};

#[derive(Parser)]
#[command(name = "beamsim", version, about = "Backscatter-assisted distributed beamforming simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario in a config file once per seed.
    Run(RunArgs),
    /// Run every point of the config's [sweep] table once per seed.
    Sweep(RunArgs),
    /// Print mean and 95% interval per sweep point for a finished output dir.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file; the default testbed when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seeds overriding the config, e.g. `1,2,3` or `0..10`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

fn load(args: &RunArgs) -> Result<ScenarioFile> {
    let mut file = match &args.config {
        Some(p) => ScenarioFile::load(p)?,
        None => ScenarioFile::default(),
    };
    if let Some(s) = &args.seeds {
        file.seeds = parse_seeds(s)?;
    }
    file.validate()?;
    Ok(file)
}

fn execute(file: &ScenarioFile, points: &[Point], out: &Path, jobs: Option<usize>) -> Result<Vec<RunRecord>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // fail on a bad point before any work starts
    for p in points {
        file.at(p)?.scenario(file.seeds[0])?;
    }
    std::fs::write(out.join("config.toml"), file.to_toml()?)?;
    let tasks: Vec<(&Point, u64)> = points.iter().flat_map(|p| file.seeds.iter().map(move |&s| (p, s))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build()?;
    let records: Result<Vec<RunRecord>> =
        pool.install(|| tasks.par_iter().map(|&(p, s)| run_one(file, p, s, out)).collect());
    let records = records?;
    write_summary(out, &records)?;
    Ok(records)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let file = load(&args)?;
            let records = execute(&file, &[Point::new()], &args.out, args.jobs)?;
            for r in &records {
                println!("seed {:>4}  power {:.4}  stages {}", r.seed, r.power_percentage, r.stages.len());
            }
        }
        Command::Sweep(args) => {
            let file = load(&args)?;
            let points = file.points();
            let records = execute(&file, &points, &args.out, args.jobs)?;
            write_report(&aggregate(&records), std::io::stdout().lock())?;
        }
        Command::Report { out } => {
            let records = load_records(&out)?;
            write_report(&aggregate(&records), std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wban_ima::experiment::{self, SweepPoint};
use wban_ima::{Error, Scenario};

#[derive(Parser, Debug)]
#[command(
    name = "wban-sim",
    version,
    about = "Coexisting-WBAN simulator with IMA relay selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and export its metrics.
    Run(Common),
    /// Run the subject WBAN with and without IMA over several seeds.
    Compare(Multi),
    /// Compare at every point of a parameter grid.
    Sweep {
        #[command(flatten)]
        multi: Multi,
        /// Grid axis as key=v1,v2,...; repeatable.
        #[arg(long = "param", value_name = "KEY=V1,V2")]
        params: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the scenario seed (the base seed for multi-seed commands).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Multi {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
}

fn load(c: &Common) -> Result<Scenario, Error> {
    let mut sc = Scenario::load(&c.config)?;
    if let Some(seed) = c.seed {
        sc.seed = seed;
    }
    if let Some(d) = c.duration {
        sc.duration_s = d;
    }
    sc.validate()?;
    Ok(sc)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Run(c) => {
            let sc = load(&c)?;
            let report = wban_ima::run_scenario(&sc)?;
            experiment::export_run(&report, &c.out)?;
            Ok(experiment::run_summary(&report))
        }
        Command::Compare(m) => {
            let sc = load(&m.common)?;
            let runs = experiment::compare(&sc, sc.seed, m.seeds)?;
            experiment::export_comparison(&runs, &m.common.out)?;
            Ok(experiment::comparison_summary(&runs.comparison))
        }
        Command::Sweep { multi, params } => {
            let sc = load(&multi.common)?;
            let grid = params
                .iter()
                .map(|p| experiment::parse_param(p))
                .collect::<Result<Vec<_>, _>>()?;
            let points = experiment::sweep(&sc, &grid, sc.seed, multi.seeds)?;
            let keys: Vec<String> = grid.iter().map(|(k, _)| k.clone()).collect();
            write(
                &multi.common.out.join("sweep.csv"),
                &experiment::sweep_csv(&keys, &points),
            )?;
            let text = sweep_summary(&points);
            write(&multi.common.out.join("summary.txt"), &text)?;
            Ok(text)
        }
    }
}

fn sweep_summary(points: &[SweepPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let label: Vec<String> = p
            .assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        out.push_str(&format!(
            "[{}]\n",
            if label.is_empty() {
                "defaults".to_string()
            } else {
                label.join(" ")
            }
        ));
        out.push_str(&experiment::comparison_summary(&p.comparison));
        out.push('\n');
    }
    out
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::Internal(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("wban-sim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use filegrid::coordination::ObjectiveSpec;
use filegrid::optimizer::StopCondition;
use filegrid::sim::{report_lines, sweep_csv, sweep_fleet_size, JobSetup, Scenario, SimConfig};

const EXIT_INVALID: u8 = 2;
const EXIT_FAILED: u8 = 1;

/// Discrete-event simulation of a worker fleet.
#[derive(Parser)]
#[command(name = "sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario file and print its speedup report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Homogeneous fleets of 1..=max_p workers.
    Sweep {
        #[arg(long)]
        max_p: usize,
        #[arg(long, default_value_t = 3600.0)]
        t_eval: f64,
        #[arg(long, default_value_t = 3.6)]
        t_io: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        max_evals: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        levels: u32,
        #[arg(long, default_value_t = 1)]
        target_order: usize,
        /// Also write `(p, speedup, efficiency, wasted_duplicate, wasted_outdated)` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match Cli::parse().command {
        Command::Run { scenario } => {
            let parsed = std::fs::read_to_string(&scenario)
                .map_err(|e| e.to_string())
                .and_then(|text| Scenario::parse(&text).map_err(|e| e.to_string()));
            let scenario = match parsed {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error={}: {e}", scenario.display());
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            match scenario.run() {
                Ok(report) => print!("{}", report_lines(&report)),
                Err(e) => {
                    eprintln!("error={e}");
                    return ExitCode::from(EXIT_FAILED);
                }
            }
        }
        Command::Sweep { max_p, t_eval, t_io, seed, max_evals, n, levels, target_order, csv } => {
            let setup = JobSetup::in_memory(ObjectiveSpec { n, levels, target_order, eval_delay_ms: 0 });
            let sim = SimConfig::new(t_eval, t_io, seed, StopCondition::max_evaluations(max_evals));
            let rows = match sweep_fleet_size(max_p, &setup, &sim) {
                Ok(rows) => rows,
                Err(e) => {
                    eprintln!("error={e}");
                    return ExitCode::from(EXIT_INVALID);
                }
            };
            for row in &rows {
                let r = &row.report;
                println!(
                    "p={} makespan={} speedup={} ideal_speedup={} efficiency={} wasted_duplicate={} wasted_outdated={} rejected_not_better={}",
                    row.p, r.makespan, r.speedup, r.ideal_speedup, r.efficiency, r.wasted_duplicate, r.wasted_outdated,
                    r.rejected_not_better
                );
            }
            if let Some(path) = csv {
                if let Err(e) = std::fs::write(&path, sweep_csv(&rows)) {
                    eprintln!("error={}: {e}", path.display());
                    return ExitCode::from(EXIT_FAILED);
                }
            }
        }
    }
    ExitCode::SUCCESS
}

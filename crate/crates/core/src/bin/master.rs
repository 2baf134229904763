use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use filegrid::coordination::{JobDirectory, ObjectiveSpec};
use filegrid::master::{self, InitParams, InitialConfig, EXIT_IO};
use filegrid::optimizer::StopCondition;

/// Controls a job directory: initialize it, raise or clear the run signal,
/// inspect progress and report the final result.
#[derive(Parser)]
#[command(name = "master", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Zero,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Write the manifest and the initial best record.
    Init {
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        levels: u32,
        #[arg(long, default_value_t = 1)]
        target_order: usize,
        #[arg(long, value_enum, default_value_t = Init::Zero)]
        init_config: Init,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stop_max_evals: Option<u64>,
        #[arg(long)]
        stop_target: Option<f64>,
        #[arg(long)]
        stop_stagnation: Option<u64>,
        #[arg(long)]
        stop_local_optimum: bool,
        /// Artificial wall-clock milliseconds per evaluation on workers.
        #[arg(long, default_value_t = 0)]
        eval_delay_ms: u64,
        #[arg(long)]
        job_id: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Raise the run signal.
    Start { dir: PathBuf },
    /// Clear the run signal.
    Stop { dir: PathBuf },
    Status { dir: PathBuf },
    /// Final result of a stopped job.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let (mut out, mut err) = (io::stdout().lock(), io::stderr().lock());
    let code = match cli.command {
        Command::Init {
            dir,
            n,
            levels,
            target_order,
            init_config,
            seed,
            stop_max_evals,
            stop_target,
            stop_stagnation,
            stop_local_optimum,
            eval_delay_ms,
            job_id,
            force,
        } => match master::prepare_dir(&dir) {
            Err(e) => {
                let _ = writeln!(err, "error={}: {e}", dir.display());
                EXIT_IO
            }
            Ok(job) => {
                let params = InitParams {
                    job_id,
                    objective: ObjectiveSpec { n, levels, target_order, eval_delay_ms },
                    initial: match init_config {
                        Init::Zero => InitialConfig::Zero,
                        Init::Random => InitialConfig::Random,
                    },
                    seed,
                    stop: StopCondition {
                        max_total_evaluations: stop_max_evals,
                        target_performance: stop_target,
                        stagnation: stop_stagnation,
                        local_optimum: stop_local_optimum,
                    },
                    force,
                };
                master::cmd_init(&job, &params, &mut out, &mut err)
            }
        },
        Command::Start { dir } => master::cmd_start(&JobDirectory::open(dir), &mut out, &mut err),
        Command::Stop { dir } => master::cmd_stop(&JobDirectory::open(dir), &mut out, &mut err),
        Command::Status { dir } => master::cmd_status(&JobDirectory::open(dir), &mut out, &mut err),
        Command::Report { dir } => master::cmd_report(&JobDirectory::open(dir), &mut out, &mut err),
    };
    let _ = out.flush();
    ExitCode::from(code as u8)
}

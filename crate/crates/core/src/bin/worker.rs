use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use filegrid::clock::{CancelToken, Clock, SystemClock};
use filegrid::worker::{
    parse_time_of_day, run_daemon, scheduler_tick, IdleProbe, InstanceRegistry, ManifestLauncher, ScriptedTrace,
    SystemIdleProbe, TickDecision, WorkerConfig,
};

const EXIT_CONFIG: u8 = 2;

/// Idle-cycle worker daemon.
#[derive(Parser)]
#[command(name = "worker", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Poll the configured jobs and optimize while the machine is idle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Shut down cleanly after this many seconds.
        #[arg(long = "for", value_name = "SECONDS")]
        duration: Option<f64>,
        /// Treat the machine as permanently idle.
        #[arg(long)]
        assume_idle: bool,
    },
    /// Print the current idle estimate.
    Probe,
    /// Print the decision a single poll would take at `--now`, without starting anything.
    Tick {
        #[arg(long)]
        config: PathBuf,
        /// Unix timestamp.
        #[arg(long)]
        now: f64,
        /// Idle seconds to assume instead of probing.
        #[arg(long)]
        idle: Option<f64>,
        /// Local time of day (HH:MM) instead of deriving it from `--now`.
        #[arg(long)]
        time_of_day: Option<String>,
    },
}

struct FixedIdle(f64);

impl IdleProbe for FixedIdle {
    fn idle_duration(&self, _now: f64) -> f64 {
        self.0
    }
}

fn load(path: &Path, clock: Arc<dyn Clock>) -> Result<WorkerConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    WorkerConfig::parse(&text, clock).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match cli.command {
        Command::Probe => {
            println!("idle_seconds={}", SystemIdleProbe.idle_duration(clock.now()));
        }
        Command::Tick { config, now, idle, time_of_day } => {
            let config = match load(&config, clock.clone()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error={e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let tod = match time_of_day.as_deref().map(parse_time_of_day) {
                Some(Some(t)) => t,
                Some(None) => {
                    eprintln!("error=bad --time-of-day");
                    return ExitCode::from(EXIT_CONFIG);
                }
                None => (now + clock.utc_offset()).rem_euclid(86_400.0),
            };
            let probe: Box<dyn IdleProbe> = match idle {
                Some(secs) => Box::new(FixedIdle(secs)),
                None => Box::new(SystemIdleProbe),
            };
            match scheduler_tick(&config, probe.as_ref(), &InstanceRegistry::new(), now, tod) {
                TickDecision::Start { job } => {
                    println!("decision=start");
                    println!("job={}", config.jobs[job].location());
                }
                TickDecision::Skip { reason } => {
                    println!("decision=skip");
                    println!("reason={reason}");
                }
            }
        }
        Command::Run { config, duration, assume_idle } => {
            let config = match load(&config, clock.clone()) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error={e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let cancel = CancelToken::new();
            if let Some(secs) = duration {
                let c = cancel.clone();
                std::thread::spawn(move || {
                    std::thread::sleep(std::time::Duration::from_secs_f64(secs.max(0.0)));
                    c.cancel();
                });
            }
            let probe: Box<dyn IdleProbe> =
                if assume_idle { Box::new(ScriptedTrace::new()) } else { Box::new(SystemIdleProbe) };
            let report = run_daemon(&config, probe.as_ref(), clock, &cancel, Arc::new(ManifestLauncher));
            println!("ticks={}", report.ticks);
            println!("starts={}", report.starts);
            println!("kills={}", report.kills);
            println!("completed_loops={}", report.completed_loops);
        }
    }
    ExitCode::SUCCESS
}

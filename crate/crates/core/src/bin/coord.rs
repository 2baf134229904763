use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use filegrid::clock::{Clock, SystemClock};
use filegrid::coordination::{BestState, ChangeRecord, CommitResult, CoordError, JobDirectory, LockOptions};
use filegrid::objective::ConfigVector;

const COUNTER_BITS: usize = 16;

/// Low-level tools for exercising the shared-directory protocol from
/// several processes at once.
#[derive(Parser)]
#[command(name = "coord", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write counter record 0, replacing any existing record.
    Init { dir: PathBuf },
    /// Print the current record.
    Read { dir: PathBuf },
    /// Race on every version in turn: wait for `<dir>/race.go`, then for
    /// each round r attempt the swap r -> r+1 and print the outcome.
    Race {
        dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 200)]
        rounds: u64,
    },
    /// Commit successive counter records until killed, printing each.
    Hammer {
        dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 1.0)]
        stale_after: f64,
        /// Stop after this many commits.
        #[arg(long)]
        count: Option<u64>,
    },
}

/// Record `version` of the counter: the version's low bits as the
/// configuration and the version itself as the performance.
fn counter_state(version: u64, id: &str, now: f64) -> BestState {
    let bits = (0..COUNTER_BITS).map(|b| ((version >> b) & 1) as u32).collect();
    BestState {
        version,
        config: ConfigVector::new(bits),
        performance: version as f64,
        estimated: false,
        updated_by: id.to_string(),
        updated_at: now,
    }
}

fn exit_for(e: &CoordError) -> ExitCode {
    eprintln!("error={e}");
    ExitCode::from(match e {
        CoordError::Io { .. } | CoordError::Contention { .. } => 4,
        _ => 3,
    })
}

fn main() -> ExitCode {
    env_logger::init();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match Cli::parse().command {
        Command::Init { dir } => {
            if let Err(e) = std::fs::create_dir_all(&dir) {
                eprintln!("error={}: {e}", dir.display());
                return ExitCode::from(4);
            }
            let job = JobDirectory::open_with_clock(&dir, clock.clone());
            if let Err(e) = job.write_initial(&counter_state(0, "init", clock.now()), true) {
                return exit_for(&e);
            }
        }
        Command::Read { dir } => match JobDirectory::open_with_clock(&dir, clock).read_best() {
            Ok(best) => {
                println!("version={}", best.version);
                println!("performance={}", best.performance);
                println!("updated_by={}", best.updated_by);
                println!("config={}", best.config);
            }
            Err(e) => return exit_for(&e),
        },
        Command::Race { dir, id, rounds } => {
            let options = LockOptions { deadline: 60.0, ..LockOptions::default() };
            let job = JobDirectory::open_with_clock(&dir, clock.clone()).with_lock_options(options);
            while !dir.join("race.go").exists() {
                std::thread::sleep(Duration::from_millis(1));
            }
            let mut out = std::io::stdout().lock();
            for round in 0..rounds {
                loop {
                    match job.read_best() {
                        Ok(best) if best.version >= round => break,
                        Ok(_) => std::thread::yield_now(),
                        Err(e) if e.is_transient() => std::thread::yield_now(),
                        Err(e) => return exit_for(&e),
                    }
                }
                let result = loop {
                    match job.commit_update(round, &counter_state(round + 1, &id, clock.now())) {
                        Ok(r) => break r,
                        Err(e) if e.is_transient() => continue,
                        Err(e) => return exit_for(&e),
                    }
                };
                let label = match result {
                    CommitResult::Committed => "committed",
                    CommitResult::VersionConflict { .. } => "conflict",
                };
                let _ = writeln!(out, "round={round} result={label}");
            }
        }
        Command::Hammer { dir, id, stale_after, count } => {
            let options = LockOptions { stale_after, deadline: 60.0, ..LockOptions::default() };
            let job = JobDirectory::open_with_clock(&dir, clock.clone()).with_lock_options(options);
            let mut committed = 0;
            while count.is_none_or(|c| committed < c) {
                let base = match job.read_best() {
                    Ok(b) => b,
                    Err(e) if e.is_transient() => continue,
                    Err(e) => return exit_for(&e),
                };
                let next = counter_state(base.version + 1, &id, clock.now());
                let change = ChangeRecord {
                    version: next.version,
                    index: 0,
                    new_value: next.config.levels()[0],
                    delta: 1.0,
                    proposer: id.clone(),
                    evaluations: 1,
                };
                match job.commit_update_logged(base.version, &next, Some(&change)) {
                    Ok(CommitResult::Committed) => {
                        committed += 1;
                        let mut out = std::io::stdout().lock();
                        let _ = writeln!(out, "committed={}", next.version);
                        let _ = out.flush();
                    }
                    Ok(CommitResult::VersionConflict { .. }) => {}
                    Err(e) if e.is_transient() => {}
                    Err(e) => return exit_for(&e),
                }
            }
        }
    }
    ExitCode::SUCCESS
}

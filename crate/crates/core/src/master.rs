//! Operator commands for a job directory.
//!
//! Every command prints `key=value` lines and returns a process exit code:
//! 0 success, 2 invalid parameters, 3 wrong job state, 4 I/O failure.

use std::io::Write;
use std::path::Path;

use crate::coordination::{CoordError, JobDirectory, Manifest, ObjectiveSpec};
use crate::objective::ConfigVector;
use crate::optimizer::{audit_estimate, initialize, random_config, OptimizerError, StopCondition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_STATE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialConfig {
    #[default]
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitParams {
    pub job_id: Option<String>,
    pub objective: ObjectiveSpec,
    pub initial: InitialConfig,
    pub seed: u64,
    pub stop: StopCondition,
    pub force: bool,
}

fn coord_exit(e: &CoordError) -> i32 {
    match e {
        CoordError::NotInitialized { .. } | CoordError::AlreadyInitialized { .. } => EXIT_STATE,
        CoordError::Format { .. } | CoordError::Contract(_) => EXIT_STATE,
        CoordError::Io { .. } | CoordError::Contention { .. } => EXIT_IO,
    }
}

fn fail(err: &mut dyn Write, code: i32, message: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error={message}");
    code
}

/// Opens `dir`, creating it if needed.
pub fn prepare_dir(dir: &Path) -> std::io::Result<JobDirectory> {
    std::fs::create_dir_all(dir)?;
    Ok(JobDirectory::open(dir))
}

pub fn cmd_init(job: &JobDirectory, params: &InitParams, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let spec = &params.objective;
    // evaluate without any artificial delay
    let objective = match (ObjectiveSpec { eval_delay_ms: 0, ..spec.clone() }).build(job.clock().clone()) {
        Ok(o) => o,
        Err(e) => return fail(err, EXIT_INVALID, e),
    };
    match job.is_initialized() {
        Ok(true) if !params.force => {
            return fail(err, EXIT_STATE, format!("{} is already initialized; pass --force to overwrite", job.location()))
        }
        Ok(_) => {}
        Err(e) => return fail(err, coord_exit(&e), e),
    }
    let config = match params.initial {
        InitialConfig::Zero => ConfigVector::zeros(spec.n),
        InitialConfig::Random => random_config(spec.n, spec.levels, params.seed),
    };
    let manifest = Manifest {
        job_id: params.job_id.clone().unwrap_or_else(|| job.job_id().to_string()),
        objective: spec.clone(),
        stop: params.stop.clone(),
    };
    if let Err(e) = job.write_manifest(&manifest) {
        return fail(err, coord_exit(&e), e);
    }
    match initialize(job, config, objective.as_ref(), "master", params.force) {
        Ok(state) => {
            let _ = writeln!(out, "job_id={}", manifest.job_id);
            let _ = writeln!(out, "version={}", state.version);
            let _ = writeln!(out, "performance={}", state.performance);
            let _ = writeln!(out, "config={}", state.config);
            EXIT_OK
        }
        Err(OptimizerError::Coord(e)) => fail(err, coord_exit(&e), e),
        Err(e) => fail(err, EXIT_INVALID, e),
    }
}

pub fn cmd_start(job: &JobDirectory, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match job.is_initialized() {
        Ok(true) => {}
        Ok(false) => return fail(err, EXIT_STATE, format!("{} is not initialized; run init first", job.location())),
        Err(e) => return fail(err, coord_exit(&e), e),
    }
    match job.signal_set() {
        Ok(()) => {
            let _ = writeln!(out, "signal=present");
            EXIT_OK
        }
        Err(e) => fail(err, coord_exit(&e), e),
    }
}

pub fn cmd_stop(job: &JobDirectory, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match job.signal_clear() {
        Ok(()) => {
            let _ = writeln!(out, "signal=absent");
            EXIT_OK
        }
        Err(e) => fail(err, EXIT_IO, e),
    }
}

pub fn cmd_status(job: &JobDirectory, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let signal = match job.signal_exists() {
        Ok(s) => s,
        Err(e) => return fail(err, EXIT_IO, e),
    };
    let best = match job.read_best() {
        Ok(b) => b,
        Err(CoordError::NotInitialized { path }) => {
            let _ = writeln!(out, "signal={}", if signal { "present" } else { "absent" });
            return fail(err, EXIT_STATE, format!("{path} is not initialized (no best.dat)"));
        }
        Err(e) => return fail(err, coord_exit(&e), e),
    };
    let changes = match job.read_changes() {
        Ok(c) => c,
        Err(e) => return fail(err, coord_exit(&e), e),
    };
    let _ = writeln!(out, "signal={}", if signal { "present" } else { "absent" });
    let _ = writeln!(out, "version={}", best.version);
    let _ = writeln!(out, "performance={}", best.performance);
    let _ = writeln!(out, "estimated={}", u8::from(best.estimated));
    let _ = writeln!(out, "updated_by={}", best.updated_by);
    let _ = writeln!(out, "updated_at={}", best.updated_at);
    let _ = writeln!(out, "commits={}", changes.len());
    let _ = writeln!(out, "evaluations_reported={}", changes.iter().map(|c| c.evaluations).sum::<u64>());
    EXIT_OK
}

/// Proposal outcomes summed over all run logs in a job directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutcomeTotals {
    pub committed: u64,
    pub not_better: u64,
    pub conflict: u64,
    pub stale: u64,
    pub abandoned: u64,
}

impl OutcomeTotals {
    pub fn from_logs(logs: &[(String, String)]) -> Self {
        let mut t = Self::default();
        for (_, text) in logs {
            for line in text.lines() {
                match line.split_whitespace().nth(4) {
                    Some(o) if o.starts_with("committed") => t.committed += 1,
                    Some("not_better") => t.not_better += 1,
                    Some("conflict") => t.conflict += 1,
                    Some("stale") => t.stale += 1,
                    Some("abandoned") => t.abandoned += 1,
                    _ => {}
                }
            }
        }
        t
    }
}

/// Final report of a stopped job. Re-evaluates the final configuration and
/// never writes to the directory.
pub fn cmd_report(job: &JobDirectory, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match job.signal_exists() {
        Ok(true) => return fail(err, EXIT_STATE, "job is still running; stop it before reporting"),
        Ok(false) => {}
        Err(e) => return fail(err, EXIT_IO, e),
    }
    let manifest = match job.read_manifest() {
        Ok(m) => m,
        Err(e) => return fail(err, coord_exit(&e), e),
    };
    let spec = ObjectiveSpec { eval_delay_ms: 0, ..manifest.objective };
    let objective = match spec.build(job.clock().clone()) {
        Ok(o) => o,
        Err(e) => return fail(err, EXIT_INVALID, e),
    };
    let best = match job.read_best() {
        Ok(b) => b,
        Err(e) => return fail(err, coord_exit(&e), e),
    };
    let audit = match audit_estimate(&best, objective.as_ref()) {
        Ok(a) => a,
        Err(e) => return fail(err, EXIT_INVALID, e),
    };
    let changes = job.read_changes().unwrap_or_default();
    let totals = OutcomeTotals::from_logs(&job.read_run_logs().unwrap_or_default());

    let _ = writeln!(out, "version={}", best.version);
    let _ = writeln!(out, "config={}", best.config);
    let _ = writeln!(out, "recorded_performance={}", audit.recorded);
    let _ = writeln!(out, "final_performance={}", audit.actual);
    let _ = writeln!(out, "estimated={}", u8::from(audit.estimated));
    let _ = writeln!(out, "drift={}", audit.drift());
    let _ = writeln!(out, "commits={}", changes.len());
    let _ = writeln!(out, "evaluations_reported={}", changes.iter().map(|c| c.evaluations).sum::<u64>());
    let _ = writeln!(out, "rejected_not_better={}", totals.not_better);
    let _ = writeln!(out, "rejected_conflict={}", totals.conflict);
    let _ = writeln!(out, "rejected_stale={}", totals.stale);
    let _ = writeln!(out, "abandoned={}", totals.abandoned);
    EXIT_OK
}

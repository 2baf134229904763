use std::collections::BTreeSet;

use log::{debug, info, warn};

use crate::clock::CancelToken;
use crate::coordination::{BestState, CoordError, JobDirectory};
use crate::objective::Objective;

use super::{merge, propose, proposal_rng, ChangeProposal, MergeOptions, MergeOutcome, OptimizerError, OptimizerMode,
    StopCondition};

#[derive(Debug, Clone)]
pub struct LoopParams {
    pub worker_id: String,
    pub mode: OptimizerMode,
    pub stop: StopCondition,
    pub seed: u64,
    pub merge: MergeOptions,
    /// How long transient I/O failures are retried before giving up.
    pub io_retry_deadline: f64,
    pub io_retry_backoff: f64,
    /// Append one line per proposal to `run-<worker>.log` in the job directory.
    pub run_log: bool,
}

impl LoopParams {
    pub fn new(worker_id: impl Into<String>, mode: OptimizerMode, stop: StopCondition, seed: u64) -> Self {
        Self {
            worker_id: worker_id.into(),
            mode,
            stop,
            seed,
            merge: MergeOptions::default(),
            io_retry_deadline: 60.0,
            io_retry_backoff: 0.5,
            run_log: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoopExit {
    /// `go.dat` was absent.
    #[default]
    SignalAbsent,
    /// A stop condition fired; this worker cleared the signal.
    StopCondition,
    Cancelled,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoopReport {
    /// Completed evaluations.
    pub evaluations: u64,
    pub commits: u64,
    pub rejected_not_better: u64,
    pub rejected_conflict: u64,
    pub rejected_stale: u64,
    /// Evaluations dropped at a checkpoint or by cancellation.
    pub abandoned: u64,
    pub exit: LoopExit,
}

impl LoopReport {
    fn record(&mut self, outcome: MergeOutcome) {
        match outcome {
            MergeOutcome::Committed { .. } => self.commits += 1,
            MergeOutcome::RejectedNotBetter => self.rejected_not_better += 1,
            MergeOutcome::RejectedConflict => self.rejected_conflict += 1,
            MergeOutcome::RejectedStale => self.rejected_stale += 1,
        }
    }
}

/// Checkpoint for long evaluations: keep going only while the signal file
/// is present. An unreachable share counts as "stop".
pub fn check_stop_during_evaluation(job: &JobDirectory, elapsed_fraction: f64) -> bool {
    match job.signal_exists() {
        Ok(present) => {
            if !present {
                debug!("{}: signal cleared at {:.0}% of evaluation", job.location(), elapsed_fraction * 100.0);
            }
            present
        }
        Err(e) => {
            warn!("signal check failed mid-evaluation, stopping: {e}");
            false
        }
    }
}

struct Runner<'a> {
    job: &'a JobDirectory,
    params: &'a LoopParams,
    cancel: &'a CancelToken,
}

impl Runner<'_> {
    fn retry<T>(&self, mut op: impl FnMut() -> Result<T, CoordError>) -> Result<T, OptimizerError> {
        let mut waited = 0.0;
        loop {
            match op() {
                Err(e) if e.is_transient() && waited < self.params.io_retry_deadline && !self.cancel.is_cancelled() => {
                    warn!("{}: {e}; retrying", self.params.worker_id);
                    self.job.clock().sleep(self.params.io_retry_backoff);
                    waited += self.params.io_retry_backoff;
                }
                other => return other.map_err(OptimizerError::from),
            }
        }
    }

    fn log(&self, base: &BestState, change: (usize, u32), outcome: &str) {
        if !self.params.run_log {
            return;
        }
        let line = format!("{} {} {} {} {}", self.job.now(), base.version, change.0, change.1, outcome);
        if let Err(e) = self.job.append_run_log(&self.params.worker_id, &line) {
            debug!("run log append failed: {e}");
        }
    }

    fn fleet_evaluations(&self, unreported: u64) -> Result<u64, OptimizerError> {
        let reported: u64 = self.retry(|| self.job.read_changes())?.iter().map(|c| c.evaluations).sum();
        Ok(reported + unreported)
    }

    fn stop_reached(
        &self,
        base: &BestState,
        unreported: u64,
        since_progress: u64,
        exhausted: bool,
    ) -> Result<Option<&'static str>, OptimizerError> {
        let stop = &self.params.stop;
        if let Some(limit) = stop.max_total_evaluations {
            if self.fleet_evaluations(unreported)? >= limit {
                return Ok(Some("evaluation budget spent"));
            }
        }
        if stop.target_performance.is_some_and(|t| base.performance >= t) {
            return Ok(Some("target performance reached"));
        }
        if stop.stagnation.is_some_and(|k| since_progress >= k) {
            return Ok(Some("stagnated"));
        }
        if stop.local_optimum && exhausted {
            return Ok(Some("local optimum"));
        }
        Ok(None)
    }
}

/// Runs proposals until the signal disappears, a stop condition fires, or
/// `cancel` is raised.
pub fn work_loop(
    job: &JobDirectory,
    objective: &dyn Objective,
    params: &LoopParams,
    cancel: &CancelToken,
) -> Result<LoopReport, OptimizerError> {
    let runner = Runner { job, params, cancel };
    let levels = objective.level_count();
    let neighborhood = objective.length() as u64 * u64::from(levels.saturating_sub(1));
    let mut rng = proposal_rng(params.seed);
    let mut report = LoopReport::default();
    let mut unreported = 0u64;
    let mut since_progress = 0u64;
    let mut seen_version = None;
    let mut tried = BTreeSet::new();

    loop {
        if cancel.is_cancelled() {
            report.exit = LoopExit::Cancelled;
            return Ok(report);
        }
        if !runner.retry(|| job.signal_exists())? {
            report.exit = LoopExit::SignalAbsent;
            return Ok(report);
        }

        // first read
        let base = runner.retry(|| job.read_best())?;
        if seen_version != Some(base.version) {
            seen_version = Some(base.version);
            since_progress = 0;
            tried.clear();
        }
        let exhausted = tried.len() as u64 >= neighborhood;
        if let Some(why) = runner.stop_reached(&base, unreported, since_progress, exhausted)? {
            info!("{}: {why}; clearing signal", params.worker_id);
            runner.retry(|| job.signal_clear())?;
            report.exit = LoopExit::StopCondition;
            return Ok(report);
        }

        let change = propose(&base, levels, &mut rng);
        let candidate = base.config.with_change(change.0, change.1);
        let measured = objective.evaluate_with_checkpoints(&candidate, &mut |fraction| {
            !cancel.is_cancelled() && check_stop_during_evaluation(job, fraction)
        })?;
        let Some(measured) = measured else {
            report.abandoned += 1;
            runner.log(&base, change, "abandoned");
            continue;
        };
        if cancel.is_cancelled() {
            report.abandoned += 1;
            runner.log(&base, change, "abandoned");
            report.exit = LoopExit::Cancelled;
            return Ok(report);
        }
        report.evaluations += 1;
        unreported += 1;
        since_progress += 1;

        let proposal = ChangeProposal::from_measurement(base.clone(), change, measured, &params.worker_id);
        // second read happens inside merge
        let outcome = runner.retry(|| merge(job, &proposal, params.mode, &params.merge, unreported))?;
        report.record(outcome);
        match outcome {
            MergeOutcome::Committed { .. } => unreported = 0,
            MergeOutcome::RejectedNotBetter => {
                tried.insert(change);
            }
            _ => {}
        }
        let label = match outcome {
            MergeOutcome::Committed { new_version } => format!("committed:{new_version}"),
            other => other.label().to_string(),
        };
        runner.log(&base, change, &label);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::objective::{ConfigVector, ObjectiveError, PhaseMaskObjective};
    use crate::optimizer::initialize;
    use crate::storage::MemStorage;
    use std::sync::Arc;

    fn job_with(obj: &dyn Objective, signal: bool) -> JobDirectory {
        let clock = VirtualClock::new(0.0);
        let job = JobDirectory::in_memory(MemStorage::default(), Arc::new(clock), "t");
        initialize(&job, ConfigVector::zeros(obj.length()), obj, "m", false).unwrap();
        if signal {
            job.signal_set().unwrap();
        }
        job
    }

    #[test]
    fn absent_signal_returns_immediately() {
        let obj = PhaseMaskObjective::new(8, 2, 1).unwrap();
        let job = job_with(&obj, false);
        let params = LoopParams::new("w", OptimizerMode::ReplaceIfBetter, StopCondition::max_evaluations(10), 1);
        let report = work_loop(&job, &obj, &params, &CancelToken::new()).unwrap();
        assert_eq!(report, LoopReport::default());
    }

    #[test]
    fn single_evaluation_budget() {
        let obj = PhaseMaskObjective::new(8, 2, 1).unwrap();
        let job = job_with(&obj, true);
        let params = LoopParams::new("w", OptimizerMode::ReplaceIfBetter, StopCondition::max_evaluations(1), 1);
        let report = work_loop(&job, &obj, &params, &CancelToken::new()).unwrap();
        assert_eq!(report.evaluations, 1);
        assert_eq!(report.exit, LoopExit::StopCondition);
        assert!(!job.signal_exists().unwrap());
    }

    #[test]
    fn budget_counts_reported_evaluations() {
        let obj = PhaseMaskObjective::new(8, 2, 1).unwrap();
        let job = job_with(&obj, true);
        let params = LoopParams::new("w", OptimizerMode::ReplaceIfBetter, StopCondition::max_evaluations(25), 3);
        let report = work_loop(&job, &obj, &params, &CancelToken::new()).unwrap();
        assert_eq!(report.evaluations, 25);
        let changes = job.read_changes().unwrap();
        assert_eq!(changes.len() as u64, report.commits);
        assert_eq!(job.read_best().unwrap().version, report.commits);
    }

    #[test]
    fn target_performance_stops_the_fleet() {
        let obj = PhaseMaskObjective::new(2, 2, 1).unwrap();
        let job = job_with(&obj, true);
        let stop = StopCondition { target_performance: Some(0.99), ..StopCondition::default() };
        let report =
            work_loop(&job, &obj, &LoopParams::new("w", OptimizerMode::ChangeMerge, stop, 0), &CancelToken::new())
                .unwrap();
        assert_eq!(report.exit, LoopExit::StopCondition);
        assert!(job.read_best().unwrap().performance >= 0.99);
    }

    /// Cancels from inside the evaluation, after the work is done but
    /// before the merge.
    struct CancelDuring<'a>(PhaseMaskObjective, &'a CancelToken, std::sync::atomic::AtomicBool);

    impl Objective for CancelDuring<'_> {
        fn evaluate(&self, c: &ConfigVector) -> Result<f64, ObjectiveError> {
            if self.2.load(std::sync::atomic::Ordering::SeqCst) {
                self.1.cancel();
            }
            self.0.evaluate(c)
        }
        fn level_count(&self) -> u32 {
            self.0.level_count()
        }
        fn length(&self) -> usize {
            self.0.length()
        }
        fn evaluate_with_checkpoints(
            &self,
            c: &ConfigVector,
            _checkpoint: &mut dyn FnMut(f64) -> bool,
        ) -> Result<Option<f64>, ObjectiveError> {
            self.evaluate(c).map(Some)
        }
    }

    #[test]
    fn cancellation_between_evaluate_and_merge_discards_result() {
        let cancel = CancelToken::new();
        let obj = CancelDuring(PhaseMaskObjective::new(2, 2, 1).unwrap(), &cancel, Default::default());
        let job = job_with(&obj, true);
        obj.2.store(true, std::sync::atomic::Ordering::SeqCst);
        let params = LoopParams::new("w", OptimizerMode::ReplaceIfBetter, StopCondition::manual_only(), 0);
        let report = work_loop(&job, &obj, &params, &cancel).unwrap();
        assert_eq!(report.exit, LoopExit::Cancelled);
        assert_eq!(report.evaluations, 0);
        assert_eq!(report.abandoned, 1);
        assert_eq!(job.read_best().unwrap().version, 0);
    }

    #[test]
    fn missing_best_state_is_a_distinct_error() {
        let clock = VirtualClock::new(0.0);
        let job = JobDirectory::in_memory(MemStorage::default(), Arc::new(clock), "t");
        job.signal_set().unwrap();
        let obj = PhaseMaskObjective::new(4, 2, 0).unwrap();
        let params = LoopParams::new("w", OptimizerMode::ReplaceIfBetter, StopCondition::manual_only(), 0);
        let err = work_loop(&job, &obj, &params, &CancelToken::new()).unwrap_err();
        assert!(err.is_not_initialized());
    }

    #[test]
    fn checkpoint_stops_on_cleared_or_unreachable_share() {
        let store = MemStorage::default();
        let job = JobDirectory::in_memory(store.clone(), Arc::new(VirtualClock::new(0.0)), "t");
        job.signal_set().unwrap();
        assert!(check_stop_during_evaluation(&job, 0.1));
        job.signal_clear().unwrap();
        assert!(!check_stop_during_evaluation(&job, 0.2));
        job.signal_set().unwrap();
        store.set_reachable(false);
        assert!(!check_stop_during_evaluation(&job, 0.3));
    }

    #[test]
    fn local_optimum_stop_is_verified_by_enumeration() {
        let obj = PhaseMaskObjective::new(6, 3, 2).unwrap();
        let job = job_with(&obj, true);
        let stop = StopCondition { local_optimum: true, ..StopCondition::default() };
        let report = work_loop(&job, &obj, &LoopParams::new("w", OptimizerMode::ReplaceIfBetter, stop, 5),
            &CancelToken::new()).unwrap();
        assert_eq!(report.exit, LoopExit::StopCondition);
        let best = job.read_best().unwrap();
        for (i, v) in crate::objective::neighbors(3, &best.config) {
            assert!(obj.evaluate(&best.config.with_change(i, v)).unwrap() <= best.performance);
        }
    }

    #[test]
    fn run_log_has_one_line_per_proposal() {
        let obj = PhaseMaskObjective::new(8, 2, 1).unwrap();
        let job = job_with(&obj, true);
        let mut params = LoopParams::new("w:1", OptimizerMode::ReplaceIfBetter, StopCondition::max_evaluations(12), 4);
        params.run_log = true;
        work_loop(&job, &obj, &params, &CancelToken::new()).unwrap();
        let logs = job.read_run_logs().unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].0, "run-w_1.log");
        assert_eq!(logs[0].1.lines().count(), 12);
    }
}

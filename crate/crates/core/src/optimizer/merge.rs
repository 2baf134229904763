use crate::coordination::{BestState, ChangeRecord, CommitResult, CoordError, JobDirectory};
use crate::objective::{ConfigVector, Objective, ObjectiveError};

use super::{OptimizerError, OptimizerMode};

/// What happened to one evaluated proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Committed { new_version: u64 },
    /// Not strictly better than the base it was evaluated against.
    RejectedNotBetter,
    /// Another commit changed the same element in the meantime.
    RejectedConflict,
    /// The base moved on and the proposal no longer wins, or the retry
    /// budget ran out.
    RejectedStale,
}

impl MergeOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            MergeOutcome::Committed { .. } => "committed",
            MergeOutcome::RejectedNotBetter => "not_better",
            MergeOutcome::RejectedConflict => "conflict",
            MergeOutcome::RejectedStale => "stale",
        }
    }

    /// Wasted because it was computed against an outdated base.
    pub fn is_outdated(&self) -> bool {
        matches!(self, MergeOutcome::RejectedConflict | MergeOutcome::RejectedStale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOptions {
    /// Re-read the global best before publishing. Turning this off
    /// reproduces the lost-update failure and exists only for regression
    /// tests.
    pub double_read: bool,
    /// Compare-and-swap attempts after the first before giving up as stale.
    pub max_retries: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { double_read: true, max_retries: 8 }
    }
}

/// A single-element change measured against the base it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProposal {
    pub base: BestState,
    pub index: usize,
    pub new_value: u32,
    pub measured_performance: f64,
    /// `measured_performance - base.performance`.
    pub delta: f64,
    pub proposer: String,
}

impl ChangeProposal {
    pub fn base_version(&self) -> u64 {
        self.base.version
    }

    pub fn candidate(&self) -> ConfigVector {
        self.base.config.with_change(self.index, self.new_value)
    }

    /// Built from an already measured value (used when the evaluation ran
    /// elsewhere, e.g. through checkpoints).
    pub fn from_measurement(
        base: BestState,
        change: (usize, u32),
        measured_performance: f64,
        proposer: &str,
    ) -> Self {
        let delta = measured_performance - base.performance;
        Self {
            base,
            index: change.0,
            new_value: change.1,
            measured_performance,
            delta,
            proposer: proposer.to_string(),
        }
    }
}

/// Evaluates `base + change`.
pub fn evaluate_candidate(
    base: &BestState,
    change: (usize, u32),
    objective: &dyn Objective,
    proposer: &str,
) -> Result<ChangeProposal, ObjectiveError> {
    let (index, new_value) = change;
    if index >= base.config.len() {
        return Err(ObjectiveError::Length { expected: base.config.len(), got: index + 1 });
    }
    let measured = objective.evaluate(&base.config.with_change(index, new_value))?;
    Ok(ChangeProposal::from_measurement(base.clone(), change, measured, proposer))
}

/// Publishes an evaluated proposal. `evaluations` is the proposer's
/// unreported evaluation count, written to `changes.log` on commit.
pub fn merge(
    job: &JobDirectory,
    proposal: &ChangeProposal,
    mode: OptimizerMode,
    options: &MergeOptions,
    evaluations: u64,
) -> Result<MergeOutcome, CoordError> {
    let base = &proposal.base;
    if !(proposal.measured_performance > base.performance) {
        return Ok(MergeOutcome::RejectedNotBetter);
    }
    let mut change = ChangeRecord {
        version: 0,
        index: proposal.index,
        new_value: proposal.new_value,
        delta: proposal.delta,
        proposer: proposal.proposer.clone(),
        evaluations,
    };

    if !options.double_read {
        let written = job.overwrite(&proposal.proposer, |_| {
            let state = BestState {
                version: 0,
                config: proposal.candidate(),
                performance: proposal.measured_performance,
                estimated: false,
                updated_by: proposal.proposer.clone(),
                updated_at: job.now(),
            };
            (state, Some(change.clone()))
        })?;
        return Ok(MergeOutcome::Committed { new_version: written.version });
    }

    let mut latest = job.read_best()?;
    for _ in 0..=options.max_retries {
        let next = if latest.version == base.version {
            BestState {
                version: latest.version + 1,
                config: proposal.candidate(),
                performance: proposal.measured_performance,
                estimated: false,
                updated_by: proposal.proposer.clone(),
                updated_at: job.now(),
            }
        } else if latest.config.get(proposal.index) != base.config.get(proposal.index) {
            return Ok(MergeOutcome::RejectedConflict);
        } else {
            match mode {
                OptimizerMode::ChangeMerge => BestState {
                    version: latest.version + 1,
                    config: latest.config.with_change(proposal.index, proposal.new_value),
                    performance: latest.performance + proposal.delta,
                    estimated: true,
                    updated_by: proposal.proposer.clone(),
                    updated_at: job.now(),
                },
                OptimizerMode::ReplaceIfBetter => {
                    if !(proposal.measured_performance > latest.performance) {
                        return Ok(MergeOutcome::RejectedStale);
                    }
                    BestState {
                        version: latest.version + 1,
                        config: proposal.candidate(),
                        performance: proposal.measured_performance,
                        estimated: false,
                        updated_by: proposal.proposer.clone(),
                        updated_at: job.now(),
                    }
                }
            }
        };
        change.version = next.version;
        match job.commit_update_logged(latest.version, &next, Some(&change))? {
            CommitResult::Committed => return Ok(MergeOutcome::Committed { new_version: next.version }),
            CommitResult::VersionConflict { current } => latest = current,
        }
    }
    Ok(MergeOutcome::RejectedStale)
}

/// Evaluate, re-read, and publish in one call.
pub fn evaluate_and_merge(
    job: &JobDirectory,
    base: &BestState,
    change: (usize, u32),
    objective: &dyn Objective,
    mode: OptimizerMode,
    proposer: &str,
) -> Result<MergeOutcome, OptimizerError> {
    let proposal = evaluate_candidate(base, change, objective, proposer)?;
    Ok(merge(job, &proposal, mode, &MergeOptions::default(), 1)?)
}

/// Recorded versus re-measured performance of a best-state record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateAudit {
    pub recorded: f64,
    pub actual: f64,
    pub estimated: bool,
}

impl EstimateAudit {
    /// `|recorded - actual|`; exactly zero for measured records.
    pub fn drift(&self) -> f64 {
        (self.recorded - self.actual).abs()
    }
}

pub fn audit_estimate(state: &BestState, objective: &dyn Objective) -> Result<EstimateAudit, ObjectiveError> {
    Ok(EstimateAudit {
        recorded: state.performance,
        actual: objective.evaluate(&state.config)?,
        estimated: state.estimated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::objective::PhaseMaskObjective;
    use crate::optimizer::initialize;
    use crate::storage::MemStorage;
    use std::sync::Arc;

    /// Additive objective with one pairwise interaction, so the
    /// independence estimate can be checked against a known truth.
    struct Toy;

    impl Objective for Toy {
        fn evaluate(&self, c: &ConfigVector) -> Result<f64, ObjectiveError> {
            let l = c.levels();
            let weights = [0.05, 0.01, 0.03, 0.02];
            let mut v: f64 = l.iter().zip(weights).map(|(&x, w)| f64::from(x) * w).sum();
            if l[0] == 1 && l[3] == 1 {
                v -= 0.004;
            }
            Ok(v)
        }
        fn level_count(&self) -> u32 {
            2
        }
        fn length(&self) -> usize {
            4
        }
    }

    fn setup() -> JobDirectory {
        let clock = VirtualClock::new(0.0);
        let job = JobDirectory::in_memory(MemStorage::default(), Arc::new(clock), "t");
        initialize(&job, ConfigVector::zeros(4), &Toy, "m", false).unwrap();
        job
    }

    #[test]
    fn serial_improvement_commits_exactly() {
        let job = setup();
        let base = job.read_best().unwrap();
        let out = evaluate_and_merge(&job, &base, (2, 1), &Toy, OptimizerMode::ChangeMerge, "a").unwrap();
        assert_eq!(out, MergeOutcome::Committed { new_version: 1 });
        let now = job.read_best().unwrap();
        assert_eq!(now.performance, Toy.evaluate(&now.config).unwrap());
        assert!(!now.estimated);
    }

    #[test]
    fn non_improving_change_is_rejected() {
        let job = setup();
        let base = job.read_best().unwrap();
        let p = ChangeProposal::from_measurement(base.clone(), (1, 1), base.performance, "a");
        assert_eq!(merge(&job, &p, OptimizerMode::ReplaceIfBetter, &MergeOptions::default(), 1).unwrap(),
            MergeOutcome::RejectedNotBetter);
        let p = ChangeProposal::from_measurement(base.clone(), (1, 1), base.performance - 0.1, "a");
        assert_eq!(merge(&job, &p, OptimizerMode::ChangeMerge, &MergeOptions::default(), 1).unwrap(),
            MergeOutcome::RejectedNotBetter);
        assert_eq!(job.read_best().unwrap().version, 0);
    }

    #[test]
    fn same_index_conflict() {
        for mode in [OptimizerMode::ReplaceIfBetter, OptimizerMode::ChangeMerge] {
            let job = setup();
            let base = job.read_best().unwrap();
            let b = evaluate_candidate(&base, (2, 1), &Toy, "b").unwrap();
            evaluate_and_merge(&job, &base, (2, 1), &Toy, mode, "a").unwrap();
            assert_eq!(merge(&job, &b, mode, &MergeOptions::default(), 1).unwrap(), MergeOutcome::RejectedConflict);
            let now = job.read_best().unwrap();
            assert_eq!(now.version, 1);
            assert_eq!(now.updated_by, "a");
        }
    }

    #[test]
    fn change_merge_combines_independent_changes() {
        let job = setup();
        let base = job.read_best().unwrap();
        let b = evaluate_candidate(&base, (3, 1), &Toy, "b").unwrap();
        assert!((b.delta - 0.02).abs() < 1e-15);
        evaluate_and_merge(&job, &base, (0, 1), &Toy, OptimizerMode::ChangeMerge, "a").unwrap();
        let a_perf = job.read_best().unwrap().performance;
        assert_eq!(merge(&job, &b, OptimizerMode::ChangeMerge, &MergeOptions::default(), 1).unwrap(),
            MergeOutcome::Committed { new_version: 2 });
        let merged = job.read_best().unwrap();
        assert_eq!(merged.config.levels(), &[1, 0, 0, 1]);
        assert!(merged.estimated);
        assert_eq!(merged.performance, a_perf + b.delta);
        let audit = audit_estimate(&merged, &Toy).unwrap();
        assert!((audit.actual - 0.066).abs() < 1e-12);
        assert!((audit.drift() - 0.004).abs() < 1e-12);
    }

    #[test]
    fn replace_if_better_competes_on_raw_performance() {
        let job = setup();
        let base = job.read_best().unwrap();
        // b improves by 0.02, a by 0.05: b loses against the newer record
        let b = evaluate_candidate(&base, (3, 1), &Toy, "b").unwrap();
        evaluate_and_merge(&job, &base, (0, 1), &Toy, OptimizerMode::ReplaceIfBetter, "a").unwrap();
        assert_eq!(merge(&job, &b, OptimizerMode::ReplaceIfBetter, &MergeOptions::default(), 1).unwrap(),
            MergeOutcome::RejectedStale);

        // now b (+0.03 on index 2) beats a record that moved by only +0.01
        let job = setup();
        let base = job.read_best().unwrap();
        let b = evaluate_candidate(&base, (2, 1), &Toy, "b").unwrap();
        evaluate_and_merge(&job, &base, (1, 1), &Toy, OptimizerMode::ReplaceIfBetter, "a").unwrap();
        assert_eq!(merge(&job, &b, OptimizerMode::ReplaceIfBetter, &MergeOptions::default(), 1).unwrap(),
            MergeOutcome::Committed { new_version: 2 });
        let now = job.read_best().unwrap();
        assert_eq!(now.config.levels(), &[0, 0, 1, 0]);
        assert!(!now.estimated);
    }

    #[test]
    fn blind_write_loses_the_earlier_commit() {
        let job = setup();
        let base = job.read_best().unwrap();
        let b = evaluate_candidate(&base, (3, 1), &Toy, "b").unwrap();
        evaluate_and_merge(&job, &base, (0, 1), &Toy, OptimizerMode::ChangeMerge, "a").unwrap();
        let blind = MergeOptions { double_read: false, ..MergeOptions::default() };
        assert_eq!(merge(&job, &b, OptimizerMode::ChangeMerge, &blind, 1).unwrap(),
            MergeOutcome::Committed { new_version: 2 });
        let now = job.read_best().unwrap();
        assert_eq!(now.config.levels(), &[0, 0, 0, 1]);
        assert!(now.performance < 0.05);
    }

    #[test]
    fn phase_mask_objective_plugs_in() {
        let clock = VirtualClock::new(0.0);
        let job = JobDirectory::in_memory(MemStorage::default(), Arc::new(clock), "t");
        let obj = PhaseMaskObjective::new(2, 2, 1).unwrap();
        initialize(&job, ConfigVector::zeros(2), &obj, "m", false).unwrap();
        let base = job.read_best().unwrap();
        let out = evaluate_and_merge(&job, &base, (1, 1), &obj, OptimizerMode::ReplaceIfBetter, "w").unwrap();
        assert_eq!(out, MergeOutcome::Committed { new_version: 1 });
        assert!((job.read_best().unwrap().performance - 1.0).abs() < 1e-15);
    }
}

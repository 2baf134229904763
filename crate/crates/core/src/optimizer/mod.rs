//! Distributed single-change hill climbing over a shared best state.
//!
//! Each worker reads the global best, proposes one random element change,
//! evaluates it, then reads the global best a second time before deciding
//! whether and how to publish. The second read is what keeps a worker from
//! clobbering improvements other workers committed while it was evaluating.

mod merge;
mod work_loop;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::coordination::{BestState, CoordError, JobDirectory};
use crate::objective::{ConfigVector, Objective, ObjectiveError};

pub use merge::{
    audit_estimate, evaluate_and_merge, evaluate_candidate, merge, ChangeProposal, EstimateAudit, MergeOptions,
    MergeOutcome,
};
pub use work_loop::{check_stop_during_evaluation, work_loop, LoopExit, LoopParams, LoopReport};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl OptimizerError {
    pub fn is_not_initialized(&self) -> bool {
        matches!(self, OptimizerError::Coord(CoordError::NotInitialized { .. }))
    }
}

/// How a beneficial change is published when other commits landed while it
/// was being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerMode {
    /// Publish `base + change` outright if it beats the latest record.
    /// Intervening improvements on other elements are dropped.
    #[default]
    ReplaceIfBetter,
    /// Re-apply the change on top of the latest record and estimate its
    /// performance as `latest + delta`.
    ChangeMerge,
}

impl fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerMode::ReplaceIfBetter => "replace_if_better",
            OptimizerMode::ChangeMerge => "change_merge",
        })
    }
}

impl FromStr for OptimizerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replace_if_better" | "replace" => Ok(OptimizerMode::ReplaceIfBetter),
            "change_merge" | "merge" => Ok(OptimizerMode::ChangeMerge),
            other => Err(format!("unknown mode {other:?} (expected replace_if_better or change_merge)")),
        }
    }
}

/// When to end a run. Any condition that is set and satisfied ends it; with
/// nothing set the run only ends when the signal is cleared.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StopCondition {
    /// Fleet-wide evaluations, as reported through `changes.log` plus this
    /// worker's unreported count. Approximate: other workers' evaluations
    /// since their last commit are invisible.
    pub max_total_evaluations: Option<u64>,
    pub target_performance: Option<f64>,
    /// Proposals without the global version moving.
    pub stagnation: Option<u64>,
    /// Every neighbor of the current best was evaluated and none improved.
    pub local_optimum: bool,
}

impl StopCondition {
    pub fn manual_only() -> Self {
        Self::default()
    }

    pub fn max_evaluations(limit: u64) -> Self {
        Self { max_total_evaluations: Some(limit), ..Self::default() }
    }

    pub fn is_manual_only(&self) -> bool {
        *self == Self::default()
    }
}

/// Evaluates `initial_config` and writes it as version 0. Refuses to run
/// twice unless `force` is set.
pub fn initialize(
    job: &JobDirectory,
    initial_config: ConfigVector,
    objective: &dyn Objective,
    updated_by: &str,
    force: bool,
) -> Result<BestState, OptimizerError> {
    if !force && job.is_initialized()? {
        return Err(CoordError::AlreadyInitialized { path: job.location() }.into());
    }
    initial_config.validate(objective.length(), objective.level_count())?;
    let performance = objective.evaluate(&initial_config)?;
    let state = BestState {
        version: 0,
        config: initial_config,
        performance,
        estimated: false,
        updated_by: updated_by.to_string(),
        updated_at: job.now(),
    };
    job.write_initial(&state, force)?;
    Ok(state)
}

/// Uniform random element and a uniform new level different from the
/// current one.
pub fn propose<R: Rng + ?Sized>(base: &BestState, levels: u32, rng: &mut R) -> (usize, u32) {
    assert!(!base.config.is_empty(), "cannot propose a change to an empty config");
    assert!(levels >= 2, "a single-level objective admits no changes");
    let index = rng.gen_range(0..base.config.len());
    let current = base.config.levels()[index];
    let mut value = rng.gen_range(0..levels - 1);
    if value >= current {
        value += 1;
    }
    (index, value)
}

/// Deterministic per-worker stream.
pub fn proposal_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random starting configuration.
pub fn random_config(n: usize, levels: u32, seed: u64) -> ConfigVector {
    // separate stream from the proposals of a worker seeded with `seed`
    let mut rng = proposal_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    ConfigVector::new((0..n).map(|_| rng.gen_range(0..levels)).collect())
}

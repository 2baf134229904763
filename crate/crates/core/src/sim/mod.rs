//! Deterministic discrete-event simulation of a worker fleet.
//!
//! Logical workers share one virtual clock and drive the real optimizer and
//! coordination code against a job directory (in memory by default). A
//! single coordination server serves one operation at a time, each costing
//! `t_io / speed_factor` for the issuing worker. Events at equal times are
//! ordered by worker id, then event kind.

mod engine;
mod scenario;

use std::path::PathBuf;

use thiserror::Error;

use crate::coordination::{CoordError, ObjectiveSpec};
use crate::objective::{ConfigVector, ObjectiveError};
use crate::optimizer::{MergeOptions, OptimizerError, StopCondition};
use crate::worker::WorkerConfig;

pub use engine::{Category, CommitEntry, EvaluationRecord, SimOutcome, WorkerStats};
pub use scenario::{report_lines, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl From<OptimizerError> for SimError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::Coord(e) => SimError::Coord(e),
            OptimizerError::Objective(e) => SimError::Objective(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimWorker {
    pub id: String,
    /// Relative evaluation rate; an evaluation takes `t_eval / speed_factor`.
    pub speed_factor: f64,
    /// Idle intervals `[start, end)`; the user is at the machine otherwise.
    pub availability: Vec<(f64, f64)>,
    /// Scheduling settings. `worker_id` and `jobs` are filled in by the
    /// simulator.
    pub config: WorkerConfig,
}

impl SimWorker {
    /// Idle for the whole run.
    pub fn always(id: impl Into<String>, speed_factor: f64) -> Self {
        let id = id.into();
        Self {
            config: WorkerConfig::new(Vec::new(), id.clone()),
            id,
            speed_factor,
            availability: vec![(f64::NEG_INFINITY, f64::INFINITY)],
        }
    }

    pub fn with_availability(mut self, intervals: Vec<(f64, f64)>) -> Self {
        self.availability = intervals;
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.speed_factor.is_finite() && self.speed_factor > 0.0) {
            return Err(SimError::Contract(format!("{}: speed_factor must be > 0", self.id)));
        }
        for w in self.availability.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(SimError::Contract(format!("{}: availability intervals overlap or are unordered", self.id)));
            }
        }
        if self.availability.iter().any(|&(s, e)| !(e > s)) {
            return Err(SimError::Contract(format!("{}: empty availability interval", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Virtual seconds for one evaluation at speed 1.
    pub t_eval: f64,
    /// Virtual seconds per coordination operation at speed 1.
    pub t_io: f64,
    pub seed: u64,
    pub horizon: f64,
    pub stop: StopCondition,
    /// The master clears the signal at this time.
    pub stop_at: Option<f64>,
    pub merge: MergeOptions,
    /// Signal checks per evaluation.
    pub checkpoints: u32,
}

impl SimConfig {
    pub fn new(t_eval: f64, t_io: f64, seed: u64, stop: StopCondition) -> Self {
        Self { t_eval, t_io, seed, horizon: 1e9, stop, stop_at: None, merge: MergeOptions::default(), checkpoints: 10 }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.t_eval > 0.0 && self.t_eval.is_finite()) {
            return Err(SimError::Contract("t_eval must be > 0".into()));
        }
        if !(self.t_io >= 0.0 && self.t_io.is_finite()) {
            return Err(SimError::Contract("t_io must be >= 0".into()));
        }
        if self.checkpoints == 0 {
            return Err(SimError::Contract("at least one checkpoint per evaluation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Memory,
    /// A real directory on disk, which must exist and be empty.
    Directory(PathBuf),
}

/// The job every simulated worker contributes to.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSetup {
    pub objective: ObjectiveSpec,
    pub initial: ConfigVector,
    pub backend: Backend,
}

impl JobSetup {
    pub fn in_memory(objective: ObjectiveSpec) -> Self {
        let initial = ConfigVector::zeros(objective.n);
        Self { objective, initial, backend: Backend::Memory }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    /// Time at which the stop condition fired (or the horizon).
    pub makespan: f64,
    pub evaluations_total: u64,
    pub commits: u64,
    pub wasted_duplicate: u64,
    pub wasted_outdated: u64,
    pub rejected_not_better: u64,
    /// Evaluations cut short by a kill or a cleared signal; not part of
    /// `evaluations_total`.
    pub abandoned: u64,
    pub speedup: f64,
    pub ideal_speedup: f64,
    pub efficiency: f64,
    pub incomplete: bool,
    pub reference: String,
    pub outcome: SimOutcome,
}

/// Σ speed / reference speed.
pub fn ideal_speedup(fleet: &[SimWorker], reference: &str) -> Result<f64, SimError> {
    let r = fleet
        .iter()
        .find(|w| w.id == reference)
        .ok_or_else(|| SimError::Contract(format!("reference worker {reference:?} is not in the fleet")))?;
    Ok(fleet.iter().map(|w| w.speed_factor).sum::<f64>() / r.speed_factor)
}

/// The fastest worker; the first one listed on ties.
pub fn fastest(fleet: &[SimWorker]) -> Option<&SimWorker> {
    fleet.iter().fold(None, |best: Option<&SimWorker>, w| match best {
        Some(b) if b.speed_factor >= w.speed_factor => Some(b),
        _ => Some(w),
    })
}

/// Runs the fleet once, without any speedup bookkeeping.
pub fn simulate(
    fleet: &[SimWorker],
    setup: &JobSetup,
    sim: &SimConfig,
    kills: &[(String, f64)],
) -> Result<SimOutcome, SimError> {
    if fleet.is_empty() {
        return Err(SimError::Contract("fleet is empty".into()));
    }
    sim.validate()?;
    for w in fleet {
        w.validate()?;
    }
    for (id, _) in kills {
        if !fleet.iter().any(|w| &w.id == id) {
            return Err(SimError::Contract(format!("kill for unknown worker {id:?}")));
        }
    }
    engine::run(fleet, setup, sim, kills)
}

/// Runs the fleet, then the fastest worker alone and always idle, and
/// reports the speedup of the first over the second.
pub fn run_sim(fleet: &[SimWorker], setup: &JobSetup, sim: &SimConfig) -> Result<SpeedupReport, SimError> {
    run_sim_with_kills(fleet, setup, sim, &[])
}

fn run_sim_with_kills(
    fleet: &[SimWorker],
    setup: &JobSetup,
    sim: &SimConfig,
    kills: &[(String, f64)],
) -> Result<SpeedupReport, SimError> {
    let outcome = simulate(fleet, setup, sim, kills)?;
    let reference = fastest(fleet).expect("non-empty fleet");
    let solo = SimWorker { availability: vec![(f64::NEG_INFINITY, f64::INFINITY)], ..reference.clone() };
    let baseline = if fleet.len() == 1 && kills.is_empty() && fleet[0].availability == solo.availability {
        outcome.clone()
    } else {
        let solo_setup = match &setup.backend {
            Backend::Memory => setup.clone(),
            Backend::Directory(_) => JobSetup { backend: Backend::Memory, ..setup.clone() },
        };
        simulate(std::slice::from_ref(&solo), &solo_setup, sim, &[])?
    };
    let ideal = ideal_speedup(fleet, &reference.id)?;
    let speedup = baseline.makespan / outcome.makespan;
    Ok(SpeedupReport {
        makespan: outcome.makespan,
        evaluations_total: outcome.evaluations,
        commits: outcome.commits,
        wasted_duplicate: outcome.wasted_duplicate,
        wasted_outdated: outcome.wasted_outdated,
        rejected_not_better: outcome.rejected_not_better,
        abandoned: outcome.abandoned,
        speedup,
        ideal_speedup: ideal,
        efficiency: speedup / ideal,
        incomplete: outcome.incomplete || baseline.incomplete,
        reference: reference.id.clone(),
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: usize,
    pub report: SpeedupReport,
}

/// Homogeneous fleets of 1..=max_p always-idle workers at speed 1.
pub fn homogeneous_fleet(p: usize) -> Vec<SimWorker> {
    (1..=p).map(|i| SimWorker::always(format!("w{i:03}"), 1.0)).collect()
}

pub fn sweep_fleet_size(max_p: usize, setup: &JobSetup, sim: &SimConfig) -> Result<Vec<SweepRow>, SimError> {
    if max_p == 0 {
        return Err(SimError::Contract("max_p must be >= 1".into()));
    }
    (1..=max_p).map(|p| Ok(SweepRow { p, report: run_sim(&homogeneous_fleet(p), setup, sim)? })).collect()
}

/// `p,speedup,efficiency,wasted_duplicate,wasted_outdated` rows with a header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,speedup,efficiency,wasted_duplicate,wasted_outdated\n");
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            row.p, r.speedup, r.efficiency, r.wasted_duplicate, r.wasted_outdated
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterruptionReport {
    pub report: SpeedupReport,
    /// The same fleet and seed without kills.
    pub undisturbed: SpeedupReport,
    /// Versions in `changes.log` run 1, 2, 3, ... without gaps.
    pub versions_gapless: bool,
    /// Commits whose evaluation had been cut off by a kill.
    pub commits_from_killed: usize,
    /// `(worker, evaluation rate with kills, rate without)` for workers that
    /// were never killed. Rates are evaluations per second of running time.
    pub unkilled_rates: Vec<(String, f64, f64)>,
}

impl InterruptionReport {
    /// Largest relative change in evaluation rate among unkilled workers.
    pub fn max_rate_change(&self) -> f64 {
        self.unkilled_rates.iter().map(|(_, with, without)| ((with - without) / without).abs()).fold(0.0, f64::max)
    }
}

/// Injects user activity at the given times and compares with an
/// undisturbed run.
pub fn interruption_test(
    fleet: &[SimWorker],
    kills: &[(String, f64)],
    setup: &JobSetup,
    sim: &SimConfig,
) -> Result<InterruptionReport, SimError> {
    let report = run_sim_with_kills(fleet, setup, sim, kills)?;
    let undisturbed = run_sim(fleet, setup, sim)?;
    let versions_gapless = report.outcome.commit_log.iter().enumerate().all(|(i, c)| c.version == i as u64 + 1);
    let commits_from_killed =
        report.outcome.commit_log.iter().filter(|c| report.outcome.killed_evaluations.contains(&c.evaluation)).count();
    let unkilled_rates = fleet
        .iter()
        .filter(|w| !kills.iter().any(|(id, _)| id == &w.id))
        .filter_map(|w| {
            let with = report.outcome.workers.iter().find(|s| s.id == w.id)?;
            let without = undisturbed.outcome.workers.iter().find(|s| s.id == w.id)?;
            Some((w.id.clone(), with.evaluation_rate(), without.evaluation_rate()))
        })
        .collect();
    Ok(InterruptionReport { report, undisturbed, versions_gapless, commits_from_killed, unkilled_rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::MergeOutcome;
    use proptest::prelude::*;

    fn setup() -> JobSetup {
        JobSetup::in_memory(ObjectiveSpec { n: 16, levels: 4, target_order: 1, eval_delay_ms: 0 })
    }

    fn lab_fleet() -> Vec<SimWorker> {
        [0.4, 0.4, 0.4, 0.4, 0.5, 0.5, 0.5, 0.5, 1.0, 0.85]
            .iter()
            .enumerate()
            .map(|(i, &s)| SimWorker::always(format!("pc{i}"), s))
            .collect()
    }

    #[test]
    fn ideal_speedup_arithmetic() {
        assert_eq!(ideal_speedup(&homogeneous_fleet(10), "w001").unwrap(), 10.0);
        let pair = vec![SimWorker::always("a", 1.0), SimWorker::always("b", 0.5)];
        assert_eq!(ideal_speedup(&pair, "a").unwrap(), 1.5);
        assert!((ideal_speedup(&lab_fleet(), "pc8").unwrap() - 5.45).abs() < 1e-12);
        assert!(ideal_speedup(&pair, "c").is_err());
        assert_eq!(fastest(&lab_fleet()).unwrap().id, "pc8");
    }

    #[test]
    fn serial_makespan_matches_cycle_time() {
        // per proposal: signal check, read, 10 checkpoint checks, two merge ops
        let (t_eval, t_io, n) = (100.0, 0.5, 100u64);
        let sim = SimConfig::new(t_eval, t_io, 3, StopCondition::max_evaluations(n));
        let r = run_sim(&homogeneous_fleet(1), &setup(), &sim).unwrap();
        let expected = n as f64 * (t_eval + 14.0 * t_io);
        assert!((r.makespan - expected).abs() < 1e-6 * expected, "{} vs {expected}", r.makespan);
        assert_eq!(r.speedup, 1.0);
        assert_eq!(r.efficiency, 1.0);
        assert_eq!(r.evaluations_total, n);
    }

    #[test]
    fn late_availability_waits_for_idle_threshold() {
        let sim = SimConfig::new(100.0, 0.0, 3, StopCondition::max_evaluations(10));
        let worker = SimWorker::always("w", 1.0).with_availability(vec![(0.0, f64::INFINITY)]);
        let out = simulate(&[worker], &setup(), &sim, &[]).unwrap();
        assert_eq!(out.makespan, 3600.0 + 10.0 * 100.0);
    }

    #[test]
    fn same_seed_same_report() {
        let sim = SimConfig::new(60.0, 0.06, 9, StopCondition::max_evaluations(300));
        let a = run_sim(&lab_fleet(), &setup(), &sim).unwrap();
        let b = run_sim(&lab_fleet(), &setup(), &sim).unwrap();
        assert_eq!(a, b);
        let other = run_sim(&lab_fleet(), &setup(), &SimConfig { seed: 10, ..sim }).unwrap();
        assert_ne!(a.outcome.evaluations_log, other.outcome.evaluations_log);
    }

    #[test]
    fn waste_provenance() {
        let sim = SimConfig::new(60.0, 0.06, 4, StopCondition::max_evaluations(400));
        let out = simulate(&homogeneous_fleet(8), &setup(), &sim, &[]).unwrap();
        let log = &out.evaluations_log;
        for (i, e) in log.iter().enumerate() {
            let key = (e.base_version, e.index, e.new_value);
            let seen_before = log[..i].iter().any(|p| (p.base_version, p.index, p.new_value) == key);
            match e.category {
                Category::Duplicate => assert!(seen_before),
                Category::Outdated => assert!(e.outcome.is_outdated() && !seen_before),
                Category::NotBetter => assert_eq!(e.outcome, MergeOutcome::RejectedNotBetter),
                Category::Commit => assert!(matches!(e.outcome, MergeOutcome::Committed { .. })),
            }
        }
        assert!(out.wasted_outdated > 0 && out.wasted_duplicate > 0);
    }

    #[test]
    fn availability_windows_and_kills() {
        let sim = SimConfig::new(600.0, 0.6, 5, StopCondition::max_evaluations(200));
        let fleet = vec![
            SimWorker::always("a", 1.0),
            SimWorker::always("b", 1.0).with_availability(vec![(0.0, 20_000.0), (30_000.0, f64::INFINITY)]),
        ];
        let kills = vec![("a".to_string(), 7_000.0)];
        let out = simulate(&fleet, &setup(), &sim, &kills).unwrap();
        assert!(!out.incomplete);
        assert_eq!(out.workers[0].kills, 1);
        assert_eq!(out.workers[1].kills, 1);
        assert_eq!(out.killed_evaluations.len(), 2);
        assert!(out.commit_log.iter().all(|c| !out.killed_evaluations.contains(&c.evaluation)));
        assert!(out.commit_log.windows(2).all(|w| w[1].version == w[0].version + 1));
    }

    #[test]
    fn horizon_marks_incomplete() {
        let mut sim = SimConfig::new(600.0, 0.6, 5, StopCondition::max_evaluations(1_000));
        sim.horizon = 6_000.0;
        let r = run_sim(&homogeneous_fleet(2), &setup(), &sim).unwrap();
        assert!(r.incomplete);
        assert_eq!(r.makespan, 6_000.0);
    }

    #[test]
    fn contract_errors() {
        let sim = SimConfig::new(1.0, 0.0, 0, StopCondition::max_evaluations(1));
        assert!(simulate(&[], &setup(), &sim, &[]).is_err());
        assert!(simulate(&homogeneous_fleet(1), &setup(), &sim, &[("x".into(), 1.0)]).is_err());
        assert!(simulate(&homogeneous_fleet(1), &setup(), &SimConfig { t_eval: 0.0, ..sim.clone() }, &[]).is_err());
        assert!(simulate(&[SimWorker::always("a", 0.0)], &setup(), &sim, &[]).is_err());
        assert!(sweep_fleet_size(0, &setup(), &sim).is_err());
    }

    #[test]
    fn csv_has_one_row_per_fleet_size() {
        let sim = SimConfig::new(60.0, 0.06, 1, StopCondition::max_evaluations(50));
        let rows = sweep_fleet_size(3, &setup(), &sim).unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,1.000000,1.000000,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accounting_and_efficiency_bound(
            speeds in proptest::collection::vec(0.1f64..=1.0, 1..7),
            io_ratio in prop_oneof![Just(0.0), 0.0f64..0.01, 0.0f64..=1.0],
            budget in 10u64..150,
            seed in 0u64..1000,
        ) {
            let fleet: Vec<_> = speeds.iter().enumerate().map(|(i, &s)| SimWorker::always(format!("w{i}"), s)).collect();
            let sim = SimConfig::new(100.0, 100.0 * io_ratio, seed, StopCondition::max_evaluations(budget));
            let r = run_sim(&fleet, &setup(), &sim).unwrap();
            prop_assert_eq!(
                r.evaluations_total,
                r.commits + r.wasted_duplicate + r.wasted_outdated + r.rejected_not_better
            );
            // in-flight work that saw the signal before the stop still merges
            prop_assert!(r.evaluations_total >= budget);
            prop_assert!(r.evaluations_total < budget + fleet.len() as u64);
            prop_assert!(r.efficiency > 0.0);
            prop_assert!(r.efficiency <= 1.0 + 1e-9, "efficiency {}", r.efficiency);
        }
    }
}

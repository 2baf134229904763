use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use log::{info, warn};

use crate::clock::{spawn_on, CancelToken, Clock};
use crate::coordination::{checksum, JobDirectory};
use crate::optimizer::{work_loop, LoopParams, LoopReport, OptimizerError, OptimizerMode};

use super::{IdleProbe, WorkerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    OutsideWindow,
    NotIdle,
    AlreadyRunning,
    NoSignal,
    ShareError,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::OutsideWindow => "outside_window",
            SkipReason::NotIdle => "not_idle",
            SkipReason::AlreadyRunning => "already_running",
            SkipReason::NoSignal => "no_signal",
            SkipReason::ShareError => "share_error",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickDecision {
    /// Index into `WorkerConfig::jobs`.
    Start { job: usize },
    Skip { reason: SkipReason },
}

impl fmt::Display for TickDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TickDecision::Start { job } => write!(f, "start job={job}"),
            TickDecision::Skip { reason } => write!(f, "skip reason={reason}"),
        }
    }
}

/// Live `(worker, job)` loops inside one process.
#[derive(Debug, Clone, Default)]
pub struct InstanceRegistry {
    live: Arc<Mutex<BTreeSet<(String, String)>>>,
}

/// Held for as long as a loop runs; dropping it frees the slot.
#[derive(Debug)]
pub struct InstanceGuard {
    registry: InstanceRegistry,
    key: (String, String),
}

impl Drop for InstanceGuard {
    fn drop(&mut self) {
        self.registry.live.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.key);
    }
}

#[derive(Debug)]
pub enum GuardOutcome {
    Acquired(InstanceGuard),
    Busy,
}

impl GuardOutcome {
    pub fn is_acquired(&self) -> bool {
        matches!(self, GuardOutcome::Acquired(_))
    }
}

impl InstanceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self, worker_id: &str, job: &str) -> GuardOutcome {
        let key = (worker_id.to_string(), job.to_string());
        let mut live = self.live.lock().unwrap_or_else(|e| e.into_inner());
        if !live.insert(key.clone()) {
            return GuardOutcome::Busy;
        }
        GuardOutcome::Acquired(InstanceGuard { registry: self.clone(), key })
    }

    pub fn is_running(&self, worker_id: &str) -> bool {
        self.live.lock().unwrap_or_else(|e| e.into_inner()).iter().any(|(w, _)| w == worker_id)
    }
}

pub fn single_instance_guard(registry: &InstanceRegistry, worker_id: &str, job: &JobDirectory) -> GuardOutcome {
    registry.acquire(worker_id, &job.location())
}

/// One launch attempt. Checks, in order: the daily window, a loop already
/// running on this worker, the idle gate, then the jobs in list order.
pub fn scheduler_tick(
    config: &WorkerConfig,
    probe: &dyn IdleProbe,
    registry: &InstanceRegistry,
    now: f64,
    local_time_of_day: f64,
) -> TickDecision {
    let skip = |reason| TickDecision::Skip { reason };
    if !config.in_window(local_time_of_day) {
        return skip(SkipReason::OutsideWindow);
    }
    if registry.is_running(&config.worker_id) {
        return skip(SkipReason::AlreadyRunning);
    }
    if probe.idle_duration(now) < config.idle_threshold {
        return skip(SkipReason::NotIdle);
    }
    let mut share_error = false;
    for (i, job) in config.jobs.iter().enumerate() {
        match job.signal_exists() {
            Ok(true) => return TickDecision::Start { job: i },
            Ok(false) => {}
            Err(e) => {
                warn!("{}: {e}", job.location());
                share_error = true;
            }
        }
    }
    skip(if share_error { SkipReason::ShareError } else { SkipReason::NoSignal })
}

/// What a started loop needs besides the job itself.
#[derive(Debug, Clone)]
pub struct LaunchContext {
    pub worker_id: String,
    pub mode: OptimizerMode,
    pub seed: u64,
}

/// Runs one optimization loop for a job until it stops or is cancelled.
pub trait Launcher: Send + Sync {
    fn run(&self, job: &JobDirectory, ctx: &LaunchContext, cancel: &CancelToken) -> Result<LoopReport, OptimizerError>;
}

/// Reads the objective and stop condition from the job's manifest and
/// runs the optimizer loop, logging every proposal.
#[derive(Debug, Clone, Copy, Default)]
pub struct ManifestLauncher;

impl Launcher for ManifestLauncher {
    fn run(&self, job: &JobDirectory, ctx: &LaunchContext, cancel: &CancelToken) -> Result<LoopReport, OptimizerError> {
        let manifest = job.read_manifest()?;
        let objective = manifest.objective.build(job.clock().clone())?;
        let mut params = LoopParams::new(ctx.worker_id.clone(), ctx.mode, manifest.stop, ctx.seed);
        params.run_log = true;
        work_loop(job, objective.as_ref(), &params, cancel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DaemonEventKind {
    Tick(TickDecision),
    /// User activity while a loop ran; the loop was told to stop.
    Kill { job: usize },
    LoopEnded { job: usize, killed: bool, outcome: Result<LoopReport, String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaemonEvent {
    pub time: f64,
    pub kind: DaemonEventKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DaemonReport {
    pub ticks: u64,
    pub starts: u64,
    pub kills: u64,
    /// Loops that ended on their own rather than by a kill.
    pub completed_loops: u64,
    pub events: Vec<DaemonEvent>,
}

impl DaemonReport {
    pub fn decisions(&self) -> impl Iterator<Item = (f64, TickDecision)> + '_ {
        self.events.iter().filter_map(|e| match e.kind {
            DaemonEventKind::Tick(d) => Some((e.time, d)),
            _ => None,
        })
    }
}

struct Running {
    job: usize,
    cancel: CancelToken,
    killed: bool,
    outcome: Arc<Mutex<Option<Result<LoopReport, String>>>>,
    handle: JoinHandle<()>,
}

/// First instant at or after `now` on the poll grid anchored at `daily_start`.
fn first_tick(config: &WorkerConfig, now: f64, local_time_of_day: f64) -> f64 {
    let phase = (local_time_of_day - config.daily_start).rem_euclid(config.poll_interval);
    if phase < 1e-9 || config.poll_interval - phase < 1e-9 {
        now
    } else {
        now + config.poll_interval - phase
    }
}

/// Polls every `poll_interval`, starts a loop when `scheduler_tick` says so,
/// and cancels it as soon as the probe shows user activity. Runs until
/// `cancel` is raised, then stops any live loop and returns.
pub fn run_daemon(
    config: &WorkerConfig,
    probe: &dyn IdleProbe,
    clock: Arc<dyn Clock>,
    cancel: &CancelToken,
    launcher: Arc<dyn Launcher>,
) -> DaemonReport {
    let registry = InstanceRegistry::new();
    let mut report = DaemonReport::default();
    let mut running: Option<Running> = None;
    let mut last_sample: Option<(f64, f64)> = None;
    let mut next_tick = first_tick(config, clock.now(), clock.local_time_of_day());
    let seed_base = checksum(config.worker_id.as_bytes());

    loop {
        let now = clock.now();

        if running.as_ref().is_some_and(|r| r.outcome.lock().unwrap_or_else(|e| e.into_inner()).is_some()) {
            let r = running.take().unwrap();
            let _ = r.handle.join();
            let outcome = r.outcome.lock().unwrap_or_else(|e| e.into_inner()).take().unwrap();
            if let Err(e) = &outcome {
                warn!("{}: loop on job {} failed: {e}", config.worker_id, r.job);
            }
            if !r.killed {
                report.completed_loops += 1;
            }
            report.events.push(DaemonEvent {
                time: now,
                kind: DaemonEventKind::LoopEnded { job: r.job, killed: r.killed, outcome },
            });
        }

        if cancel.is_cancelled() {
            match &running {
                None => return report,
                Some(r) => r.cancel.cancel(),
            }
            clock.sleep(config.probe_granule);
            continue;
        }

        let idle = probe.idle_duration(now);
        if let (Some((t0, idle0)), Some(r)) = (last_sample, running.as_mut()) {
            if !r.killed && idle < idle0 + (now - t0) - 1e-6 {
                info!("{}: user activity, stopping job {}", config.worker_id, r.job);
                r.cancel.cancel();
                r.killed = true;
                report.kills += 1;
                report.events.push(DaemonEvent { time: now, kind: DaemonEventKind::Kill { job: r.job } });
            }
        }
        last_sample = Some((now, idle));

        if now + 1e-9 >= next_tick {
            next_tick += config.poll_interval;
            let decision = scheduler_tick(config, probe, &registry, now, clock.local_time_of_day());
            report.ticks += 1;
            report.events.push(DaemonEvent { time: now, kind: DaemonEventKind::Tick(decision) });
            match decision {
                TickDecision::Start { job } => {
                    let dir = config.jobs[job].clone();
                    let GuardOutcome::Acquired(guard) = single_instance_guard(&registry, &config.worker_id, &dir)
                    else {
                        unreachable!("tick reported no running instance");
                    };
                    info!("{}: starting job {} ({})", config.worker_id, job, dir.location());
                    report.starts += 1;
                    let ctx = LaunchContext {
                        worker_id: config.worker_id.clone(),
                        mode: config.mode,
                        seed: seed_base.wrapping_add(report.starts),
                    };
                    let token = CancelToken::new();
                    let outcome = Arc::new(Mutex::new(None));
                    let (slot, loop_token, launcher) = (outcome.clone(), token.clone(), launcher.clone());
                    let handle = spawn_on(&clock, move || {
                        let result = launcher.run(&dir, &ctx, &loop_token).map_err(|e| e.to_string());
                        drop(guard);
                        *slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
                    });
                    running = Some(Running { job, cancel: token, killed: false, outcome, handle });
                }
                TickDecision::Skip { reason: SkipReason::ShareError } => {
                    warn!("{}: job share unreachable, will retry at next poll", config.worker_id);
                }
                TickDecision::Skip { .. } => {}
            }
        }

        clock.sleep(config.probe_granule.min(next_tick - now).max(1e-6));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::coordination::{Manifest, ObjectiveSpec};
    use crate::objective::ConfigVector;
    use crate::optimizer::{initialize, StopCondition};
    use crate::storage::MemStorage;
    use crate::worker::ScriptedTrace;

    const H: f64 = 3600.0;

    fn job(clock: &VirtualClock, name: &str, eval_ms: u64) -> (JobDirectory, MemStorage) {
        let store = MemStorage::new(name);
        let job = JobDirectory::in_memory(store.clone(), Arc::new(clock.clone()), name);
        let objective = ObjectiveSpec { n: 16, levels: 4, target_order: 1, eval_delay_ms: eval_ms };
        job.write_manifest(&Manifest { job_id: name.into(), objective: objective.clone(), stop: StopCondition::manual_only() })
            .unwrap();
        let mask = crate::objective::PhaseMaskObjective::new(16, 4, 1).unwrap();
        initialize(&job, ConfigVector::zeros(16), &mask, "master", false).unwrap();
        (job, store)
    }

    #[test]
    fn tick_decisions() {
        let clock = VirtualClock::new(0.0);
        let (a, _) = job(&clock, "a", 0);
        let (b, _) = job(&clock, "b", 0);
        let config = WorkerConfig::new(vec![a.clone(), b.clone()], "w");
        let registry = InstanceRegistry::new();
        let idle_2h = ScriptedTrace::new().activity(0.0);
        let noon = 12.0 * H;

        assert_eq!(
            scheduler_tick(&config, &idle_2h, &registry, 2.0 * H, noon),
            TickDecision::Skip { reason: SkipReason::NoSignal }
        );
        b.signal_set().unwrap();
        assert_eq!(scheduler_tick(&config, &idle_2h, &registry, 2.0 * H, noon), TickDecision::Start { job: 1 });
        a.signal_set().unwrap();
        assert_eq!(scheduler_tick(&config, &idle_2h, &registry, 2.0 * H, noon), TickDecision::Start { job: 0 });
        assert_eq!(
            scheduler_tick(&config, &idle_2h, &registry, 600.0, noon),
            TickDecision::Skip { reason: SkipReason::NotIdle }
        );
        assert_eq!(
            scheduler_tick(&config, &idle_2h, &registry, 2.0 * H, 11.9 * H),
            TickDecision::Skip { reason: SkipReason::OutsideWindow }
        );
        let _guard = single_instance_guard(&registry, "w", &a);
        assert_eq!(
            scheduler_tick(&config, &idle_2h, &registry, 2.0 * H, noon),
            TickDecision::Skip { reason: SkipReason::AlreadyRunning }
        );
    }

    #[test]
    fn unreachable_share_is_a_skip() {
        let clock = VirtualClock::new(0.0);
        let (a, store) = job(&clock, "a", 0);
        store.set_reachable(false);
        let config = WorkerConfig::new(vec![a], "w");
        assert_eq!(
            scheduler_tick(&config, &ScriptedTrace::new(), &InstanceRegistry::new(), 0.0, 12.0 * H),
            TickDecision::Skip { reason: SkipReason::ShareError }
        );
    }

    #[test]
    fn guard_scope() {
        let registry = InstanceRegistry::new();
        let first = registry.acquire("w", "job1");
        assert!(first.is_acquired());
        assert!(!registry.acquire("w", "job1").is_acquired());
        assert!(registry.acquire("w", "job2").is_acquired());
        drop(first);
        assert!(registry.acquire("w", "job1").is_acquired());
    }

    #[test]
    fn first_tick_is_on_the_grid() {
        let c = WorkerConfig::new(vec![], "w");
        assert_eq!(first_tick(&c, 100.0, 12.0 * H), 100.0);
        assert_eq!(first_tick(&c, 100.0, 12.0 * H + 1.0), 699.0);
        assert_eq!(first_tick(&c, 0.0, 8.0 * H + 590.0), 10.0);
    }

    #[test]
    fn daemon_without_signal_only_ticks() {
        let clock = VirtualClock::new(0.0);
        let (a, _) = job(&clock, "a", 0);
        let config = WorkerConfig::new(vec![a], "w");
        let cancel = CancelToken::new();
        let c = cancel.clone();
        clock.at(6.0 * H, move || c.cancel());
        let report =
            run_daemon(&config, &ScriptedTrace::new(), Arc::new(clock.clone()), &cancel, Arc::new(ManifestLauncher));
        assert_eq!(report.starts, 0);
        assert_eq!(report.ticks, 36);
    }

    #[test]
    fn activity_kills_running_loop() {
        let clock = VirtualClock::new(9.0 * H);
        let (a, _) = job(&clock, "a", 120_000);
        a.signal_set().unwrap();
        let config = WorkerConfig::new(vec![a.clone()], "w");
        let trace = ScriptedTrace::new().activity(8.0 * H).busy(11.0 * H, 11.0 * H + 600.0);
        let cancel = CancelToken::new();
        let c = cancel.clone();
        clock.at(11.5 * H, move || c.cancel());
        let report = run_daemon(&config, &trace, Arc::new(clock.clone()), &cancel, Arc::new(ManifestLauncher));
        assert_eq!(report.starts, 1);
        assert_eq!(report.kills, 1);
        let kill = report.events.iter().find(|e| matches!(e.kind, DaemonEventKind::Kill { .. })).unwrap();
        assert_eq!(kill.time, 11.0 * H);
        let logs = a.read_run_logs().unwrap();
        let lines: Vec<(f64, &str)> =
            logs[0].1.lines().map(|l| (l.split_whitespace().next().unwrap().parse().unwrap(), l)).collect();
        // 09:00 to 11:00 at two minutes per evaluation, then the abandoned one
        assert_eq!(lines.len(), 61);
        let (last_ts, last) = lines.last().unwrap();
        assert!(last.ends_with("abandoned"), "{last}");
        assert!(*last_ts <= 11.0 * H + 12.0);
        assert!(lines.iter().all(|(ts, l)| !l.contains("committed") || *ts <= 11.0 * H), "{lines:?}");
    }
}

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::clock::{Clock, VirtualClock};
use crate::coordination::{checksum, BestState, JobDirectory, Manifest, ObjectiveSpec};
use crate::objective::Objective;
use crate::optimizer::{initialize, merge, propose, proposal_rng, ChangeProposal, MergeOutcome};
use crate::storage::{FsStorage, MemStorage};
use crate::worker::{scheduler_tick, single_instance_guard, GuardOutcome, InstanceGuard, InstanceRegistry, ScriptedTrace,
    TickDecision, WorkerConfig};

use super::{Backend, JobSetup, SimConfig, SimError, SimWorker};

#[derive(Debug, Clone, PartialEq)]
pub struct CommitEntry {
    pub time: f64,
    pub version: u64,
    pub worker: String,
    pub index: usize,
    pub new_value: u32,
    pub performance: f64,
    pub estimated: bool,
    /// Sequence number of the evaluation that produced the commit.
    pub evaluation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Commit,
    /// Same `(base version, index, value)` as an earlier completed evaluation.
    Duplicate,
    /// Rejected as conflicting or stale.
    Outdated,
    NotBetter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub evaluation: u64,
    pub worker: String,
    pub time: f64,
    pub base_version: u64,
    pub index: usize,
    pub new_value: u32,
    pub outcome: MergeOutcome,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorkerStats {
    pub id: String,
    pub starts: u64,
    pub kills: u64,
    pub evaluations: u64,
    pub commits: u64,
    pub abandoned: u64,
    /// Virtual seconds spent with a loop running.
    pub running_time: f64,
    /// When the worker last stopped because the signal was gone.
    pub quiesced_at: Option<f64>,
}

impl WorkerStats {
    pub fn evaluation_rate(&self) -> f64 {
        if self.running_time > 0.0 {
            self.evaluations as f64 / self.running_time
        } else {
            0.0
        }
    }
}

/// Raw result of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub makespan: f64,
    pub incomplete: bool,
    pub evaluations: u64,
    pub commits: u64,
    pub wasted_duplicate: u64,
    pub wasted_outdated: u64,
    pub rejected_not_better: u64,
    pub abandoned: u64,
    /// When the signal was cleared.
    pub stop_time: Option<f64>,
    /// Longest span from a signal check that found the signal present to
    /// the completion of the same worker's next check.
    pub max_check_gap: f64,
    /// Longest time from the stop to a running worker noticing it.
    pub max_stop_latency: f64,
    pub final_best: BestState,
    pub commit_log: Vec<CommitEntry>,
    pub evaluations_log: Vec<EvaluationRecord>,
    pub killed_evaluations: BTreeSet<u64>,
    pub workers: Vec<WorkerStats>,
}

impl SimOutcome {
    pub fn commits_after(&self, t: f64) -> usize {
        self.commit_log.iter().filter(|c| c.time > t).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Activity,
    Tick,
    Begin,
    Read,
    Checkpoint(u32),
    Merge,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    rank: usize,
    kind: Kind,
    seq: u64,
    worker: usize,
    generation: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.rank.cmp(&other.rank))
            .then(self.kind.cmp(&other.kind))
            .then(self.seq.cmp(&other.seq))
    }
}

struct Pending {
    id: u64,
    base: BestState,
    change: (usize, u32),
    measured: f64,
}

struct Slot {
    config: WorkerConfig,
    trace: ScriptedTrace,
    slice: f64,
    speed: f64,
    rng: ChaCha8Rng,
    generation: u64,
    running_since: Option<f64>,
    tick_pending: bool,
    guard: Option<InstanceGuard>,
    pending: Option<Pending>,
    last_check_issue: Option<f64>,
    unreported: u64,
    since_progress: u64,
    seen_version: Option<u64>,
    tried: BTreeSet<(usize, u32)>,
    stats: WorkerStats,
}

/// Idle trace of a worker: busy outside its availability, plus a key press
/// at every kill.
fn trace_for(worker: &SimWorker, kills: &[f64]) -> ScriptedTrace {
    let mut trace = ScriptedTrace::new();
    let mut previous_end = f64::NEG_INFINITY;
    for &(start, end) in &worker.availability {
        if start > previous_end {
            trace = trace.busy(previous_end, start);
        }
        previous_end = end;
    }
    if previous_end < f64::INFINITY {
        trace = trace.busy(previous_end, f64::INFINITY);
    }
    for &k in kills {
        trace = trace.activity(k);
    }
    trace
}

fn next_grid(config: &WorkerConfig, t: f64) -> f64 {
    let phase = (t - config.daily_start).rem_euclid(config.poll_interval);
    if phase < 1e-9 {
        t
    } else {
        t + config.poll_interval - phase
    }
}

struct Engine<'a> {
    sim: &'a SimConfig,
    job: JobDirectory,
    clock: VirtualClock,
    objective: Box<dyn Objective>,
    levels: u32,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    ranks: Vec<usize>,
    slots: Vec<Slot>,
    registry: InstanceRegistry,
    server_free: f64,
    next_evaluation: u64,
    seen_keys: BTreeSet<(u64, usize, u32)>,
    stopped_at: Option<f64>,
    out: Counters,
}

#[derive(Default)]
struct Counters {
    evaluations: u64,
    commits: u64,
    duplicate: u64,
    outdated: u64,
    not_better: u64,
    abandoned: u64,
    max_check_gap: f64,
    max_stop_latency: f64,
    commit_log: Vec<CommitEntry>,
    evaluations_log: Vec<EvaluationRecord>,
    killed: BTreeSet<u64>,
}

impl Engine<'_> {
    fn push(&mut self, time: f64, worker: usize, kind: Kind) {
        self.seq += 1;
        let event =
            Event { time, rank: self.ranks[worker], kind, seq: self.seq, worker, generation: self.slots[worker].generation };
        self.heap.push(Reverse(event));
    }

    /// Queues `ops` coordination operations issued by `w` at `now`; returns
    /// when the last completes. A slower machine holds the share longer.
    fn serve(&mut self, w: usize, now: f64, ops: u32) -> f64 {
        self.server_free = self.server_free.max(now) + f64::from(ops) * self.sim.t_io / self.slots[w].speed;
        self.server_free
    }

    fn schedule_tick(&mut self, w: usize, after: f64) {
        if self.stopped_at.is_none() && !self.slots[w].tick_pending {
            self.slots[w].tick_pending = true;
            let t = next_grid(&self.slots[w].config, after);
            self.push(t, w, Kind::Tick);
        }
    }

    fn stop(&mut self, now: f64) -> Result<(), SimError> {
        if self.stopped_at.is_none() {
            self.job.signal_clear()?;
            self.stopped_at = Some(now);
        }
        Ok(())
    }

    fn end_run(&mut self, w: usize, at: f64) {
        let slot = &mut self.slots[w];
        if let Some(since) = slot.running_since.take() {
            slot.stats.running_time += at - since;
        }
        slot.guard = None;
        slot.pending = None;
        slot.last_check_issue = None;
        slot.generation += 1;
    }

    fn quiesce(&mut self, w: usize, at: f64) {
        self.end_run(w, at);
        self.slots[w].stats.quiesced_at = Some(at);
        if let Some(t0) = self.stopped_at {
            self.out.max_stop_latency = self.out.max_stop_latency.max(at - t0);
        }
    }

    /// A signal check issued at `now`. Returns presence and completion time.
    fn check_signal(&mut self, w: usize, now: f64) -> Result<(bool, f64), SimError> {
        let present = self.job.signal_exists()?;
        let done = self.serve(w, now, 1);
        if let Some(prev) = self.slots[w].last_check_issue {
            self.out.max_check_gap = self.out.max_check_gap.max(done - prev);
        }
        self.slots[w].last_check_issue = present.then_some(now);
        Ok((present, done))
    }

    fn abandon(&mut self, w: usize, killed: bool) {
        if let Some(p) = self.slots[w].pending.take() {
            self.out.abandoned += 1;
            self.slots[w].stats.abandoned += 1;
            if killed {
                self.out.killed.insert(p.id);
            }
        }
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        let w = ev.worker;
        let now = ev.time;
        self.clock.set(now);
        if ev.kind != Kind::Activity && ev.kind != Kind::Tick && ev.generation != self.slots[w].generation {
            return Ok(());
        }
        match ev.kind {
            Kind::Activity => {
                if self.slots[w].running_since.is_some() {
                    self.abandon(w, true);
                    self.slots[w].stats.kills += 1;
                    self.end_run(w, now);
                    self.schedule_tick(w, now);
                }
            }
            Kind::Tick => {
                self.slots[w].tick_pending = false;
                if self.slots[w].running_since.is_some() || self.stopped_at.is_some() {
                    return Ok(());
                }
                let slot = &self.slots[w];
                let tod = now.rem_euclid(86_400.0);
                match scheduler_tick(&slot.config, &slot.trace, &self.registry, now, tod) {
                    TickDecision::Start { job } => {
                        let GuardOutcome::Acquired(guard) =
                            single_instance_guard(&self.registry, &slot.config.worker_id, &slot.config.jobs[job])
                        else {
                            return Err(SimError::Contract("second instance started".into()));
                        };
                        let slot = &mut self.slots[w];
                        slot.guard = Some(guard);
                        slot.running_since = Some(now);
                        slot.stats.starts += 1;
                        self.push(now, w, Kind::Begin);
                    }
                    TickDecision::Skip { .. } => {
                        let poll = self.slots[w].config.poll_interval;
                        self.schedule_tick(w, now + poll);
                    }
                }
            }
            Kind::Begin => {
                let (present, done) = self.check_signal(w, now)?;
                if present {
                    self.push(done, w, Kind::Read);
                } else {
                    self.quiesce(w, done);
                }
            }
            Kind::Read => {
                let base = self.job.read_best()?;
                let done = self.serve(w, now, 1);
                let neighborhood = base.config.len() as u64 * u64::from(self.levels - 1);
                let slot = &mut self.slots[w];
                if slot.seen_version != Some(base.version) {
                    slot.seen_version = Some(base.version);
                    slot.since_progress = 0;
                    slot.tried.clear();
                }
                let stop = &self.sim.stop;
                let reached = stop.target_performance.is_some_and(|t| base.performance >= t)
                    || stop.stagnation.is_some_and(|k| slot.since_progress >= k)
                    || (stop.local_optimum && slot.tried.len() as u64 >= neighborhood);
                if reached {
                    self.stop(now)?;
                    self.quiesce(w, done);
                    return Ok(());
                }
                let change = propose(&base, self.levels, &mut slot.rng);
                let measured = self.objective.evaluate(&base.config.with_change(change.0, change.1))?;
                self.next_evaluation += 1;
                let slot = &mut self.slots[w];
                slot.pending = Some(Pending { id: self.next_evaluation, base, change, measured });
                let slice = slot.slice;
                self.push(done + slice, w, Kind::Checkpoint(1));
            }
            Kind::Checkpoint(k) => {
                let (present, done) = self.check_signal(w, now)?;
                if !present {
                    self.abandon(w, false);
                    self.quiesce(w, done);
                } else if k < self.sim.checkpoints {
                    let slice = self.slots[w].slice;
                    self.push(done + slice, w, Kind::Checkpoint(k + 1));
                } else {
                    self.push(done, w, Kind::Merge);
                }
            }
            Kind::Merge => self.merge(w, now)?,
        }
        Ok(())
    }

    fn merge(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let slot = &mut self.slots[w];
        let pending = slot.pending.take().expect("merge without an evaluation");
        slot.unreported += 1;
        slot.since_progress += 1;
        let proposal =
            ChangeProposal::from_measurement(pending.base, pending.change, pending.measured, &slot.config.worker_id);
        let outcome = merge(&self.job, &proposal, slot.config.mode, &self.sim.merge, slot.unreported)?;
        let done = self.serve(w, now, 2);

        let key = (proposal.base_version(), proposal.index, proposal.new_value);
        let first = self.seen_keys.insert(key);
        let category = match outcome {
            MergeOutcome::Committed { .. } => Category::Commit,
            _ if !first => Category::Duplicate,
            o if o.is_outdated() => Category::Outdated,
            _ => Category::NotBetter,
        };
        self.out.evaluations += 1;
        let slot = &mut self.slots[w];
        slot.stats.evaluations += 1;
        match category {
            Category::Commit => self.out.commits += 1,
            Category::Duplicate => self.out.duplicate += 1,
            Category::Outdated => self.out.outdated += 1,
            Category::NotBetter => self.out.not_better += 1,
        }
        if outcome == MergeOutcome::RejectedNotBetter {
            slot.tried.insert(pending.change);
        }
        self.out.evaluations_log.push(EvaluationRecord {
            evaluation: pending.id,
            worker: slot.config.worker_id.clone(),
            time: now,
            base_version: key.0,
            index: key.1,
            new_value: key.2,
            outcome,
            category,
        });
        let mut reached_target = false;
        if let MergeOutcome::Committed { new_version } = outcome {
            slot.unreported = 0;
            slot.stats.commits += 1;
            let best = self.job.read_best()?;
            reached_target = self.sim.stop.target_performance.is_some_and(|t| best.performance >= t);
            self.out.commit_log.push(CommitEntry {
                time: now,
                version: new_version,
                worker: slot.config.worker_id.clone(),
                index: proposal.index,
                new_value: proposal.new_value,
                performance: best.performance,
                estimated: best.estimated,
                evaluation: pending.id,
            });
        }
        let budget_spent = self.sim.stop.max_total_evaluations.is_some_and(|n| self.out.evaluations >= n);
        if budget_spent || reached_target {
            self.stop(done)?;
        }
        self.push(done, w, Kind::Begin);
        Ok(())
    }
}

fn open_job(setup: &JobSetup, clock: &VirtualClock) -> Result<JobDirectory, SimError> {
    let clock: Arc<dyn Clock> = Arc::new(clock.clone());
    Ok(match &setup.backend {
        Backend::Memory => JobDirectory::in_memory(MemStorage::new("sim"), clock, "sim"),
        Backend::Directory(path) => JobDirectory::new(Arc::new(FsStorage::new(path)), clock, "sim"),
    })
}

pub(super) fn run(
    fleet: &[SimWorker],
    setup: &JobSetup,
    sim: &SimConfig,
    kills: &[(String, f64)],
) -> Result<SimOutcome, SimError> {
    let clock = VirtualClock::new(0.0);
    let job = open_job(setup, &clock)?;
    // evaluation time is modelled by the engine, not slept
    let spec = ObjectiveSpec { eval_delay_ms: 0, ..setup.objective.clone() };
    let objective = spec.build(Arc::new(clock.clone()))?;
    job.write_manifest(&Manifest { job_id: "sim".into(), objective: setup.objective.clone(), stop: sim.stop.clone() })?;
    initialize(&job, setup.initial.clone(), objective.as_ref(), "master", false)?;
    job.signal_set()?;

    let mut order: Vec<usize> = (0..fleet.len()).collect();
    order.sort_by(|&a, &b| fleet[a].id.cmp(&fleet[b].id));
    let mut ranks = vec![0; fleet.len()];
    for (rank, &w) in order.iter().enumerate() {
        ranks[w] = rank;
    }

    let slots = fleet
        .iter()
        .map(|w| {
            let worker_kills: Vec<f64> = kills.iter().filter(|(id, _)| id == &w.id).map(|k| k.1).collect();
            let mut config = w.config.clone();
            config.worker_id = w.id.clone();
            config.jobs = vec![job.clone()];
            let mut seed_bytes = sim.seed.to_le_bytes().to_vec();
            seed_bytes.extend_from_slice(w.id.as_bytes());
            Slot {
                config,
                trace: trace_for(w, &worker_kills),
                slice: sim.t_eval / w.speed_factor / f64::from(sim.checkpoints),
                speed: w.speed_factor,
                rng: proposal_rng(checksum(&seed_bytes)),
                generation: 0,
                running_since: None,
                tick_pending: false,
                guard: None,
                pending: None,
                last_check_issue: None,
                unreported: 0,
                since_progress: 0,
                seen_version: None,
                tried: BTreeSet::new(),
                stats: WorkerStats { id: w.id.clone(), ..WorkerStats::default() },
            }
        })
        .collect();

    let mut engine = Engine {
        sim,
        levels: objective.level_count(),
        objective,
        job,
        clock,
        heap: BinaryHeap::new(),
        seq: 0,
        ranks,
        slots,
        registry: InstanceRegistry::new(),
        server_free: 0.0,
        next_evaluation: 0,
        seen_keys: BTreeSet::new(),
        stopped_at: None,
        out: Counters::default(),
    };

    for w in 0..fleet.len() {
        let activity: Vec<f64> = engine.slots[w].trace.activity_starts().filter(|t| t.is_finite() && *t >= 0.0).collect();
        for t in activity {
            engine.push(t, w, Kind::Activity);
        }
        engine.schedule_tick(w, 0.0);
    }

    let mut horizon_hit = false;
    while let Some(Reverse(ev)) = engine.heap.pop() {
        if ev.time > sim.horizon {
            horizon_hit = true;
            break;
        }
        if let Some(t) = sim.stop_at.filter(|&t| engine.stopped_at.is_none() && ev.time >= t) {
            engine.clock.set(t);
            engine.stop(t)?;
        }
        if engine.stopped_at.is_some() && engine.slots.iter().all(|s| s.running_since.is_none()) {
            break;
        }
        engine.handle(ev)?;
    }

    let end = engine.clock.now();
    for w in 0..engine.slots.len() {
        engine.end_run(w, end.min(sim.horizon));
    }
    let incomplete = engine.stopped_at.is_none();
    let makespan = engine.stopped_at.unwrap_or(if horizon_hit { sim.horizon } else { end });
    let final_best = engine.job.read_best()?;
    let out = engine.out;
    Ok(SimOutcome {
        makespan,
        incomplete,
        evaluations: out.evaluations,
        commits: out.commits,
        wasted_duplicate: out.duplicate,
        wasted_outdated: out.outdated,
        rejected_not_better: out.not_better,
        abandoned: out.abandoned,
        stop_time: engine.stopped_at,
        max_check_gap: out.max_check_gap,
        max_stop_latency: out.max_stop_latency,
        final_best,
        commit_log: out.commit_log,
        evaluations_log: out.evaluations_log,
        killed_evaluations: out.killed,
        workers: engine.slots.into_iter().map(|s| s.stats).collect(),
    })
}

use std::fmt::Write as _;

use thiserror::Error;

use crate::coordination::{format_real, ObjectiveSpec};
use crate::objective::ConfigVector;
use crate::optimizer::{random_config, OptimizerMode, StopCondition};
use crate::worker::{parse_time_of_day, WorkerConfig};

use super::{run_sim_with_kills, JobSetup, SimConfig, SimError, SimWorker, SpeedupReport};

#[derive(Debug, Error, PartialEq)]
#[error("scenario line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

/// A fleet, a job, simulation settings and a kill schedule, read from a
/// `key=value` file. Each `worker=<id>` line is a stanza of its own:
///
/// ```text
/// t_eval=3600
/// t_io=3.6
/// stop_max_evals=1000
/// worker=fast speed=1.0
/// worker=lab1 speed=0.4 avail=64800-115200,151200-inf
/// kill=lab1@90000
/// ```
#[derive(Debug, Clone)]
pub struct Scenario {
    pub fleet: Vec<SimWorker>,
    pub setup: JobSetup,
    pub sim: SimConfig,
    pub kills: Vec<(String, f64)>,
}

fn parse_interval(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once('-')?;
    let bound = |v: &str, open: f64| if v.is_empty() || v == "inf" { Some(open) } else { v.parse().ok() };
    Some((bound(a, f64::NEG_INFINITY)?, bound(b, f64::INFINITY)?))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut sim = SimConfig::new(3600.0, 3.6, 1, StopCondition::default());
        let mut objective = ObjectiveSpec { n: 32, levels: 4, target_order: 1, eval_delay_ms: 0 };
        let mut random_init: Option<u64> = None;
        let mut defaults = WorkerConfig::new(Vec::new(), "sim");
        let mut fleet = Vec::new();
        let mut kills = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |message: String| ScenarioError { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut pairs = Vec::new();
            for token in line.split_whitespace() {
                let (k, v) = token.split_once('=').ok_or_else(|| bad(format!("expected key=value, found {token:?}")))?;
                pairs.push((k, v));
            }
            fn num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T, ScenarioError>
            where
                T::Err: std::fmt::Display,
            {
                v.parse().map_err(|e| ScenarioError { line, message: format!("{key}: {e}") })
            }

            if pairs[0].0 == "worker" {
                let mut worker = SimWorker::always(pairs[0].1, 1.0);
                worker.config = WorkerConfig { worker_id: worker.id.clone(), ..defaults.clone() };
                for &(k, v) in &pairs[1..] {
                    match k {
                        "speed" => worker.speed_factor = num(k, v, line_no)?,
                        "avail" if v == "always" => {}
                        "avail" => {
                            worker.availability = v
                                .split(',')
                                .map(|iv| parse_interval(iv).ok_or_else(|| bad(format!("bad interval {iv:?}"))))
                                .collect::<Result<_, _>>()?
                        }
                        "mode" => worker.config.mode = v.parse().map_err(bad)?,
                        other => return Err(bad(format!("unknown worker key {other:?}"))),
                    }
                }
                worker.validate().map_err(|e| bad(e.to_string()))?;
                fleet.push(worker);
                continue;
            }
            for (k, v) in pairs {
                match k {
                    "t_eval" => sim.t_eval = num(k, v, line_no)?,
                    "t_io" => sim.t_io = num(k, v, line_no)?,
                    "seed" => sim.seed = num(k, v, line_no)?,
                    "horizon" => sim.horizon = num(k, v, line_no)?,
                    "stop_at" => sim.stop_at = Some(num(k, v, line_no)?),
                    "checkpoints" => sim.checkpoints = num(k, v, line_no)?,
                    "double_read" => sim.merge.double_read = num::<u8>(k, v, line_no)? != 0,
                    "stop_max_evals" => sim.stop.max_total_evaluations = Some(num(k, v, line_no)?),
                    "stop_target" => sim.stop.target_performance = Some(num(k, v, line_no)?),
                    "stop_stagnation" => sim.stop.stagnation = Some(num(k, v, line_no)?),
                    "stop_local_optimum" => sim.stop.local_optimum = num::<u8>(k, v, line_no)? != 0,
                    "n" => objective.n = num(k, v, line_no)?,
                    "levels" => objective.levels = num(k, v, line_no)?,
                    "target_order" => objective.target_order = num(k, v, line_no)?,
                    "init" if v == "zero" => random_init = None,
                    "init" if v == "random" => random_init = Some(random_init.unwrap_or(0)),
                    "init_seed" => random_init = Some(num(k, v, line_no)?),
                    "mode" => defaults.mode = v.parse::<OptimizerMode>().map_err(bad)?,
                    "poll_interval" => defaults.poll_interval = num(k, v, line_no)?,
                    "idle_threshold" => defaults.idle_threshold = num(k, v, line_no)?,
                    "daily_start" => {
                        defaults.daily_start = parse_time_of_day(v).ok_or_else(|| bad(format!("bad time {v:?}")))?
                    }
                    "daily_duration" => defaults.daily_duration = num(k, v, line_no)?,
                    "kill" => {
                        let (id, at) = v.split_once('@').ok_or_else(|| bad(format!("expected kill=<id>@<time>, found {v:?}")))?;
                        kills.push((id.to_string(), num(k, at, line_no)?));
                    }
                    other => return Err(bad(format!("unknown key {other:?}"))),
                }
            }
        }
        if fleet.is_empty() {
            return Err(ScenarioError { line: 0, message: "no worker= lines".into() });
        }
        for (id, _) in &kills {
            if !fleet.iter().any(|w: &SimWorker| &w.id == id) {
                return Err(ScenarioError { line: 0, message: format!("kill names unknown worker {id:?}") });
            }
        }
        let initial = match random_init {
            Some(seed) => random_config(objective.n, objective.levels, seed),
            None => ConfigVector::zeros(objective.n),
        };
        Ok(Self { fleet, setup: JobSetup { initial, ..JobSetup::in_memory(objective) }, sim, kills })
    }

    /// Simulates the scenario, kills included, against its speedup baseline.
    pub fn run(&self) -> Result<SpeedupReport, SimError> {
        run_sim_with_kills(&self.fleet, &self.setup, &self.sim, &self.kills)
    }
}

/// `key=value` summary of a run.
pub fn report_lines(report: &SpeedupReport) -> String {
    let mut out = String::new();
    let o = &report.outcome;
    let _ = writeln!(out, "makespan={}", report.makespan);
    let _ = writeln!(out, "incomplete={}", u8::from(report.incomplete));
    let _ = writeln!(out, "evaluations_total={}", report.evaluations_total);
    let _ = writeln!(out, "commits={}", report.commits);
    let _ = writeln!(out, "wasted_duplicate={}", report.wasted_duplicate);
    let _ = writeln!(out, "wasted_outdated={}", report.wasted_outdated);
    let _ = writeln!(out, "rejected_not_better={}", report.rejected_not_better);
    let _ = writeln!(out, "abandoned={}", report.abandoned);
    let _ = writeln!(out, "reference={}", report.reference);
    let _ = writeln!(out, "speedup={}", report.speedup);
    let _ = writeln!(out, "ideal_speedup={}", report.ideal_speedup);
    let _ = writeln!(out, "efficiency={}", report.efficiency);
    let _ = writeln!(out, "final_version={}", o.final_best.version);
    let _ = writeln!(out, "final_performance={}", format_real(o.final_best.performance));
    let _ = writeln!(out, "max_stop_latency={}", o.max_stop_latency);
    for w in &o.workers {
        let _ = writeln!(
            out,
            "worker={} starts={} kills={} evaluations={} commits={} abandoned={} running_time={}",
            w.id, w.starts, w.kills, w.evaluations, w.commits, w.abandoned, w.running_time
        );
    }
    out
}

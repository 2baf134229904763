use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::clock::Clock;

use crate::objective::{Objective, ObjectiveError, Paced, PhaseMaskObjective};
use crate::optimizer::StopCondition;

use super::CoordError;

/// Objective parameters stored with a job.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub n: usize,
    pub levels: u32,
    pub target_order: usize,
    /// Artificial per-evaluation wall time, for demos of long evaluations.
    pub eval_delay_ms: u64,
}

impl ObjectiveSpec {
    /// Builds the objective; any evaluation delay elapses on `clock`.
    pub fn build(&self, clock: Arc<dyn Clock>) -> Result<Box<dyn Objective>, ObjectiveError> {
        let mask = PhaseMaskObjective::new(self.n, self.levels, self.target_order)?;
        Ok(if self.eval_delay_ms > 0 {
            Box::new(Paced::with_clock(mask, self.eval_delay_ms as f64 / 1000.0, clock))
        } else {
            Box::new(mask)
        })
    }
}

/// `manifest.dat`: `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub job_id: String,
    pub objective: ObjectiveSpec,
    pub stop: StopCondition,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "job_id={}", self.job_id);
        let _ = writeln!(out, "objective=phase_mask");
        let _ = writeln!(out, "n={}", self.objective.n);
        let _ = writeln!(out, "levels={}", self.objective.levels);
        let _ = writeln!(out, "target_order={}", self.objective.target_order);
        if self.objective.eval_delay_ms > 0 {
            let _ = writeln!(out, "eval_delay_ms={}", self.objective.eval_delay_ms);
        }
        if let Some(limit) = self.stop.max_total_evaluations {
            let _ = writeln!(out, "stop_max_evals={limit}");
        }
        if let Some(target) = self.stop.target_performance {
            let _ = writeln!(out, "stop_target={}", super::format_real(target));
        }
        if let Some(window) = self.stop.stagnation {
            let _ = writeln!(out, "stop_stagnation={window}");
        }
        if self.stop.local_optimum {
            let _ = writeln!(out, "stop_local_optimum=1");
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CoordError> {
        const FILE: &str = "manifest.dat";
        let bad = |line: usize, message: String| CoordError::Format { file: FILE, line, message };
        let text = std::str::from_utf8(bytes).map_err(|e| bad(0, format!("not UTF-8: {e}")))?;

        let mut fields = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected key=value, found {line:?}")))?;
            fields.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        fn get<T: std::str::FromStr>(
            fields: &BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<Option<T>, CoordError>
        where
            T::Err: std::fmt::Display,
        {
            match fields.get(key) {
                None => Ok(None),
                Some((line, v)) => v.parse().map(Some).map_err(|e: T::Err| CoordError::Format {
                    file: FILE,
                    line: *line,
                    message: format!("{key}: {e}"),
                }),
            }
        }
        let required = |key: &str| bad(0, format!("missing required key `{key}`"));

        let job_id: String = get(&fields, "job_id")?.ok_or_else(|| required("job_id"))?;
        match fields.get("objective") {
            Some((_, kind)) if kind == "phase_mask" => {}
            Some((line, kind)) => return Err(bad(*line, format!("unknown objective {kind:?}"))),
            None => return Err(required("objective")),
        }
        let objective = ObjectiveSpec {
            n: get(&fields, "n")?.ok_or_else(|| required("n"))?,
            levels: get(&fields, "levels")?.ok_or_else(|| required("levels"))?,
            target_order: get(&fields, "target_order")?.ok_or_else(|| required("target_order"))?,
            eval_delay_ms: get(&fields, "eval_delay_ms")?.unwrap_or(0),
        };
        if objective.levels < 2 {
            let line = fields["levels"].0;
            return Err(bad(line, "a single-level objective admits no changes".into()));
        }
        let stop = StopCondition {
            max_total_evaluations: get(&fields, "stop_max_evals")?,
            target_performance: get(&fields, "stop_target")?,
            stagnation: get(&fields, "stop_stagnation")?,
            local_optimum: get::<u8>(&fields, "stop_local_optimum")?.unwrap_or(0) != 0,
        };
        Ok(Self { job_id, objective, stop })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_stops() {
        let m = Manifest {
            job_id: "doe-7".into(),
            objective: ObjectiveSpec { n: 8, levels: 2, target_order: 1, eval_delay_ms: 0 },
            stop: StopCondition {
                max_total_evaluations: Some(500),
                target_performance: Some(0.4),
                stagnation: None,
                local_optimum: true,
            },
        };
        assert_eq!(Manifest::decode(m.encode().as_bytes()).unwrap(), m);
    }

    #[test]
    fn single_level_is_rejected() {
        let text = "job_id=x\nobjective=phase_mask\nn=4\nlevels=1\ntarget_order=0\n";
        match Manifest::decode(text.as_bytes()) {
            Err(CoordError::Format { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_reported() {
        let text = "job_id=x\nobjective=phase_mask\nn=4\nlevels=2\n";
        let err = Manifest::decode(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("target_order"), "{err}");
    }
}

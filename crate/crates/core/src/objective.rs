//! Objectives and the shipped phase-mask surrogate.
//!
//! The phase mask scores a 1-D mask of `n` discrete phase levels by the
//! fraction of power it diffracts into a single far-field order `k`:
//!
//! ```text
//! a_m   = exp(i 2π level_m / L)
//! η_k   = |Σ_m a_m exp(-i 2π k m / n)|² / n²
//! ```
//!
//! Only the requested coefficient is computed.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use num_complex::Complex64;
use thiserror::Error;

use crate::clock::{Clock, SystemClock};

/// Largest search space [`brute_force_optimum`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("config has {got} elements, objective expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("element {index} has level {level}, outside [0, {levels})")]
    Level { index: usize, level: u32, levels: u32 },
    #[error("invalid objective parameters: {0}")]
    Params(String),
    #[error("search space {levels}^{n} exceeds the enumeration limit of {BRUTE_FORCE_LIMIT}")]
    TooLarge { n: usize, levels: u32 },
}

/// A configuration: one discrete level per element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConfigVector(Vec<u32>);

impl ConfigVector {
    pub fn new(levels: Vec<u32>) -> Self {
        Self(levels)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, index: usize) -> Option<u32> {
        self.0.get(index).copied()
    }

    /// Copy with element `index` set to `value`.
    pub fn with_change(&self, index: usize, value: u32) -> Self {
        let mut next = self.0.clone();
        next[index] = value;
        Self(next)
    }

    pub fn validate(&self, n: usize, levels: u32) -> Result<(), ObjectiveError> {
        if self.0.len() != n {
            return Err(ObjectiveError::Length { expected: n, got: self.0.len() });
        }
        match self.0.iter().position(|&l| l >= levels) {
            Some(index) => Err(ObjectiveError::Level { index, level: self.0[index], levels }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for ConfigVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ConfigVector {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace().map(str::parse).collect::<Result<_, _>>().map(Self)
    }
}

/// Something a worker can score. Higher is better.
pub trait Objective: Send + Sync {
    fn evaluate(&self, config: &ConfigVector) -> Result<f64, ObjectiveError>;

    fn level_count(&self) -> u32;

    fn length(&self) -> usize;

    /// Relative evaluation cost, used by the simulator to scale run times.
    fn cost_hint(&self) -> f64 {
        1.0
    }

    /// Evaluates while giving the caller a chance to abandon. `checkpoint`
    /// receives the fraction of work done and returns whether to continue.
    /// `Ok(None)` means the evaluation was abandoned.
    fn evaluate_with_checkpoints(
        &self,
        config: &ConfigVector,
        checkpoint: &mut dyn FnMut(f64) -> bool,
    ) -> Result<Option<f64>, ObjectiveError> {
        let value = self.evaluate(config)?;
        Ok(checkpoint(1.0).then_some(value))
    }
}

/// Diffraction efficiency of a discrete phase mask into one order.
#[derive(Debug, Clone)]
pub struct PhaseMaskObjective {
    n: usize,
    levels: u32,
    target_order: usize,
    // phasors[p] = exp(i 2π p / (n L)); every term of the sum is one of these
    phasors: Vec<Complex64>,
}

impl PhaseMaskObjective {
    pub fn new(n: usize, levels: u32, target_order: usize) -> Result<Self, ObjectiveError> {
        if n == 0 {
            return Err(ObjectiveError::Params("mask length must be at least 1".into()));
        }
        if levels < 2 {
            return Err(ObjectiveError::Params("need at least 2 phase levels".into()));
        }
        if target_order >= n {
            return Err(ObjectiveError::Params(format!(
                "target order {target_order} outside [0, {n})"
            )));
        }
        let period = n * levels as usize;
        let phasors = (0..period)
            .map(|p| Complex64::from_polar(1.0, TAU * p as f64 / period as f64))
            .collect();
        Ok(Self { n, levels, target_order, phasors })
    }

    pub fn target_order(&self) -> usize {
        self.target_order
    }

    /// Efficiency into an arbitrary order `k` (used for Parseval checks).
    pub fn efficiency(&self, config: &ConfigVector, k: usize) -> Result<f64, ObjectiveError> {
        config.validate(self.n, self.levels)?;
        let l = self.levels as usize;
        let period = self.n * l;
        // angle (level/L - k m/n) · 2π, reduced to an integer multiple of 2π/(nL)
        let sum: Complex64 = config
            .levels()
            .iter()
            .enumerate()
            .map(|(m, &level)| {
                let up = level as usize * self.n;
                let down = (k * m * l) % period;
                self.phasors[(up + period - down) % period]
            })
            .sum();
        Ok(sum.norm_sqr() / (self.n * self.n) as f64)
    }
}

impl Objective for PhaseMaskObjective {
    fn evaluate(&self, config: &ConfigVector) -> Result<f64, ObjectiveError> {
        self.efficiency(config, self.target_order)
    }

    fn level_count(&self) -> u32 {
        self.levels
    }

    fn length(&self) -> usize {
        self.n
    }
}

/// Stretches an objective over wall time, checking in after every tenth of
/// the work. Stands in for a long solver run in demos and daemon tests.
pub struct Paced<O> {
    inner: O,
    duration: f64,
    steps: u32,
    clock: Arc<dyn Clock>,
}

impl<O: Objective> Paced<O> {
    pub fn new(inner: O, duration: Duration) -> Self {
        Self::with_clock(inner, duration.as_secs_f64(), Arc::new(SystemClock))
    }

    /// Paced against `clock`, e.g. a virtual clock in tests.
    pub fn with_clock(inner: O, seconds: f64, clock: Arc<dyn Clock>) -> Self {
        Self { inner, duration: seconds, steps: 10, clock }
    }
}

impl<O: Objective> Objective for Paced<O> {
    fn evaluate(&self, config: &ConfigVector) -> Result<f64, ObjectiveError> {
        self.clock.sleep(self.duration);
        self.inner.evaluate(config)
    }

    fn level_count(&self) -> u32 {
        self.inner.level_count()
    }

    fn length(&self) -> usize {
        self.inner.length()
    }

    fn cost_hint(&self) -> f64 {
        self.inner.cost_hint() * self.duration.max(1e-3)
    }

    fn evaluate_with_checkpoints(
        &self,
        config: &ConfigVector,
        checkpoint: &mut dyn FnMut(f64) -> bool,
    ) -> Result<Option<f64>, ObjectiveError> {
        let slice = self.duration / f64::from(self.steps);
        for step in 1..=self.steps {
            self.clock.sleep(slice);
            if !checkpoint(f64::from(step) / f64::from(self.steps)) {
                return Ok(None);
            }
        }
        self.inner.evaluate(config).map(Some)
    }
}

/// Every single-element change of `config`: `n × (L − 1)` pairs of
/// `(index, new_value)`, index-major.
pub fn neighbors(levels: u32, config: &ConfigVector) -> impl Iterator<Item = (usize, u32)> + '_ {
    config
        .levels()
        .iter()
        .enumerate()
        .flat_map(move |(i, &cur)| (0..levels).filter(move |&v| v != cur).map(move |v| (i, v)))
}

/// Exhaustive search. Ties (within 1e-12) go to the lexicographically
/// smallest configuration.
pub fn brute_force_optimum(obj: &dyn Objective) -> Result<(ConfigVector, f64), ObjectiveError> {
    let n = obj.length();
    let levels = obj.level_count();
    let size = u64::from(levels)
        .checked_pow(n as u32)
        .filter(|&s| s <= BRUTE_FORCE_LIMIT)
        .ok_or(ObjectiveError::TooLarge { n, levels })?;

    let mut digits = vec![0u32; n];
    let mut best: Option<(ConfigVector, f64)> = None;
    for _ in 0..size {
        let config = ConfigVector::new(digits.clone());
        let value = obj.evaluate(&config)?;
        if best.as_ref().is_none_or(|(_, b)| value > b + 1e-12) {
            best = Some((config, value));
        }
        // odometer with the last element varying fastest = lexicographic order
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < levels {
                break;
            }
            *d = 0;
        }
    }
    Ok(best.expect("search space is non-empty"))
}

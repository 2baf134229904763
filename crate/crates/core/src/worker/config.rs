use std::sync::Arc;

use thiserror::Error;

use crate::clock::Clock;
use crate::coordination::JobDirectory;
use crate::optimizer::OptimizerMode;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    /// 0 when the problem is not tied to one line.
    pub line: usize,
    pub message: String,
}

fn invalid(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

/// Scheduling contract of one worker machine. Times are in seconds;
/// `daily_start` is seconds after local midnight.
#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub poll_interval: f64,
    pub idle_threshold: f64,
    /// Recorded for completeness; a failed start is simply retried at the
    /// next poll.
    pub retry_window: f64,
    pub daily_start: f64,
    pub daily_duration: f64,
    /// How often the activity watcher samples the idle probe.
    pub probe_granule: f64,
    pub jobs: Vec<JobDirectory>,
    pub worker_id: String,
    pub mode: OptimizerMode,
}

pub fn default_worker_id() -> String {
    let host = std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.is_empty())
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|h| h.trim().to_string()))
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "localhost".into());
    format!("{host}:{}", std::process::id())
}

impl WorkerConfig {
    pub fn new(jobs: Vec<JobDirectory>, worker_id: impl Into<String>) -> Self {
        Self {
            poll_interval: 600.0,
            idle_threshold: 3600.0,
            retry_window: 300.0,
            daily_start: 12.0 * 3600.0,
            daily_duration: 23.0 * 3600.0 + 50.0 * 60.0,
            probe_granule: 1.0,
            jobs,
            worker_id: worker_id.into(),
            mode: OptimizerMode::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.poll_interval) {
            return Err(invalid(0, "poll_interval must be > 0"));
        }
        if !(self.idle_threshold.is_finite() && self.idle_threshold >= 0.0) {
            return Err(invalid(0, "idle_threshold must be >= 0"));
        }
        if !(0.0..=86_400.0).contains(&self.daily_duration) {
            return Err(invalid(0, "daily_duration must be within 0..=86400"));
        }
        if !(0.0..86_400.0).contains(&self.daily_start) {
            return Err(invalid(0, "daily_start must be a time of day"));
        }
        if !positive(self.probe_granule) {
            return Err(invalid(0, "probe_granule must be > 0"));
        }
        if self.jobs.is_empty() {
            return Err(invalid(0, "at least one job= line is required"));
        }
        if self.worker_id.trim().is_empty() {
            return Err(invalid(0, "worker_id is empty"));
        }
        Ok(())
    }

    /// Whether local time-of-day `tod` falls in `[daily_start, daily_start + daily_duration)`,
    /// wrapping past midnight.
    pub fn in_window(&self, tod: f64) -> bool {
        (tod - self.daily_start).rem_euclid(86_400.0) < self.daily_duration
    }

    /// Parses the `key=value` configuration file. Job paths are opened on
    /// `clock`.
    pub fn parse(text: &str, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        let mut config = Self::new(Vec::new(), default_worker_id());
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| invalid(line_no, format!("expected key=value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let seconds = || -> Result<f64, ConfigError> {
                value.parse::<f64>().map_err(|e| invalid(line_no, format!("{key}: {e}")))
            };
            match key {
                "poll_interval" => config.poll_interval = seconds()?,
                "idle_threshold" => config.idle_threshold = seconds()?,
                "retry_window" => config.retry_window = seconds()?,
                "daily_duration" => config.daily_duration = seconds()?,
                "probe_granule" => config.probe_granule = seconds()?,
                "daily_start" => {
                    config.daily_start =
                        parse_time_of_day(value).ok_or_else(|| invalid(line_no, format!("bad time of day {value:?}")))?
                }
                "worker_id" => config.worker_id = value.to_string(),
                "mode" => config.mode = value.parse().map_err(|e: String| invalid(line_no, e))?,
                "job" => config.jobs.push(JobDirectory::open_with_clock(value, clock.clone())),
                other => return Err(invalid(line_no, format!("unknown key {other:?}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// `HH:MM`, `HH:MM:SS` or plain seconds.
pub fn parse_time_of_day(s: &str) -> Option<f64> {
    if !s.contains(':') {
        return s.parse().ok().filter(|v: &f64| (0.0..86_400.0).contains(v));
    }
    let parts: Vec<u32> = s.split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let (h, m, sec) = match parts[..] {
        [h, m] => (h, m, 0),
        [h, m, sec] => (h, m, sec),
        _ => return None,
    };
    (h < 24 && m < 60 && sec < 60).then(|| f64::from(h * 3600 + m * 60 + sec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;

    fn clock() -> Arc<dyn Clock> {
        Arc::new(SystemClock)
    }

    #[test]
    fn defaults_match_the_scheduled_task() {
        let c = WorkerConfig::new(vec![], "w");
        assert_eq!(c.poll_interval, 600.0);
        assert_eq!(c.idle_threshold, 3600.0);
        assert_eq!(c.retry_window, 300.0);
        assert_eq!(c.daily_start, 43_200.0);
        assert_eq!(c.daily_duration, 85_800.0);
    }

    #[test]
    fn parses_file() {
        let text = "# lab machine\npoll_interval=60\ndaily_start=08:30\nworker_id=lab-3\nmode=change_merge\njob=/tmp/a\njob=/tmp/b\n";
        let c = WorkerConfig::parse(text, clock()).unwrap();
        assert_eq!(c.poll_interval, 60.0);
        assert_eq!(c.daily_start, 30_600.0);
        assert_eq!(c.worker_id, "lab-3");
        assert_eq!(c.mode, OptimizerMode::ChangeMerge);
        assert_eq!(c.jobs.len(), 2);
        assert_eq!(c.jobs[1].location(), "/tmp/b");
    }

    #[test]
    fn rejects_bad_values() {
        assert_eq!(WorkerConfig::parse("poll_interval=0\njob=/x\n", clock()).unwrap_err().line, 0);
        assert_eq!(WorkerConfig::parse("job=/x\npoll_interval=ten\n", clock()).unwrap_err().line, 2);
        assert_eq!(WorkerConfig::parse("jobs=/x\n", clock()).unwrap_err().line, 1);
        assert!(WorkerConfig::parse("poll_interval=60\n", clock()).is_err());
        assert!(WorkerConfig::parse("daily_duration=90000\njob=/x\n", clock()).is_err());
        assert!(WorkerConfig::parse("daily_start=25:00\njob=/x\n", clock()).is_err());
    }

    #[test]
    fn window_wraps_midnight() {
        let c = WorkerConfig::new(vec![], "w");
        assert!(c.in_window(12.0 * 3600.0));
        assert!(c.in_window(0.0));
        assert!(c.in_window(11.0 * 3600.0 + 49.0 * 60.0));
        assert!(!c.in_window(11.0 * 3600.0 + 50.0 * 60.0));
        assert!(!c.in_window(11.0 * 3600.0 + 59.0 * 60.0));
    }

    #[test]
    fn time_of_day_forms() {
        assert_eq!(parse_time_of_day("12:00"), Some(43_200.0));
        assert_eq!(parse_time_of_day("00:00:30"), Some(30.0));
        assert_eq!(parse_time_of_day("3600"), Some(3600.0));
        assert_eq!(parse_time_of_day("12:60"), None);
        assert_eq!(parse_time_of_day("1:2:3:4"), None);
    }
}

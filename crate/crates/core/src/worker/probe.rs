use std::path::Path;
use std::time::UNIX_EPOCH;

/// Seconds since the user last touched the machine.
pub trait IdleProbe: Send + Sync {
    fn idle_duration(&self, now: f64) -> f64;
}

/// Scripted user behaviour: busy intervals `[start, end)` during which the
/// idle time is zero. A single key press is a zero-length interval. Before
/// the first interval the machine counts as idle forever.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTrace {
    busy: Vec<(f64, f64)>,
}

impl ScriptedTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn busy(mut self, start: f64, end: f64) -> Self {
        assert!(end >= start, "busy interval ends before it starts");
        self.busy.push((start, end));
        self.busy.sort_by(|a, b| a.0.total_cmp(&b.0));
        self
    }

    pub fn activity(self, at: f64) -> Self {
        self.busy(at, at)
    }

    /// Instants where idle time resets: the start of every busy interval.
    pub fn activity_starts(&self) -> impl Iterator<Item = f64> + '_ {
        self.busy.iter().map(|b| b.0)
    }
}

impl IdleProbe for ScriptedTrace {
    fn idle_duration(&self, now: f64) -> f64 {
        let mut last_active = f64::NEG_INFINITY;
        for &(start, end) in &self.busy {
            if start > now {
                break;
            }
            if now < end {
                return 0.0;
            }
            last_active = last_active.max(end);
        }
        now - last_active
    }
}

/// Best-effort idle estimate from terminal and input device access times.
/// Reports infinite idleness on machines with no such devices.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemIdleProbe;

impl SystemIdleProbe {
    fn last_activity() -> Option<f64> {
        let mut devices = Vec::new();
        for dir in ["/dev/pts", "/dev/input"] {
            if let Ok(entries) = std::fs::read_dir(dir) {
                devices.extend(entries.flatten().map(|e| e.path()));
            }
        }
        if let Ok(entries) = std::fs::read_dir("/dev") {
            devices.extend(
                entries.flatten().filter(|e| e.file_name().to_string_lossy().starts_with("tty")).map(|e| e.path()),
            );
        }
        devices.iter().filter_map(|p| access_time(p)).reduce(f64::max)
    }
}

fn access_time(path: &Path) -> Option<f64> {
    let accessed = std::fs::metadata(path).ok()?.accessed().ok()?;
    Some(accessed.duration_since(UNIX_EPOCH).ok()?.as_secs_f64())
}

impl IdleProbe for SystemIdleProbe {
    fn idle_duration(&self, now: f64) -> f64 {
        match Self::last_activity() {
            Some(t) => (now - t).max(0.0),
            None => f64::INFINITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_idle_time() {
        let trace = ScriptedTrace::new().busy(0.0, 100.0).activity(500.0);
        assert_eq!(trace.idle_duration(50.0), 0.0);
        assert_eq!(trace.idle_duration(100.0), 0.0);
        assert_eq!(trace.idle_duration(400.0), 300.0);
        assert_eq!(trace.idle_duration(500.0), 0.0);
        assert_eq!(trace.idle_duration(510.0), 10.0);
        assert_eq!(ScriptedTrace::new().idle_duration(0.0), f64::INFINITY);
    }

    #[test]
    fn before_first_interval_is_idle() {
        let trace = ScriptedTrace::new().activity(10.0);
        assert_eq!(trace.idle_duration(5.0), f64::INFINITY);
    }

    #[test]
    fn system_probe_is_non_negative() {
        use crate::clock::{Clock, SystemClock};
        assert!(SystemIdleProbe.idle_duration(SystemClock.now()) >= 0.0);
    }
}

//! Idle-scavenging worker daemon.
//!
//! Mirrors a desktop task scheduler: try to launch every poll interval,
//! start only inside the daily window and after the user has been idle
//! long enough, never run two instances, and stop the moment the user
//! comes back.

mod config;
mod daemon;
mod probe;

pub use config::{default_worker_id, parse_time_of_day, ConfigError, WorkerConfig};
pub use daemon::{
    run_daemon, scheduler_tick, single_instance_guard, DaemonEvent, DaemonEventKind, DaemonReport, GuardOutcome,
    InstanceGuard, InstanceRegistry, LaunchContext, Launcher, ManifestLauncher, SkipReason, TickDecision,
};
pub use probe::{IdleProbe, ScriptedTrace, SystemIdleProbe};

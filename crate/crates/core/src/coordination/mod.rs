//! The shared-directory protocol.
//!
//! A job directory holds everything master and workers exchange:
//!
//! | file           | purpose                                              |
//! |----------------|------------------------------------------------------|
//! | `go.dat`       | zero-byte presence signal; workers run while it exists |
//! | `best.dat`     | versioned global best, replaced atomically           |
//! | `lock`         | exclusive-create write lock with staleness metadata  |
//! | `manifest.dat` | job id, objective parameters, stop conditions        |
//! | `changes.log`  | append-only audit of committed updates               |
//!
//! Writers serialize through the lock and publish `best.dat` by
//! write-to-temp-then-rename, so readers never need the lock.

mod lock;
mod manifest;
mod record;

use std::io;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::storage::{FsStorage, MemStorage, Storage};

pub use lock::{LockHandle, LockOptions, ReleaseOutcome};
pub use manifest::{Manifest, ObjectiveSpec};
pub use record::{checksum, format_real, sanitize_id, BestState, ChangeRecord, LockRecord};

pub const SIGNAL_FILE: &str = "go.dat";
pub const BEST_FILE: &str = "best.dat";
pub const LOCK_FILE: &str = "lock";
pub const MANIFEST_FILE: &str = "manifest.dat";
pub const CHANGES_FILE: &str = "changes.log";

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: job not initialized (no {BEST_FILE})")]
    NotInitialized { path: String },
    #[error("{path}: job already initialized")]
    AlreadyInitialized { path: String },
    #[error("{file} line {line}: {message}")]
    Format { file: &'static str, line: usize, message: String },
    #[error("lock held by {holder}; gave up after {waited:.3}s")]
    Contention { holder: String, waited: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl CoordError {
    /// Worth retrying after a pause.
    pub fn is_transient(&self) -> bool {
        matches!(self, CoordError::Io { .. } | CoordError::Contention { .. })
    }
}

/// Result of a compare-and-swap on `best.dat`.
#[derive(Debug, Clone, PartialEq)]
pub enum CommitResult {
    Committed,
    VersionConflict { current: BestState },
}

/// Handle on one job directory. Cheap to clone and share across threads.
#[derive(Clone)]
pub struct JobDirectory {
    storage: Arc<dyn Storage>,
    clock: Arc<dyn Clock>,
    job_id: String,
    lock_options: LockOptions,
}

impl std::fmt::Debug for JobDirectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobDirectory")
            .field("location", &self.storage.location())
            .field("job_id", &self.job_id)
            .finish()
    }
}

impl JobDirectory {
    pub fn new(storage: Arc<dyn Storage>, clock: Arc<dyn Clock>, job_id: impl Into<String>) -> Self {
        Self { storage, clock, job_id: job_id.into(), lock_options: LockOptions::default() }
    }

    /// Opens a directory on disk with the system clock. The job id comes
    /// from `manifest.dat` when present, otherwise from the directory name.
    pub fn open(path: impl AsRef<Path>) -> Self {
        Self::open_with_clock(path, Arc::new(SystemClock))
    }

    pub fn open_with_clock(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Self {
        let path = path.as_ref();
        let fallback = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let mut job = Self::new(Arc::new(FsStorage::new(path)), clock, fallback);
        if let Ok(manifest) = job.read_manifest() {
            job.job_id = manifest.job_id;
        }
        job
    }

    pub fn in_memory(storage: MemStorage, clock: Arc<dyn Clock>, job_id: impl Into<String>) -> Self {
        Self::new(Arc::new(storage), clock, job_id)
    }

    pub fn with_lock_options(mut self, options: LockOptions) -> Self {
        self.lock_options = options;
        self
    }

    pub fn lock_options(&self) -> &LockOptions {
        &self.lock_options
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn location(&self) -> String {
        self.storage.location()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn storage(&self) -> &Arc<dyn Storage> {
        &self.storage
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    fn io(&self, name: &str) -> impl FnOnce(io::Error) -> CoordError + '_ {
        let path = format!("{}/{}", self.storage.location(), name);
        move |source| CoordError::Io { path, source }
    }

    // ---- signal ----

    pub fn signal_set(&self) -> Result<(), CoordError> {
        self.storage.create_new(SIGNAL_FILE, b"").map(|_| ()).map_err(self.io(SIGNAL_FILE))
    }

    pub fn signal_clear(&self) -> Result<(), CoordError> {
        self.storage.remove(SIGNAL_FILE).map(|_| ()).map_err(self.io(SIGNAL_FILE))
    }

    pub fn signal_exists(&self) -> Result<bool, CoordError> {
        self.storage.exists(SIGNAL_FILE).map_err(self.io(SIGNAL_FILE))
    }

    // ---- best state ----

    pub fn is_initialized(&self) -> Result<bool, CoordError> {
        self.storage.exists(BEST_FILE).map_err(self.io(BEST_FILE))
    }

    pub fn read_best(&self) -> Result<BestState, CoordError> {
        match self.storage.read(BEST_FILE).map_err(self.io(BEST_FILE))? {
            Some(bytes) => BestState::decode(&bytes),
            None => Err(CoordError::NotInitialized { path: self.location() }),
        }
    }

    /// Writes the version-0 record. Without `force` this is create-exclusive
    /// so two concurrent initializers cannot both succeed.
    pub fn write_initial(&self, state: &BestState, force: bool) -> Result<(), CoordError> {
        if state.version != 0 || state.estimated {
            return Err(CoordError::Contract("initial record must be version 0 and exact".into()));
        }
        let bytes = state.encode();
        if force {
            self.storage.write_atomic(BEST_FILE, bytes.as_bytes()).map_err(self.io(BEST_FILE))?;
            self.storage.remove(CHANGES_FILE).map_err(self.io(CHANGES_FILE))?;
            Ok(())
        } else if self.storage.create_new(BEST_FILE, bytes.as_bytes()).map_err(self.io(BEST_FILE))? {
            Ok(())
        } else {
            Err(CoordError::AlreadyInitialized { path: self.location() })
        }
    }

    /// Compare-and-swap on `best.dat`.
    pub fn commit_update(&self, expected_version: u64, new_state: &BestState) -> Result<CommitResult, CoordError> {
        self.commit_update_logged(expected_version, new_state, None)
    }

    /// [`commit_update`](Self::commit_update) that also appends `change` to
    /// `changes.log` while the lock is held.
    pub fn commit_update_logged(
        &self,
        expected_version: u64,
        new_state: &BestState,
        change: Option<&ChangeRecord>,
    ) -> Result<CommitResult, CoordError> {
        if new_state.version != expected_version + 1 {
            return Err(CoordError::Contract(format!(
                "new version {} must be expected version {} + 1",
                new_state.version, expected_version
            )));
        }
        if !new_state.performance.is_finite() {
            return Err(CoordError::Contract("performance must be finite".into()));
        }
        let handle = self.acquire_lock(&new_state.updated_by, self.lock_options.stale_after)?;
        let result = self.commit_locked(expected_version, new_state, change);
        if let Err(e) = self.release_lock(&handle) {
            warn!("{}: failed to release lock: {e}", self.location());
        }
        result
    }

    fn commit_locked(
        &self,
        expected_version: u64,
        new_state: &BestState,
        change: Option<&ChangeRecord>,
    ) -> Result<CommitResult, CoordError> {
        let current = self.read_best()?;
        if current.version != expected_version {
            return Ok(CommitResult::VersionConflict { current });
        }
        self.storage
            .write_atomic(BEST_FILE, new_state.encode().as_bytes())
            .map_err(self.io(BEST_FILE))?;
        if let Some(change) = change {
            if let Err(e) = self.storage.append(CHANGES_FILE, change.encode().as_bytes()) {
                warn!("{}: changes.log append failed: {e}", self.location());
            }
        }
        Ok(CommitResult::Committed)
    }

    /// Unconditional read-modify-write under the lock: `build` receives the
    /// stored record and returns its replacement, whose version is forced to
    /// stored + 1. This is the update discipline of a worker that skips the
    /// second read, kept for regression tests of exactly that failure.
    pub fn overwrite(
        &self,
        owner: &str,
        build: impl FnOnce(&BestState) -> (BestState, Option<ChangeRecord>),
    ) -> Result<BestState, CoordError> {
        let handle = self.acquire_lock(owner, self.lock_options.stale_after)?;
        let result = (|| {
            let current = self.read_best()?;
            let (mut next, mut change) = build(&current);
            next.version = current.version + 1;
            if let Some(c) = change.as_mut() {
                c.version = next.version;
            }
            match self.commit_locked(current.version, &next, change.as_ref())? {
                CommitResult::Committed => Ok(next),
                CommitResult::VersionConflict { .. } => unreachable!("lock held"),
            }
        })();
        if let Err(e) = self.release_lock(&handle) {
            warn!("{}: failed to release lock: {e}", self.location());
        }
        result
    }

    // ---- manifest and logs ----

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<(), CoordError> {
        self.storage
            .write_atomic(MANIFEST_FILE, manifest.encode().as_bytes())
            .map_err(self.io(MANIFEST_FILE))
    }

    pub fn read_manifest(&self) -> Result<Manifest, CoordError> {
        match self.storage.read(MANIFEST_FILE).map_err(self.io(MANIFEST_FILE))? {
            Some(bytes) => Manifest::decode(&bytes),
            None => Err(CoordError::NotInitialized { path: self.location() }),
        }
    }

    /// Parsed `changes.log`. Unparseable lines are skipped: the log is
    /// advisory and may have a torn tail after a crash.
    pub fn read_changes(&self) -> Result<Vec<ChangeRecord>, CoordError> {
        let bytes = self.storage.read(CHANGES_FILE).map_err(self.io(CHANGES_FILE))?;
        let text = bytes.map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
        Ok(text.lines().filter_map(ChangeRecord::decode).collect())
    }

    pub fn run_log_name(worker_id: &str) -> String {
        let safe: String = worker_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("run-{safe}.log")
    }

    pub fn append_run_log(&self, worker_id: &str, line: &str) -> Result<(), CoordError> {
        let name = Self::run_log_name(worker_id);
        self.storage.append(&name, format!("{line}\n").as_bytes()).map_err(self.io(&name))
    }

    /// Contents of every `run-*.log` in the directory.
    pub fn read_run_logs(&self) -> Result<Vec<(String, String)>, CoordError> {
        let names = self.storage.list().map_err(self.io(""))?;
        let mut logs = Vec::new();
        for name in names.into_iter().filter(|n| n.starts_with("run-") && n.ends_with(".log")) {
            if let Some(bytes) = self.storage.read(&name).map_err(self.io(&name))? {
                logs.push((name, String::from_utf8_lossy(&bytes).into_owned()));
            }
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::objective::ConfigVector;

    fn mem_job() -> (JobDirectory, VirtualClock) {
        let clock = VirtualClock::new(100.0);
        (JobDirectory::in_memory(MemStorage::default(), Arc::new(clock.clone()), "t"), clock)
    }

    fn state(version: u64, perf: f64) -> BestState {
        BestState {
            version,
            config: ConfigVector::new(vec![0, 1, 0, version as u32 % 2]),
            performance: perf,
            estimated: false,
            updated_by: "w".into(),
            updated_at: 0.0,
        }
    }

    #[test]
    fn signal_is_idempotent() {
        let (job, _) = mem_job();
        assert!(!job.signal_exists().unwrap());
        job.signal_set().unwrap();
        job.signal_set().unwrap();
        assert!(job.signal_exists().unwrap());
        job.signal_clear().unwrap();
        job.signal_clear().unwrap();
        assert!(!job.signal_exists().unwrap());
    }

    #[test]
    fn read_before_init_is_not_initialized() {
        let (job, _) = mem_job();
        assert!(matches!(job.read_best(), Err(CoordError::NotInitialized { .. })));
    }

    #[test]
    fn init_once() {
        let (job, _) = mem_job();
        job.write_initial(&state(0, 0.5), false).unwrap();
        assert!(matches!(job.write_initial(&state(0, 0.9), false), Err(CoordError::AlreadyInitialized { .. })));
        assert_eq!(job.read_best().unwrap().performance, 0.5);
        job.write_initial(&state(0, 0.9), true).unwrap();
        assert_eq!(job.read_best().unwrap().performance, 0.9);
    }

    #[test]
    fn cas_success_and_failure() {
        let (job, _) = mem_job();
        job.write_initial(&state(0, 0.1), false).unwrap();
        for v in 0..3 {
            assert_eq!(job.commit_update(v, &state(v + 1, 0.2 + v as f64)).unwrap(), CommitResult::Committed);
        }
        assert_eq!(job.read_best().unwrap().version, 3);
        assert_eq!(job.commit_update(3, &state(4, 5.0)).unwrap(), CommitResult::Committed);
        assert_eq!(job.read_best().unwrap().version, 4);

        let before = job.read_best().unwrap();
        match job.commit_update(2, &state(3, 9.0)).unwrap() {
            CommitResult::VersionConflict { current } => assert_eq!(current, before),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(job.read_best().unwrap(), before);
        assert!(!job.storage().exists(LOCK_FILE).unwrap());
    }

    #[test]
    fn commit_requires_consecutive_version() {
        let (job, _) = mem_job();
        job.write_initial(&state(0, 0.1), false).unwrap();
        assert!(matches!(job.commit_update(0, &state(2, 0.2)), Err(CoordError::Contract(_))));
        assert!(matches!(job.commit_update(0, &state(1, f64::NAN)), Err(CoordError::Contract(_))));
    }

    #[test]
    fn logged_commits_append_changes() {
        let (job, _) = mem_job();
        job.write_initial(&state(0, 0.1), false).unwrap();
        let change = ChangeRecord {
            version: 1,
            index: 3,
            new_value: 1,
            delta: 0.25,
            proposer: "w".into(),
            evaluations: 2,
        };
        job.commit_update_logged(0, &state(1, 0.35), Some(&change)).unwrap();
        // a conflicting commit logs nothing
        job.commit_update_logged(0, &state(1, 0.4), Some(&change)).unwrap();
        assert_eq!(job.read_changes().unwrap(), vec![change]);
    }

    #[test]
    fn overwrite_bumps_version_blindly() {
        let (job, _) = mem_job();
        job.write_initial(&state(0, 0.9), false).unwrap();
        let written = job.overwrite("w", |_| (state(0, 0.1), None)).unwrap();
        assert_eq!(written.version, 1);
        assert_eq!(job.read_best().unwrap().performance, 0.1);
    }

    #[test]
    fn run_log_names_are_safe() {
        assert_eq!(JobDirectory::run_log_name("host:12/x"), "run-host_12_x.log");
    }
}

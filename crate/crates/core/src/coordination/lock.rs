//! Exclusive-create lock file with stale-lock breaking.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};

use super::{CoordError, JobDirectory, LockRecord, LOCK_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct LockOptions {
    /// Age in seconds after which a lock may be broken. Written into the
    /// lock file; breakers honor the value recorded there.
    pub stale_after: f64,
    /// Total back-off budget before giving up with `Contention`.
    pub deadline: f64,
    pub initial_backoff: f64,
    pub max_backoff: f64,
}

impl Default for LockOptions {
    fn default() -> Self {
        Self { stale_after: 30.0, deadline: 10.0, initial_backoff: 0.002, max_backoff: 0.1 }
    }
}

#[derive(Debug)]
pub struct LockHandle {
    pub owner: String,
    pub acquired_at: f64,
    pub stale_after: f64,
    contents: String,
    released: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Released,
    /// The lock file was gone or belonged to someone else.
    NotHeld,
}

impl JobDirectory {
    pub fn acquire_lock(&self, owner: &str, stale_after: f64) -> Result<LockHandle, CoordError> {
        let opts = self.lock_options().clone();
        let mut waited = 0.0;
        let mut backoff = opts.initial_backoff;
        loop {
            let now = self.now();
            let record = LockRecord { owner: owner.to_string(), acquired_at: now, stale_after };
            let contents = record.encode();
            if self
                .storage()
                .create_new(LOCK_FILE, contents.as_bytes())
                .map_err(self.io(LOCK_FILE))?
            {
                return Ok(LockHandle {
                    owner: record.owner,
                    acquired_at: now,
                    stale_after,
                    contents,
                    released: AtomicBool::new(false),
                });
            }

            let holder = match self.storage().read(LOCK_FILE).map_err(self.io(LOCK_FILE))? {
                // released between our create and read
                None => continue,
                Some(bytes) => match LockRecord::decode(&bytes) {
                    Some(held) if now - held.acquired_at > held.stale_after => {
                        self.break_lock(&bytes, &held.owner, now - held.acquired_at)?;
                        continue;
                    }
                    Some(held) => held.owner,
                    None => {
                        warn!("{}: unreadable lock file, breaking it", self.location());
                        self.break_lock(&bytes, "<corrupt>", f64::NAN)?;
                        continue;
                    }
                },
            };

            if waited >= opts.deadline {
                return Err(CoordError::Contention { holder, waited });
            }
            self.clock().sleep(backoff);
            waited += backoff;
            backoff = (backoff * 2.0).min(opts.max_backoff);
        }
    }

    /// Moves the lock aside, then checks that what was moved is the stale
    /// lock that was observed. If a fresh lock was grabbed in between it is
    /// put back.
    fn break_lock(&self, observed: &[u8], holder: &str, age: f64) -> Result<(), CoordError> {
        let tomb = format!("{LOCK_FILE}.broken.{:016x}", rand::random::<u64>());
        match self.storage().rename(LOCK_FILE, &tomb) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(self.io(LOCK_FILE)(e)),
        }
        let moved = self.storage().read(&tomb).map_err(self.io(&tomb))?.unwrap_or_default();
        if moved == observed {
            warn!("{}: broke stale lock held by {holder} (age {age:.3}s)", self.location());
        } else {
            debug!("{}: lock changed hands while breaking; restoring", self.location());
            let _ = self.storage().create_new(LOCK_FILE, &moved);
        }
        self.storage().remove(&tomb).map_err(self.io(&tomb))?;
        Ok(())
    }

    pub fn release_lock(&self, handle: &LockHandle) -> Result<ReleaseOutcome, CoordError> {
        let first = !handle.released.swap(true, Ordering::SeqCst);
        let current = self.storage().read(LOCK_FILE).map_err(self.io(LOCK_FILE))?;
        if current.as_deref() == Some(handle.contents.as_bytes()) {
            self.storage().remove(LOCK_FILE).map_err(self.io(LOCK_FILE))?;
            return Ok(ReleaseOutcome::Released);
        }
        if first {
            warn!(
                "{}: lock of {} was broken by another worker; release is a no-op",
                self.location(),
                handle.owner
            );
        }
        Ok(ReleaseOutcome::NotHeld)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, VirtualClock};
    use crate::storage::{MemStorage, Storage};
    use std::sync::Arc;

    fn job() -> (JobDirectory, MemStorage, VirtualClock) {
        let store = MemStorage::default();
        let clock = VirtualClock::new(1000.0);
        let job = JobDirectory::in_memory(store.clone(), Arc::new(clock.clone()), "t");
        (job, store, clock)
    }

    #[test]
    fn acquire_and_release() {
        let (job, store, _) = job();
        let h = job.acquire_lock("a", 30.0).unwrap();
        let rec = LockRecord::decode(&store.read(LOCK_FILE).unwrap().unwrap()).unwrap();
        assert_eq!(rec.owner, "a");
        assert_eq!(rec.acquired_at, 1000.0);
        assert_eq!(job.release_lock(&h).unwrap(), ReleaseOutcome::Released);
        assert!(!job.storage().exists(LOCK_FILE).unwrap());
        assert_eq!(job.release_lock(&h).unwrap(), ReleaseOutcome::NotHeld);
    }

    #[test]
    fn live_lock_times_out_with_contention() {
        let (job, _, clock) = job();
        let _b = job.acquire_lock("b", 30.0).unwrap();
        let start = clock.now();
        match job.acquire_lock("a", 30.0) {
            Err(CoordError::Contention { holder, waited }) => {
                assert_eq!(holder, "b");
                assert!(waited >= job.lock_options().deadline);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(clock.now() - start < 30.0);
    }

    #[test]
    fn backdated_lock_is_broken() {
        let (job, _, clock) = job();
        let stale = LockRecord { owner: "dead".into(), acquired_at: clock.now() - 20.0, stale_after: 2.0 };
        job.storage().create_new(LOCK_FILE, stale.encode().as_bytes()).unwrap();
        let h = job.acquire_lock("a", 2.0).unwrap();
        assert_eq!(h.owner, "a");
        let names = job.storage().list().unwrap();
        assert_eq!(names, vec![LOCK_FILE.to_string()]);
    }

    #[test]
    fn release_after_break_is_noop() {
        let (job, _, clock) = job();
        let old = job.acquire_lock("a", 2.0).unwrap();
        clock.sleep(5.0);
        let fresh = job.acquire_lock("b", 2.0).unwrap();
        assert_eq!(job.release_lock(&old).unwrap(), ReleaseOutcome::NotHeld);
        assert!(job.storage().exists(LOCK_FILE).unwrap());
        assert_eq!(job.release_lock(&fresh).unwrap(), ReleaseOutcome::Released);
    }

    #[test]
    fn corrupt_lock_is_broken() {
        let (job, _, _) = job();
        job.storage().create_new(LOCK_FILE, b"garbage").unwrap();
        assert!(job.acquire_lock("a", 30.0).is_ok());
    }
}

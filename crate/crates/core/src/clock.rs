//! Time sources and cooperative cancellation.
//!
//! Every component that needs "now" or has to wait takes a [`Clock`], so the
//! same code runs against the wall clock in production and against a
//! [`VirtualClock`] in tests and in the simulator.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, ThreadId};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// A source of timestamps in seconds.
pub trait Clock: Send + Sync + fmt::Debug {
    /// Current time in seconds. For the system clock this is Unix time.
    fn now(&self) -> f64;

    /// Blocks (or advances virtual time) for `secs` seconds.
    fn sleep(&self, secs: f64);

    /// Offset added to `now()` to obtain local time-of-day.
    fn utc_offset(&self) -> f64 {
        0.0
    }

    /// Seconds since local midnight.
    fn local_time_of_day(&self) -> f64 {
        (self.now() + self.utc_offset()).rem_euclid(86_400.0)
    }

    /// Lockstep hooks used by [`spawn_on`]; no-ops for real time.
    fn expect_thread(&self) {}
    fn enter_thread(&self) {}
    fn exit_thread(&self) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }

    fn sleep(&self, secs: f64) {
        if secs > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(secs));
        }
    }

    fn utc_offset(&self) -> f64 {
        f64::from(chrono::Local::now().offset().local_minus_utc())
    }
}

type Alarm = (f64, Box<dyn FnOnce() + Send>);

/// Manually driven clock. `sleep` advances time instantly and fires any
/// alarms whose deadline has been reached, in deadline order.
///
/// Threads started through [`spawn_on`] run in lockstep with the thread
/// that drives the clock: their `sleep` parks until the driver moves time
/// past the deadline, and the driver only moves time once every such thread
/// is parked or gone.
#[derive(Clone, Default)]
pub struct VirtualClock {
    inner: Arc<(Mutex<VirtualState>, Condvar)>,
}

#[derive(Default)]
struct VirtualState {
    now: f64,
    alarms: Vec<Alarm>,
    pending: usize,
    participants: HashMap<ThreadId, Option<f64>>,
}

impl VirtualState {
    fn is_settled(&self) -> bool {
        self.pending == 0 && self.participants.values().all(|d| d.is_some_and(|d| d > self.now))
    }

    fn anyone_due(&self) -> bool {
        self.participants.values().flatten().any(|&d| d <= self.now)
    }

    fn earliest_wakeup(&self) -> Option<f64> {
        self.participants.values().flatten().copied().reduce(f64::min)
    }
}

impl fmt::Debug for VirtualClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VirtualClock").field("now", &self.now()).finish()
    }
}

impl VirtualClock {
    pub fn new(start: f64) -> Self {
        let clock = Self::default();
        clock.set(start);
        clock
    }

    fn state(&self) -> MutexGuard<'_, VirtualState> {
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Moves time to `t` without firing alarms. Used by the simulator,
    /// which owns the event order itself.
    pub fn set(&self, t: f64) {
        self.state().now = t;
        self.inner.1.notify_all();
    }

    /// Runs `action` the first time the clock is advanced to or past `at`.
    pub fn at(&self, at: f64, action: impl FnOnce() + Send + 'static) {
        let mut state = self.state();
        state.alarms.push((at, Box::new(action)));
        state.alarms.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    fn settle(&self) {
        let mut state = self.state();
        while !state.is_settled() {
            state = self.inner.1.wait(state).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Advances to `t`, firing due alarms with the clock set to each alarm's
    /// own deadline and waking lockstep threads at theirs.
    pub fn advance_to(&self, t: f64) {
        loop {
            self.settle();
            let mut state = self.state();
            let wake = state.earliest_wakeup().unwrap_or(f64::INFINITY);
            match state.alarms.first() {
                Some((when, _)) if *when <= t && *when <= wake => {
                    let (when, action) = state.alarms.remove(0);
                    state.now = state.now.max(when);
                    let due = state.anyone_due();
                    drop(state);
                    if due {
                        self.inner.1.notify_all();
                    }
                    action();
                }
                _ => {
                    let step = t.min(wake);
                    state.now = state.now.max(step);
                    let done = state.now >= t;
                    let due = state.anyone_due();
                    drop(state);
                    if due {
                        self.inner.1.notify_all();
                    }
                    if done {
                        self.settle();
                        return;
                    }
                }
            }
        }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        self.state().now
    }

    fn sleep(&self, secs: f64) {
        let me = thread::current().id();
        let mut state = self.state();
        if !state.participants.contains_key(&me) {
            let target = state.now + secs.max(0.0);
            drop(state);
            self.advance_to(target);
            return;
        }
        let deadline = state.now + secs.max(0.0);
        state.participants.insert(me, Some(deadline));
        self.inner.1.notify_all();
        while state.now < deadline {
            state = self.inner.1.wait(state).unwrap_or_else(|e| e.into_inner());
        }
        state.participants.insert(me, None);
    }

    fn expect_thread(&self) {
        self.state().pending += 1;
    }

    fn enter_thread(&self) {
        let mut state = self.state();
        state.pending -= 1;
        state.participants.insert(thread::current().id(), None);
    }

    fn exit_thread(&self) {
        self.state().participants.remove(&thread::current().id());
        self.inner.1.notify_all();
    }
}

/// Spawns `f` on a thread that follows `clock`. For a virtual clock the
/// thread runs in lockstep with the driving thread.
pub fn spawn_on<T, F>(clock: &Arc<dyn Clock>, f: F) -> thread::JoinHandle<T>
where
    T: Send + 'static,
    F: FnOnce() -> T + Send + 'static,
{
    struct Exit(Arc<dyn Clock>);
    impl Drop for Exit {
        fn drop(&mut self) {
            self.0.exit_thread();
        }
    }
    clock.expect_thread();
    let clock = clock.clone();
    thread::spawn(move || {
        clock.enter_thread();
        let _exit = Exit(clock);
        f()
    })
}

/// One-way cancellation flag shared between a watcher and a worker loop.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn alarms_fire_in_order_at_their_deadline() {
        let clock = VirtualClock::new(0.0);
        let seen = Arc::new(Mutex::new(Vec::new()));
        for t in [30.0, 10.0, 20.0] {
            let seen = seen.clone();
            let c = clock.clone();
            clock.at(t, move || seen.lock().unwrap().push((t, c.now())));
        }
        clock.sleep(25.0);
        assert_eq!(*seen.lock().unwrap(), vec![(10.0, 10.0), (20.0, 20.0)]);
        assert_eq!(clock.now(), 25.0);
        clock.sleep(10.0);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn alarm_fires_once() {
        let clock = VirtualClock::new(0.0);
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        clock.at(1.0, move || {
            h.fetch_add(1, Ordering::SeqCst);
        });
        clock.sleep(2.0);
        clock.sleep(2.0);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn lockstep_thread_sees_exact_deadlines() {
        let vc = VirtualClock::new(0.0);
        let clock: Arc<dyn Clock> = Arc::new(vc.clone());
        let c = clock.clone();
        let handle = spawn_on(&clock, move || {
            let mut seen = Vec::new();
            for _ in 0..3 {
                c.sleep(0.4);
                seen.push(c.now());
            }
            seen
        });
        vc.sleep(1.0);
        assert_eq!(vc.now(), 1.0);
        vc.sleep(1.0);
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 3);
        for (got, want) in seen.iter().zip([0.4, 0.8, 1.2]) {
            assert!((got - want).abs() < 1e-12, "{seen:?}");
        }
    }

    #[test]
    fn driver_waits_for_running_participant() {
        let vc = VirtualClock::new(0.0);
        let clock: Arc<dyn Clock> = Arc::new(vc.clone());
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let c = clock.clone();
        let handle = spawn_on(&clock, move || {
            std::thread::sleep(Duration::from_millis(20));
            h.fetch_add(1, Ordering::SeqCst);
            c.sleep(5.0);
            h.fetch_add(1, Ordering::SeqCst);
        });
        vc.sleep(1.0);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        vc.sleep(4.0);
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn time_of_day_wraps() {
        let clock = VirtualClock::new(86_400.0 + 3_600.0);
        assert_eq!(clock.local_time_of_day(), 3_600.0);
    }
}

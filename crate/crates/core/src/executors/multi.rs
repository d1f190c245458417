//! Thread pool sharing one wait-set.
//!
//! Workers take turns holding the wait-set lock. The holder picks the next
//! ready callback from the current snapshot (skipping groups already
//! running), rebuilding the snapshot when it runs dry and blocking on the
//! doorbell when nothing is ready. A worker that finishes a callback clears
//! its group's busy flag, bumps the wait-set generation and rings the
//! doorbell so the current holder re-evaluates readiness.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::runtime::{CallbackRuntime, Shared, WorkerLog};
use crate::transport::Doorbell;

pub(crate) struct MtState {
    pub shared: Arc<Shared>,
    pub doorbell: Arc<Doorbell>,
    pub generation: AtomicU64,
    snapshot: Mutex<VecDeque<usize>>,
    callbacks: Vec<Mutex<CallbackRuntime>>,
    group_of: Vec<usize>,
    group_busy: Vec<AtomicBool>,
}

impl MtState {
    pub fn new(
        shared: Arc<Shared>,
        callbacks: Vec<CallbackRuntime>,
        groups: usize,
        doorbell: Arc<Doorbell>,
    ) -> Self {
        Self {
            shared,
            doorbell,
            generation: AtomicU64::new(0),
            snapshot: Mutex::new(VecDeque::new()),
            group_of: callbacks.iter().map(|c| c.group).collect(),
            callbacks: callbacks.into_iter().map(Mutex::new).collect(),
            group_busy: (0..groups).map(|_| AtomicBool::new(false)).collect(),
        }
    }

    fn busy(&self, cb: usize) -> bool {
        self.group_busy[self.group_of[cb]].load(Ordering::Acquire)
    }

    /// Ready callbacks of idle groups: timers first, then subscriptions,
    /// each in registration order. Also returns the earliest timer deadline.
    fn collect_ready(&self, now: u64) -> (VecDeque<usize>, Option<u64>) {
        let mut timers = VecDeque::new();
        let mut subs = Vec::new();
        let mut deadline: Option<u64> = None;
        for (i, cb) in self.callbacks.iter().enumerate() {
            if self.busy(i) {
                continue;
            }
            let cb = cb.lock().unwrap();
            if cb.is_ready(now) {
                if cb.is_timer() {
                    timers.push_back(i);
                } else {
                    subs.push(i);
                }
            } else if let Some(d) = cb.next_deadline() {
                deadline = Some(deadline.map_or(d, |x: u64| x.min(d)));
            }
        }
        timers.extend(subs);
        (timers, deadline)
    }

    /// Blocks until this worker owns a callback to run, or the executor stops.
    fn next_job(&self) -> Option<(usize, super::runtime::Activation)> {
        let mut snapshot = self.snapshot.lock().unwrap();
        self.shared.counters.shared_lock();
        loop {
            if self.shared.stopping() {
                return None;
            }
            let now = self.shared.clock.now_ns();
            while let Some(i) = snapshot.pop_front() {
                if self.busy(i) {
                    continue;
                }
                if let Some(act) = self.callbacks[i].lock().unwrap().take_activation(now) {
                    self.group_busy[self.group_of[i]].store(true, Ordering::Release);
                    return Some((i, act));
                }
            }
            let seen = self.doorbell.rings();
            self.generation.fetch_add(1, Ordering::AcqRel);
            let (ready, deadline) = self.collect_ready(now);
            if ready.is_empty() {
                self.doorbell.wait(seen, deadline, &self.shared.counters);
            } else {
                *snapshot = ready;
            }
        }
    }

    pub fn work(&self, worker: usize) -> WorkerLog {
        let mut log = WorkerLog::new(worker);
        while let Some((i, act)) = self.next_job() {
            self.callbacks[i]
                .lock()
                .unwrap()
                .execute(act, &self.shared, &mut log);
            self.group_busy[self.group_of[i]].store(false, Ordering::Release);
            self.generation.fetch_add(1, Ordering::AcqRel);
            self.doorbell.ring();
        }
        log
    }
}

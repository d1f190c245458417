use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::runtime::{build_runtimes, CallbackRuntime, Shared, WorkerLog};
use super::ExecError;
use crate::clock::{monotonic_ns, Clock};
use crate::metrics::Counters;
use crate::model::SystemDescription;
use crate::transport::{Domain, Doorbell, Listener};

/// How an idle dispatcher blocks until something may be ready.
pub(crate) enum Waiter {
    /// Private to one thread; queues wake it with `unpark`.
    Park,
    Doorbell(Arc<Doorbell>),
}

impl Waiter {
    pub fn listener(&self) -> Listener {
        match self {
            Waiter::Park => Listener::Thread(thread::current()),
            Waiter::Doorbell(d) => Listener::Doorbell(d.clone()),
        }
    }
}

/// Wait-set loop over a fixed set of callbacks.
///
/// Each cycle snapshots readiness once, runs every ready timer in
/// registration order, then takes one message from every subscription that
/// was non-empty at the snapshot. Work that becomes ready during a cycle is
/// picked up by the next one.
pub struct Dispatcher {
    callbacks: Vec<CallbackRuntime>,
    shared: Arc<Shared>,
    log: WorkerLog,
}

impl Dispatcher {
    /// Standalone dispatcher over all callbacks of `sys`, driven by the
    /// caller through [`Dispatcher::run_cycle`]. Timers are armed at the
    /// clock's current time.
    pub fn new(
        sys: &SystemDescription,
        domain: &Domain,
        clock: Clock,
        payload_bytes: usize,
    ) -> Result<Self, ExecError> {
        let callbacks = build_runtimes(sys, domain)?;
        let ids = sys
            .callbacks()
            .map(|c| Arc::<str>::from(c.id.as_str()))
            .collect();
        let shared = Arc::new(Shared::new(
            ids,
            Arc::new(Counters::new()),
            clock,
            false,
            vec![0; payload_bytes],
            1,
        ));
        let mut d = Self::from_parts(callbacks, shared, WorkerLog::new(0));
        d.arm();
        Ok(d)
    }

    pub(crate) fn from_parts(
        callbacks: Vec<CallbackRuntime>,
        shared: Arc<Shared>,
        log: WorkerLog,
    ) -> Self {
        Self {
            callbacks,
            shared,
            log,
        }
    }

    pub(crate) fn arm(&mut self) {
        let now = self.shared.clock.now_ns();
        for cb in &mut self.callbacks {
            cb.arm(now);
        }
    }

    pub(crate) fn attach(&self, waiter: &Waiter) {
        for q in self.callbacks.iter().filter_map(|c| c.queue()) {
            if q.attach(waiter.listener()).is_err() {
                panic!("subscription queue {:?} already has a consumer", q.topic());
            }
        }
    }

    pub(crate) fn into_log(self) -> WorkerLog {
        self.log
    }

    pub(crate) fn log_mut(&mut self) -> &mut WorkerLog {
        &mut self.log
    }

    /// Callback ids in registration order.
    pub fn callback_ids(&self) -> Vec<&str> {
        self.callbacks
            .iter()
            .map(|c| &*self.shared.ids[c.idx])
            .collect()
    }

    pub fn any_ready(&self) -> bool {
        let now = self.shared.clock.now_ns();
        self.callbacks.iter().any(|c| c.is_ready(now))
    }

    /// Earliest pending timer expiry.
    pub fn next_deadline(&self) -> Option<u64> {
        self.callbacks
            .iter()
            .filter_map(|c| c.next_deadline())
            .min()
    }

    /// Executions so far, indexed like [`Dispatcher::callback_ids`].
    pub fn executions(&self) -> Vec<u64> {
        self.callbacks
            .iter()
            .map(|c| {
                self.shared.stats[c.idx]
                    .executions
                    .load(std::sync::atomic::Ordering::Relaxed)
            })
            .collect()
    }

    /// Runs one cycle and returns the positions (in registration order) of
    /// the callbacks it executed, in execution order.
    pub fn run_cycle(&mut self) -> Vec<usize> {
        let now = self.shared.clock.now_ns();
        let (timers, subs): (Vec<usize>, Vec<usize>) = (0..self.callbacks.len())
            .filter(|&i| self.callbacks[i].is_ready(now))
            .partition(|&i| self.callbacks[i].is_timer());
        let mut ran = Vec::with_capacity(timers.len() + subs.len());
        for i in timers.into_iter().chain(subs) {
            if self.shared.stopping() {
                break;
            }
            let cb = &mut self.callbacks[i];
            if let Some(act) = cb.take_activation(now) {
                cb.execute(act, &self.shared, &mut self.log);
                ran.push(i);
            }
        }
        ran
    }

    /// Loops until the executor is told to stop.
    pub(crate) fn spin(&mut self, waiter: &Waiter) {
        let counters = self.shared.counters.clone();
        while !self.shared.stopping() {
            let seen = match waiter {
                Waiter::Doorbell(d) => d.rings(),
                Waiter::Park => 0,
            };
            if self.any_ready() {
                self.run_cycle();
                continue;
            }
            let deadline = self.next_deadline();
            match waiter {
                Waiter::Doorbell(d) => d.wait(seen, deadline, &counters),
                Waiter::Park => match deadline {
                    None => {
                        counters.thread_park();
                        thread::park();
                    }
                    Some(deadline) => {
                        let now = monotonic_ns();
                        if deadline > now {
                            counters.timer_park();
                            thread::park_timeout(Duration::from_nanos(deadline - now));
                        }
                    }
                },
            }
        }
    }
}

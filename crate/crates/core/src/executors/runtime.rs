//! Per-callback execution state and the bookkeeping every executor shares.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::ExecError;
use crate::clock::{busy_work, Clock};
use crate::metrics::Counters;
use crate::model::{CallbackKind, Handler, Invocation, SchedAttr, SystemDescription};
use crate::schedctl::EnforcementOutcome;
use crate::transport::{Domain, Message, Publisher, SubscriptionQueue};

thread_local! {
    static IN_HANDLER: Cell<bool> = const { Cell::new(false) };
    static TID: Cell<i32> = const { Cell::new(0) };
}

/// True while the calling thread is inside a callback handler.
pub fn in_handler() -> bool {
    IN_HANDLER.with(Cell::get)
}

/// Kernel thread id of the calling thread.
pub fn current_tid() -> i32 {
    TID.with(|t| {
        if t.get() == 0 {
            // SAFETY: gettid has no preconditions.
            t.set(unsafe { libc::syscall(libc::SYS_gettid) } as i32);
        }
        t.get()
    })
}

pub(crate) const NO_CALLBACK: usize = usize::MAX;

#[derive(Debug, Default)]
pub(crate) struct CallbackCounters {
    pub executions: AtomicU64,
    pub overruns: AtomicU64,
    pub busy_ns: AtomicU64,
    pub active: AtomicU64,
    pub max_concurrency: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerFailure {
    pub callback: String,
    pub message: String,
}

/// State shared by an executor's threads and its control handle.
pub(crate) struct Shared {
    pub stop: AtomicBool,
    pub ids: Vec<Arc<str>>,
    pub stats: Vec<CallbackCounters>,
    pub failure: Mutex<Option<HandlerFailure>>,
    pub counters: Arc<Counters>,
    pub clock: Clock,
    pub trace: bool,
    pub payload: Vec<u8>,
    /// Callback currently executing on each worker, or `NO_CALLBACK`.
    pub worker_current: Vec<AtomicUsize>,
}

impl Shared {
    pub fn new(
        ids: Vec<Arc<str>>,
        counters: Arc<Counters>,
        clock: Clock,
        trace: bool,
        payload: Vec<u8>,
        workers: usize,
    ) -> Self {
        Self {
            stop: AtomicBool::new(false),
            stats: ids.iter().map(|_| CallbackCounters::default()).collect(),
            ids,
            failure: Mutex::new(None),
            counters,
            clock,
            trace,
            payload,
            worker_current: (0..workers)
                .map(|_| AtomicUsize::new(NO_CALLBACK))
                .collect(),
        }
    }

    pub fn stopping(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }
}

/// One execution interval, recorded when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub callback: usize,
    pub tid: i32,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// Facts a worker thread collects privately and hands over when joined.
#[derive(Debug, Default)]
pub(crate) struct WorkerLog {
    pub worker: usize,
    pub tid: i32,
    pub executed: BTreeSet<usize>,
    pub trace: Vec<ExecutionRecord>,
    pub enforcement: BTreeMap<usize, EnforcementOutcome>,
}

impl WorkerLog {
    pub fn new(worker: usize) -> Self {
        Self {
            worker,
            tid: current_tid(),
            ..Default::default()
        }
    }
}

pub(crate) enum Source {
    Timer {
        period_ns: u64,
        phase_ns: u64,
        next_deadline_ns: u64,
    },
    Subscription {
        queue: Arc<SubscriptionQueue>,
    },
}

pub(crate) enum Activation {
    Timer,
    Message(Arc<Message>),
}

pub(crate) struct CallbackRuntime {
    pub idx: usize,
    pub group: usize,
    pub source: Source,
    pub handler: Handler,
    pub publishers: Vec<Publisher>,
    pub sched: Option<SchedAttr>,
}

impl CallbackRuntime {
    pub fn is_timer(&self) -> bool {
        matches!(self.source, Source::Timer { .. })
    }

    pub fn queue(&self) -> Option<&Arc<SubscriptionQueue>> {
        match &self.source {
            Source::Subscription { queue } => Some(queue),
            Source::Timer { .. } => None,
        }
    }

    /// Sets the first expiry to one period (plus phase) after `start_ns`.
    pub fn arm(&mut self, start_ns: u64) {
        if let Source::Timer {
            period_ns,
            phase_ns,
            next_deadline_ns,
        } = &mut self.source
        {
            *next_deadline_ns = start_ns + *phase_ns + *period_ns;
        }
    }

    pub fn next_deadline(&self) -> Option<u64> {
        match self.source {
            Source::Timer {
                next_deadline_ns, ..
            } => Some(next_deadline_ns),
            Source::Subscription { .. } => None,
        }
    }

    pub fn is_ready(&self, now_ns: u64) -> bool {
        match &self.source {
            Source::Timer {
                next_deadline_ns, ..
            } => *next_deadline_ns <= now_ns,
            Source::Subscription { queue } => !queue.is_empty(),
        }
    }

    /// Consumes one pending activation. Timers advance to their next
    /// absolute deadline, so a late timer stays ready until it catches up.
    pub fn take_activation(&mut self, now_ns: u64) -> Option<Activation> {
        match &mut self.source {
            Source::Timer {
                period_ns,
                next_deadline_ns,
                ..
            } => {
                if *next_deadline_ns > now_ns {
                    return None;
                }
                *next_deadline_ns += *period_ns;
                Some(Activation::Timer)
            }
            Source::Subscription { queue } => queue.take().map(Activation::Message),
        }
    }

    /// Runs the handler, then publishes on every publication of this callback.
    pub fn execute(&mut self, act: Activation, shared: &Shared, log: &mut WorkerLog) {
        let stats = &shared.stats[self.idx];
        let active = stats.active.fetch_add(1, Ordering::AcqRel) + 1;
        stats.max_concurrency.fetch_max(active, Ordering::AcqRel);
        if let Some(slot) = shared.worker_current.get(log.worker) {
            slot.store(self.idx, Ordering::Release);
        }

        let delivered_before = self.queue().map(|q| q.delivered());
        let start = shared.clock.now_ns();
        let message = match &act {
            Activation::Message(m) => Some(m.as_ref()),
            Activation::Timer => None,
        };

        IN_HANDLER.with(|f| f.set(true));
        let result = catch_unwind(AssertUnwindSafe(|| match &self.handler {
            Handler::BusyWork { duration_ns } => busy_work(*duration_ns),
            Handler::Custom(h) => (h.0)(&Invocation {
                callback: &shared.ids[self.idx],
                message,
                started_ns: start,
            }),
        }));
        IN_HANDLER.with(|f| f.set(false));

        match result {
            Ok(()) => {
                for p in &mut self.publishers {
                    p.publish(&shared.payload);
                }
            }
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".into());
                log::error!(
                    "callback {} panicked: {message}; stopping executor",
                    shared.ids[self.idx]
                );
                shared
                    .failure
                    .lock()
                    .unwrap()
                    .get_or_insert(HandlerFailure {
                        callback: shared.ids[self.idx].to_string(),
                        message,
                    });
                shared.stop.store(true, Ordering::Release);
            }
        }
        let end = shared.clock.now_ns();

        let overruns = match (&self.source, delivered_before) {
            (
                Source::Timer {
                    period_ns,
                    next_deadline_ns,
                    ..
                },
                _,
            ) => expiries_between(*next_deadline_ns, *period_ns, start, end),
            (Source::Subscription { queue }, Some(before)) => queue.delivered() - before,
            _ => 0,
        };

        stats.executions.fetch_add(1, Ordering::Relaxed);
        stats.busy_ns.fetch_add(end - start, Ordering::Relaxed);
        if overruns > 0 {
            stats.overruns.fetch_add(overruns, Ordering::Relaxed);
        }
        stats.active.fetch_sub(1, Ordering::AcqRel);
        if let Some(slot) = shared.worker_current.get(log.worker) {
            slot.store(NO_CALLBACK, Ordering::Release);
        }
        log.executed.insert(self.idx);
        if shared.trace {
            log.trace.push(ExecutionRecord {
                callback: self.idx,
                tid: log.tid,
                start_ns: start,
                end_ns: end,
            });
        }
    }
}

/// Number of expiries `first + k*period` (k >= 0) with `start < t <= end`.
pub(crate) fn expiries_between(first: u64, period: u64, start: u64, end: u64) -> u64 {
    if end < first || period == 0 {
        return 0;
    }
    let upto_end = (end - first) / period + 1;
    let upto_start = if start < first {
        0
    } else {
        (start - first) / period + 1
    };
    upto_end - upto_start
}

/// Builds runtimes for every callback of `sys` in registration order,
/// registering its topics and queues on `domain`.
pub(crate) fn build_runtimes(
    sys: &SystemDescription,
    domain: &Domain,
) -> Result<Vec<CallbackRuntime>, ExecError> {
    let transport = |e: crate::transport::TransportError| ExecError::Transport(e.to_string());
    for t in &sys.topics {
        domain.register_topic(t).map_err(transport)?;
    }
    let group_index: BTreeMap<&str, usize> = sys
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id.as_str(), i))
        .collect();

    let mut out = Vec::new();
    for (idx, cb) in sys.callbacks().enumerate() {
        let source = match &cb.kind {
            CallbackKind::Timer {
                period_ns,
                phase_ns,
            } => Source::Timer {
                period_ns: *period_ns,
                phase_ns: *phase_ns,
                next_deadline_ns: 0,
            },
            CallbackKind::Subscription { topic, depth } => {
                let id = domain.register_topic(topic).map_err(transport)?;
                Source::Subscription {
                    queue: domain.subscribe(&id, *depth).map_err(transport)?,
                }
            }
        };
        let publishers = sys
            .publications_of(&cb.id)
            .map(|t| {
                let id = domain.register_topic(t).map_err(transport)?;
                domain.publisher(&id).map_err(transport)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let group = *group_index.get(cb.group.as_str()).ok_or_else(|| {
            ExecError::Model(format!("callback {} has unknown group {}", cb.id, cb.group))
        })?;
        out.push(CallbackRuntime {
            idx,
            group,
            source,
            handler: cb.handler.clone(),
            publishers,
            sched: cb.sched.clone(),
        });
    }
    Ok(out)
}

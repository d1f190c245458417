//! Executors: single-threaded, multi-threaded and callback-isolated.
//!
//! All three run the same callbacks with the same semantics (timers on
//! absolute deadlines, one message per subscription execution, publications
//! after the handler returns). They differ in how callbacks map to threads:
//!
//! * single-threaded: one thread runs a wait-set loop over every callback;
//! * multi-threaded: a pool shares one wait-set under a lock;
//! * callback-isolated: one thread per callback group, each blocking only
//!   on its own timers and queues, with no lock shared between them. When a
//!   callback carries a [`SchedAttr`](crate::model::SchedAttr), its thread
//!   applies it before running anything.

mod dispatcher;
mod multi;
mod runtime;

pub use dispatcher::Dispatcher;
pub use runtime::{current_tid, in_handler, ExecutionRecord, HandlerFailure};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{build_graph, validate_isolation_constraints, GraphOptions, SystemDescription};
use crate::schedctl::{apply_to_current_thread, core_count, EnforcementOutcome};
use crate::transport::{Domain, Doorbell, Listener};
use dispatcher::Waiter;
use multi::MtState;
use runtime::{build_runtimes, Shared, WorkerLog, NO_CALLBACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecutorKind {
    #[serde(rename = "ste", alias = "single_threaded")]
    SingleThreaded,
    #[serde(rename = "mte", alias = "multi_threaded")]
    MultiThreaded,
    #[serde(rename = "cie", alias = "callback_isolated")]
    CallbackIsolated,
}

impl ExecutorKind {
    pub const ALL: [ExecutorKind; 3] = [
        ExecutorKind::SingleThreaded,
        ExecutorKind::MultiThreaded,
        ExecutorKind::CallbackIsolated,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ExecutorKind::SingleThreaded => "ste",
            ExecutorKind::MultiThreaded => "mte",
            ExecutorKind::CallbackIsolated => "cie",
        }
    }
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ExecutorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ste" | "single" | "single_threaded" => Ok(ExecutorKind::SingleThreaded),
            "mte" | "multi" | "multi_threaded" => Ok(ExecutorKind::MultiThreaded),
            "cie" | "isolated" | "callback_isolated" => Ok(ExecutorKind::CallbackIsolated),
            other => Err(format!(
                "unknown executor {other:?} (expected ste, mte or cie)"
            )),
        }
    }
}

/// Threads used by a multi-threaded executor when no count is given.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone)]
pub struct ExecutorOptions {
    /// Pool size for the multi-threaded executor.
    pub workers: Option<usize>,
    /// Callback-isolated only: refuse groups with more than one member.
    pub strict: bool,
    /// Record every execution interval.
    pub trace: bool,
    /// Size of the payload published after each execution.
    pub payload_bytes: usize,
    pub shutdown_grace: Duration,
    pub clock: Clock,
}

impl Default for ExecutorOptions {
    fn default() -> Self {
        Self {
            workers: None,
            strict: true,
            trace: false,
            payload_bytes: 0,
            shutdown_grace: Duration::from_secs(2),
            clock: Clock::Monotonic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("invalid system: {0}")]
    Model(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("isolation constraints violated: {0}")]
    Constraint(String),
    #[error("invalid scheduling attributes for {callback}: {message}")]
    InvalidSched { callback: String, message: String },
    #[error("multi-threaded executor needs at least one worker")]
    NoWorkers,
    #[error("failed to spawn executor thread: {0}")]
    Spawn(String),
    #[error("callback {callback} did not return within the shutdown grace period")]
    Timeout { callback: String },
    #[error("executor thread panicked outside a handler")]
    WorkerPanicked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackStats {
    pub id: String,
    pub executions: u64,
    pub overruns: u64,
    pub busy_ns: u64,
    /// Most simultaneous executions ever observed.
    pub max_concurrency: u64,
    /// Kernel thread ids that ran this callback.
    pub thread_ids: BTreeSet<i32>,
    pub enforcement: Option<EnforcementOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorStats {
    pub kind: ExecutorKind,
    pub threads: usize,
    pub callbacks: Vec<CallbackStats>,
    pub failure: Option<HandlerFailure>,
    /// Multi-threaded only: how often the wait-set was rebuilt or invalidated.
    pub wait_set_generations: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<ExecutionRecord>,
}

impl ExecutorStats {
    pub fn callback(&self, id: &str) -> Option<&CallbackStats> {
        self.callbacks.iter().find(|c| c.id == id)
    }

    /// Callbacks whose requested scheduling could not be applied.
    pub fn fallback_count(&self) -> u64 {
        self.callbacks
            .iter()
            .filter(|c| c.enforcement.as_ref().is_some_and(|e| !e.is_applied()))
            .count() as u64
    }

    pub fn total_executions(&self) -> u64 {
        self.callbacks.iter().map(|c| c.executions).sum()
    }
}

struct Worker {
    handle: JoinHandle<WorkerLog>,
}

/// Running executor. Dropping it shuts it down.
pub struct ExecutorHandle {
    kind: ExecutorKind,
    shared: Arc<Shared>,
    workers: Vec<Worker>,
    wakers: Vec<Listener>,
    mt: Option<Arc<MtState>>,
    grace: Duration,
    outcome: Option<Result<ExecutorStats, ExecError>>,
}

impl fmt::Debug for ExecutorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutorHandle")
            .field("kind", &self.kind)
            .field("threads", &self.workers.len())
            .finish()
    }
}

fn spawn_thread<F>(name: String, f: F) -> Result<JoinHandle<WorkerLog>, ExecError>
where
    F: FnOnce() -> WorkerLog + Send + 'static,
{
    thread::Builder::new()
        .name(name)
        .spawn(f)
        .map_err(|e| ExecError::Spawn(e.to_string()))
}

/// Starts `kind` over every callback of `sys`, registering topics and
/// subscriptions on `domain`. Timers are armed at a common start time.
pub fn spawn(
    kind: ExecutorKind,
    sys: &SystemDescription,
    domain: &Domain,
    opts: ExecutorOptions,
) -> Result<ExecutorHandle, ExecError> {
    assert!(
        !in_handler(),
        "executors cannot be started from inside a callback"
    );
    let mut sys = sys.clone();
    sys.normalize()
        .map_err(|e| ExecError::Model(e.to_string()))?;

    if kind == ExecutorKind::CallbackIsolated {
        if opts.strict {
            let graph = build_graph(&sys, GraphOptions::default())
                .map_err(|e| ExecError::Model(e.to_string()))?;
            let report = validate_isolation_constraints(&sys, &graph);
            let shared: Vec<String> = report.shared_groups().map(|v| v.to_string()).collect();
            if !shared.is_empty() {
                return Err(ExecError::Constraint(shared.join("; ")));
            }
        }
        let cores = core_count();
        for cb in sys.callbacks() {
            if let Some(attr) = &cb.sched {
                crate::model::validate_sched_attr(attr, Some(cores)).map_err(|v| {
                    ExecError::InvalidSched {
                        callback: cb.id.clone(),
                        message: v
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join("; "),
                    }
                })?;
            }
        }
    }

    let workers = match kind {
        ExecutorKind::SingleThreaded => 1,
        ExecutorKind::MultiThreaded => opts.workers.unwrap_or_else(default_workers),
        ExecutorKind::CallbackIsolated => {
            sys.groups.iter().filter(|g| !g.members.is_empty()).count()
        }
    };
    if workers == 0 && kind == ExecutorKind::MultiThreaded {
        return Err(ExecError::NoWorkers);
    }

    let mut callbacks = build_runtimes(&sys, domain)?;
    let ids = sys
        .callbacks()
        .map(|c| Arc::<str>::from(c.id.as_str()))
        .collect();
    let shared = Arc::new(Shared::new(
        ids,
        domain.counters().clone(),
        opts.clock.clone(),
        opts.trace,
        vec![0; opts.payload_bytes],
        workers,
    ));
    let start = shared.clock.now_ns();
    for cb in &mut callbacks {
        cb.arm(start);
    }

    let mut handle = ExecutorHandle {
        kind,
        shared: shared.clone(),
        workers: Vec::new(),
        wakers: Vec::new(),
        mt: None,
        grace: opts.shutdown_grace,
        outcome: None,
    };

    let spawned = match kind {
        ExecutorKind::SingleThreaded => {
            let doorbell = Arc::new(Doorbell::new());
            let waiter = Waiter::Doorbell(doorbell.clone());
            handle.wakers.push(Listener::Doorbell(doorbell));
            let mut d = Dispatcher::from_parts(callbacks, shared, WorkerLog::default());
            d.attach(&waiter);
            spawn_thread("isolexec-ste".into(), move || {
                *d.log_mut() = WorkerLog::new(0);
                d.spin(&waiter);
                d.into_log()
            })
            .map(|h| handle.workers.push(Worker { handle: h }))
        }
        ExecutorKind::MultiThreaded => {
            let doorbell = Arc::new(Doorbell::new());
            for q in callbacks.iter().filter_map(|c| c.queue()) {
                let _ = q.attach(Listener::Doorbell(doorbell.clone()));
            }
            handle.wakers.push(Listener::Doorbell(doorbell.clone()));
            let state = Arc::new(MtState::new(shared, callbacks, sys.groups.len(), doorbell));
            handle.mt = Some(state.clone());
            (0..workers).try_for_each(|w| {
                let state = state.clone();
                let h = spawn_thread(format!("isolexec-mte{w}"), move || state.work(w))?;
                handle.workers.push(Worker { handle: h });
                Ok(())
            })
        }
        ExecutorKind::CallbackIsolated => {
            let mut by_group: Vec<Vec<_>> = (0..sys.groups.len()).map(|_| Vec::new()).collect();
            for cb in callbacks {
                by_group[cb.group].push(cb);
            }
            by_group.retain(|g| !g.is_empty());
            by_group
                .into_iter()
                .enumerate()
                .try_for_each(|(w, members)| {
                    let shared = shared.clone();
                    let name = format!("cie-{}", shared.ids[members[0].idx]);
                    let h = spawn_thread(name, move || isolated_thread(w, members, shared))?;
                    handle.wakers.push(Listener::Thread(h.thread().clone()));
                    handle.workers.push(Worker { handle: h });
                    Ok(())
                })
        }
    };
    match spawned {
        Ok(()) => Ok(handle),
        Err(e) => {
            let _ = handle.shutdown();
            Err(e)
        }
    }
}

fn isolated_thread(
    worker: usize,
    members: Vec<runtime::CallbackRuntime>,
    shared: Arc<Shared>,
) -> WorkerLog {
    let mut log = WorkerLog::new(worker);
    if let Some(attr) = members.iter().find_map(|c| c.sched.clone()) {
        match apply_to_current_thread(&attr) {
            Ok(outcome) => {
                if !outcome.is_applied() {
                    log::warn!(
                        "thread {} runs with fallback scheduling: {outcome:?}",
                        log.tid
                    );
                }
                for cb in members.iter().filter(|c| c.sched.is_some()) {
                    log.enforcement.insert(cb.idx, outcome.clone());
                }
            }
            Err(e) => log::warn!("scheduling not applied: {e}"),
        }
    }
    let waiter = Waiter::Park;
    let mut d = Dispatcher::from_parts(members, shared, log);
    d.attach(&waiter);
    d.spin(&waiter);
    d.into_log()
}

impl ExecutorHandle {
    pub fn kind(&self) -> ExecutorKind {
        self.kind
    }

    /// Threads started by this executor.
    pub fn thread_count(&self) -> usize {
        self.workers.len()
    }

    pub fn callback_ids(&self) -> Vec<&str> {
        self.shared.ids.iter().map(|s| &**s).collect()
    }

    /// Set once a handler panicked; the executor stops dispatching.
    pub fn failure(&self) -> Option<HandlerFailure> {
        self.shared.failure.lock().unwrap().clone()
    }

    /// Live counters. Thread ids and enforcement outcomes are only known
    /// after shutdown.
    pub fn snapshot(&self) -> Vec<CallbackStats> {
        self.shared
            .ids
            .iter()
            .zip(&self.shared.stats)
            .map(|(id, s)| CallbackStats {
                id: id.to_string(),
                executions: s.executions.load(Ordering::Relaxed),
                overruns: s.overruns.load(Ordering::Relaxed),
                busy_ns: s.busy_ns.load(Ordering::Relaxed),
                max_concurrency: s.max_concurrency.load(Ordering::Relaxed),
                thread_ids: BTreeSet::new(),
                enforcement: None,
            })
            .collect()
    }

    /// Stops dispatching, waits up to the grace period for running handlers
    /// and returns the final statistics. Calling it again returns the same
    /// result.
    pub fn shutdown(&mut self) -> Result<ExecutorStats, ExecError> {
        assert!(
            !in_handler(),
            "an executor cannot be shut down from inside a callback"
        );
        if let Some(done) = &self.outcome {
            return done.clone();
        }
        self.shared.stop.store(true, Ordering::Release);
        for w in &self.wakers {
            w.notify();
        }
        let deadline = Instant::now() + self.grace;
        let mut logs = Vec::new();
        let mut error = None;
        for (w, worker) in self.workers.drain(..).enumerate() {
            while !worker.handle.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(1));
            }
            if !worker.handle.is_finished() {
                let current = self
                    .shared
                    .worker_current
                    .get(w)
                    .map_or(NO_CALLBACK, |c| c.load(Ordering::Acquire));
                let callback = self
                    .shared
                    .ids
                    .get(current)
                    .map_or_else(|| "<idle>".to_string(), |s| s.to_string());
                log::error!("executor thread stuck in {callback}; detaching it");
                error.get_or_insert(ExecError::Timeout { callback });
                continue;
            }
            match worker.handle.join() {
                Ok(log) => logs.push(log),
                Err(_) => {
                    error.get_or_insert(ExecError::WorkerPanicked);
                }
            }
        }
        let threads = logs.len();
        let result = match error {
            Some(e) => Err(e),
            None => Ok(self.collect(logs, threads)),
        };
        self.outcome = Some(result.clone());
        result
    }

    fn collect(&self, logs: Vec<WorkerLog>, threads: usize) -> ExecutorStats {
        let mut callbacks = self.snapshot();
        let mut trace = Vec::new();
        for log in logs {
            for &i in &log.executed {
                callbacks[i].thread_ids.insert(log.tid);
            }
            for (i, outcome) in log.enforcement {
                callbacks[i].enforcement = Some(outcome);
            }
            trace.extend(log.trace);
        }
        trace.sort_by_key(|r| (r.start_ns, r.callback));
        ExecutorStats {
            kind: self.kind,
            threads,
            callbacks,
            failure: self.failure(),
            wait_set_generations: self
                .mt
                .as_ref()
                .map_or(0, |m| m.generation.load(Ordering::Relaxed)),
            trace,
        }
    }
}

impl Drop for ExecutorHandle {
    fn drop(&mut self) {
        if self.outcome.is_none() && !in_handler() {
            let _ = self.shutdown();
        }
    }
}

//! Overhead benchmark: a publisher node with N timer callbacks and a
//! subscriber node with N subscription callbacks, one topic and one group per
//! pair, run under a chosen executor in one process or split across two.
//!
//! Timers are spread evenly over the period (timer `i` gets phase
//! `slot(i) * period / N`, with `slot` a seeded permutation), so executors
//! that multiplex callbacks cannot absorb all N firings in one wake-up.
//!
//! In inter-process mode the subscriber runs in a child process started
//! from the same binary (`run --role subscriber`), with its cell handed over
//! in the `ISOLEXEC_CELL` environment variable; its samples come back as
//! JSON on stdout and rates are summed over both processes.

pub mod report;
mod sweep;

pub use sweep::{
    ratio_report, read_sweep_csv, sweep, write_sweep_csv, CellRatio, Flatness, MaxRatio, Metric,
    RatioReport, SweepCell, SweepPlan, SweepRow, SWEEP_CSV_HEADER,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::os::unix::net::UnixListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executors::{
    self, CallbackStats, ExecError, ExecutorHandle, ExecutorKind, ExecutorOptions, ExecutorStats,
};
use crate::metrics::{aggregate, sample_for, MetricsError, MetricsSample, RateReport};
use crate::model::{
    CallbackGroup, CallbackKind, CallbackSpec, Handler, NodeSpec, SchedAttr, SystemDescription,
};
use crate::schedctl::EnforcementOutcome;
use crate::transport::Domain;

pub const CELL_ENV: &str = "ISOLEXEC_CELL";
pub const MIN_DURATION_S: f64 = 5.0;
pub const SAMPLE_CADENCE: Duration = Duration::from_millis(100);
pub const PUBLISHER_NODE: &str = "publisher";
pub const SUBSCRIBER_NODE: &str = "subscriber";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessMode {
    Intra,
    Inter,
}

impl ProcessMode {
    pub const ALL: [ProcessMode; 2] = [ProcessMode::Intra, ProcessMode::Inter];
}

impl fmt::Display for ProcessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProcessMode::Intra => "intra",
            ProcessMode::Inter => "inter",
        })
    }
}

impl FromStr for ProcessMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intra" => Ok(ProcessMode::Intra),
            "inter" => Ok(ProcessMode::Inter),
            other => Err(format!(
                "unknown process mode {other:?} (expected intra or inter)"
            )),
        }
    }
}

/// Conditions of one benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub executor: ExecutorKind,
    /// Multi-threaded pool size; hardware concurrency when unset.
    pub workers: Option<usize>,
    pub n_callbacks: usize,
    pub process_mode: ProcessMode,
    pub publish_period_ns: u64,
    pub duration_s: f64,
    /// Run time before measurement starts, excluded from the rates.
    pub warmup_s: f64,
    pub payload_bytes: usize,
    pub handler_busywork_ns: u64,
    /// Scheduling requests keyed by callback id (`pub_3`, `sub_0`, ...).
    pub sched_attrs: BTreeMap<String, SchedAttr>,
    pub seed: u64,
    pub strict: bool,
    pub stagger: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            executor: ExecutorKind::CallbackIsolated,
            workers: None,
            n_callbacks: 1,
            process_mode: ProcessMode::Intra,
            publish_period_ns: 10_000_000,
            duration_s: 30.0,
            warmup_s: 2.0,
            payload_bytes: 8,
            handler_busywork_ns: 0,
            sched_attrs: BTreeMap::new(),
            seed: 0,
            strict: true,
            stagger: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        if self.n_callbacks == 0 {
            return bad("n_callbacks must be at least 1".into());
        }
        if self.duration_s.is_nan() || self.duration_s < MIN_DURATION_S {
            return bad(format!(
                "duration_s must be at least {MIN_DURATION_S}, got {}",
                self.duration_s
            ));
        }
        if self.warmup_s.is_nan() || self.warmup_s < 0.0 {
            return bad(format!(
                "warmup_s must be non-negative, got {}",
                self.warmup_s
            ));
        }
        if self.publish_period_ns == 0 {
            return bad("publish_period_ns must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        let ids: BTreeSet<String> = (0..self.n_callbacks)
            .flat_map(|i| [pub_id(i), sub_id(i)])
            .collect();
        if let Some(unknown) = self.sched_attrs.keys().find(|k| !ids.contains(*k)) {
            return bad(format!("sched_attrs names unknown callback {unknown:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("subscriber process: {0}")]
    Subprocess(String),
    #[error("no single-threaded baseline for {executor} at n={n}, {mode}")]
    MissingBaseline {
        executor: ExecutorKind,
        n: usize,
        mode: ProcessMode,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn pub_id(i: usize) -> String {
    format!("pub_{i}")
}

pub fn sub_id(i: usize) -> String {
    format!("sub_{i}")
}

pub fn topic_name(i: usize) -> String {
    format!("/bench/t{i}")
}

/// Builds the publisher/subscriber pair described by `cfg`.
pub fn benchmark_system(cfg: &ExperimentConfig) -> SystemDescription {
    let n = cfg.n_callbacks;
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rand::rngs::StdRng::seed_from_u64(cfg.seed));
    let handler = Handler::BusyWork {
        duration_ns: cfg.handler_busywork_ns,
    };

    let mut publisher = NodeSpec::new(PUBLISHER_NODE);
    let mut subscriber = NodeSpec::new(SUBSCRIBER_NODE);
    let mut groups = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        let phase_ns = if cfg.stagger {
            cfg.publish_period_ns * slot as u64 / n as u64
        } else {
            0
        };
        let (p, s) = (pub_id(i), sub_id(i));
        let mut timer = CallbackSpec::new(
            &p,
            CallbackKind::Timer {
                period_ns: cfg.publish_period_ns,
                phase_ns,
            },
            format!("g_{p}"),
        )
        .with_handler(handler.clone());
        let mut sub = CallbackSpec::new(
            &s,
            CallbackKind::subscription(topic_name(i)),
            format!("g_{s}"),
        )
        .with_handler(handler.clone());
        timer.sched = cfg.sched_attrs.get(&p).cloned();
        sub.sched = cfg.sched_attrs.get(&s).cloned();
        groups.push(CallbackGroup::new(format!("g_{p}")));
        groups.push(CallbackGroup::new(format!("g_{s}")));
        publisher = publisher.callback(timer).publishes(&p, topic_name(i));
        subscriber = subscriber.callback(sub);
    }
    let mut sys = SystemDescription {
        topics: (0..n).map(topic_name).collect(),
        groups,
        nodes: vec![publisher, subscriber],
    };
    sys.normalize().expect("benchmark system is well formed");
    sys
}

/// Keeps only `node` and the groups its callbacks use.
pub fn node_subsystem(sys: &SystemDescription, node: &str) -> SystemDescription {
    let nodes: Vec<NodeSpec> = sys.nodes.iter().filter(|n| n.id == node).cloned().collect();
    let used: BTreeSet<&str> = nodes
        .iter()
        .flat_map(|n| &n.callbacks)
        .map(|c| c.group.as_str())
        .collect();
    let mut out = SystemDescription {
        topics: sys.topics.clone(),
        groups: sys
            .groups
            .iter()
            .filter(|g| used.contains(g.id.as_str()))
            .map(|g| CallbackGroup {
                members: Vec::new(),
                ..g.clone()
            })
            .collect(),
        nodes,
    };
    out.normalize()
        .expect("subsystem of a valid system is valid");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackSummary {
    pub id: String,
    pub executions: u64,
    /// Executions that completed inside the measurement window.
    pub window_executions: u64,
    pub overruns: u64,
    pub max_concurrency: u64,
    pub thread_ids: BTreeSet<i32>,
    pub enforcement: Option<EnforcementOutcome>,
}

impl CallbackSummary {
    pub fn thread_identities(&self) -> usize {
        self.thread_ids.len()
    }
}

/// Ratios of this cell's switch rates to the single-threaded cell with the
/// same N and mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRatios {
    pub user_kernel_switches: Option<f64>,
    pub context_switches: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub report: RateReport,
    pub callbacks: Vec<CallbackSummary>,
    /// Executor threads over all processes.
    pub threads: usize,
    pub valid: bool,
    pub problems: Vec<String>,
    /// Scheduling was requested but every request fell back.
    pub unenforced: bool,
    pub baseline_ratios: Option<BaselineRatios>,
    /// Raw samples per process, publisher first.
    #[serde(skip)]
    pub samples: Vec<Vec<MetricsSample>>,
}

impl ExperimentResult {
    pub fn callback(&self, id: &str) -> Option<&CallbackSummary> {
        self.callbacks.iter().find(|c| c.id == id)
    }
}

/// What one process measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessRun {
    pub samples: Vec<MetricsSample>,
    pub stats: ExecutorStats,
    pub window_executions: Vec<u64>,
}

/// Cell handed to the subscriber child process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChildCell {
    pub config: ExperimentConfig,
    pub socket: PathBuf,
}

fn executor_options(cfg: &ExperimentConfig) -> ExecutorOptions {
    ExecutorOptions {
        workers: cfg.workers,
        strict: cfg.strict,
        payload_bytes: cfg.payload_bytes,
        ..Default::default()
    }
}

fn measure(
    cfg: &ExperimentConfig,
    domain: &Domain,
    mut handle: ExecutorHandle,
) -> Result<ProcessRun, BenchError> {
    thread::sleep(Duration::from_secs_f64(cfg.warmup_s));
    let before = handle.snapshot();
    let samples = sample_for(
        domain.counters(),
        Duration::from_secs_f64(cfg.duration_s),
        SAMPLE_CADENCE,
    );
    let after = handle.snapshot();
    let stats = handle.shutdown()?;
    let window_executions = before
        .iter()
        .zip(&after)
        .map(|(a, b)| b.executions - a.executions)
        .collect();
    Ok(ProcessRun {
        samples,
        stats,
        window_executions,
    })
}

fn run_in_process(
    cfg: &ExperimentConfig,
    sys: &SystemDescription,
) -> Result<ProcessRun, BenchError> {
    let domain = Domain::new();
    let handle = executors::spawn(cfg.executor, sys, &domain, executor_options(cfg))?;
    let run = measure(cfg, &domain, handle);
    domain.shutdown();
    run
}

/// Runs one cell, starting the subscriber child (if any) from the current
/// executable.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, BenchError> {
    run_experiment_with(cfg, &std::env::current_exe()?)
}

/// Runs one cell; `child_exe` is the binary started for the subscriber
/// process in inter-process mode.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    child_exe: &Path,
) -> Result<ExperimentResult, BenchError> {
    cfg.validate()?;
    let sys = benchmark_system(cfg);
    let runs = match cfg.process_mode {
        ProcessMode::Intra => vec![run_in_process(cfg, &sys)?],
        ProcessMode::Inter => run_pair(cfg, &sys, child_exe)?,
    };
    summarize(cfg, &runs)
}

fn summarize(cfg: &ExperimentConfig, runs: &[ProcessRun]) -> Result<ExperimentResult, BenchError> {
    let fallbacks: u64 = runs.iter().map(|r| r.stats.fallback_count()).sum();
    let sample_sets: Vec<&[MetricsSample]> = runs.iter().map(|r| r.samples.as_slice()).collect();
    let report = aggregate(&sample_sets, fallbacks)?;

    let mut callbacks = Vec::new();
    let mut problems = Vec::new();
    for run in runs {
        if let Some(f) = &run.stats.failure {
            problems.push(format!("callback {} panicked: {}", f.callback, f.message));
        }
        for (c, &window) in run.stats.callbacks.iter().zip(&run.window_executions) {
            let CallbackStats {
                id,
                executions,
                overruns,
                max_concurrency,
                thread_ids,
                enforcement,
                ..
            } = c.clone();
            if executions == 0 {
                problems.push(format!("incomplete run: {id} never executed"));
            }
            callbacks.push(CallbackSummary {
                id,
                executions,
                window_executions: window,
                overruns,
                max_concurrency,
                thread_ids,
                enforcement,
            });
        }
    }
    let requested = callbacks.iter().filter(|c| c.enforcement.is_some()).count();
    Ok(ExperimentResult {
        config: cfg.clone(),
        report,
        threads: runs.iter().map(|r| r.stats.threads).sum(),
        valid: problems.is_empty(),
        problems,
        unenforced: !cfg.sched_attrs.is_empty() && requested > 0 && fallbacks as usize == requested,
        callbacks,
        baseline_ratios: None,
        samples: runs.iter().map(|r| r.samples.clone()).collect(),
    })
}

fn socket_path() -> PathBuf {
    static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    std::env::temp_dir().join(format!("isolexec-{}-{n}.sock", std::process::id()))
}

struct ChildGuard {
    child: Option<Child>,
    socket: PathBuf,
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
        let _ = std::fs::remove_file(&self.socket);
    }
}

fn run_pair(
    cfg: &ExperimentConfig,
    sys: &SystemDescription,
    child_exe: &Path,
) -> Result<Vec<ProcessRun>, BenchError> {
    let socket = socket_path();
    let _ = std::fs::remove_file(&socket);
    let listener = UnixListener::bind(&socket)?;
    let cell = serde_json::to_string(&ChildCell {
        config: cfg.clone(),
        socket: socket.clone(),
    })
    .expect("cell serializes");
    let child = Command::new(child_exe)
        .args(["run", "--role", "subscriber"])
        .env(CELL_ENV, cell)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| {
            BenchError::Subprocess(format!("cannot start {}: {e}", child_exe.display()))
        })?;
    let mut guard = ChildGuard {
        child: Some(child),
        socket: socket.clone(),
    };
    let mut stdout = guard
        .child
        .as_mut()
        .unwrap()
        .stdout
        .take()
        .expect("stdout is piped");
    let reader = thread::spawn(move || {
        let mut out = String::new();
        stdout.read_to_string(&mut out).map(|_| out)
    });

    let domain = Domain::new();
    domain
        .accept_subscriber(&listener, Duration::from_secs(20))
        .map_err(|e| BenchError::Subprocess(e.to_string()))?;
    let publisher = node_subsystem(sys, PUBLISHER_NODE);
    let handle = executors::spawn(cfg.executor, &publisher, &domain, executor_options(cfg))?;
    let parent = measure(cfg, &domain, handle);

    let deadline = Instant::now() + Duration::from_secs_f64(cfg.warmup_s + cfg.duration_s + 30.0);
    let status = loop {
        if let Some(s) = guard.child.as_mut().unwrap().try_wait()? {
            break s;
        }
        if Instant::now() > deadline {
            return Err(BenchError::Subprocess(
                "subscriber process did not finish".into(),
            ));
        }
        thread::sleep(Duration::from_millis(20));
    };
    guard.child = None;
    domain.shutdown();
    let parent = parent?;
    let out = reader
        .join()
        .map_err(|_| BenchError::Subprocess("stdout reader panicked".into()))??;
    if !status.success() {
        return Err(BenchError::Subprocess(format!("exited with {status}")));
    }
    let child: ProcessRun = serde_json::from_str(out.trim())
        .map_err(|e| BenchError::Subprocess(format!("bad report: {e}")))?;
    Ok(vec![parent, child])
}

/// Body of the subscriber child process: hosts the subscriber node,
/// connects to the publisher and measures for the configured window.
pub fn run_subscriber_child(cell: &ChildCell) -> Result<ProcessRun, BenchError> {
    let cfg = &cell.config;
    let sys = node_subsystem(&benchmark_system(cfg), SUBSCRIBER_NODE);
    let domain = Arc::new(Domain::new());
    let handle = executors::spawn(cfg.executor, &sys, &domain, executor_options(cfg))?;
    domain
        .connect_publisher(&cell.socket)
        .map_err(|e| BenchError::Transport(e.to_string()))?;
    let run = measure(cfg, &domain, handle);
    domain.shutdown();
    run
}

/// Reads the child cell from the environment.
pub fn child_cell_from_env() -> Result<ChildCell, BenchError> {
    let raw = std::env::var(CELL_ENV)
        .map_err(|_| BenchError::InvalidConfig(format!("{CELL_ENV} is not set")))?;
    serde_json::from_str(&raw).map_err(|e| BenchError::InvalidConfig(format!("{CELL_ENV}: {e}")))
}

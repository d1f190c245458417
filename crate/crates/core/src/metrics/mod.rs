//! Overhead measurement: context switches and resident memory from OS
//! accounting, user-kernel switches from the framework's own counters.
//!
//! "User-kernel switches" here means the instrumented count of blocking and
//! I/O system interactions the framework issues: socket writes and reads,
//! timer parks and thread parks. It is deterministic and comparable between
//! executors, but not with tracer-based syscall counts.

mod counters;

pub use counters::{CounterSnapshot, Counters};

use std::io::{self, Write};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::monotonic_ns;

/// Minimum window accepted by [`aggregate`].
pub const MIN_WINDOW_S: f64 = 1.0;

pub const SAMPLE_CSV_HEADER: &str = "t_ns,voluntary_cs,involuntary_cs,kernel_crossings,rss_bytes";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("measurement window of {0:.3} s is shorter than {MIN_WINDOW_S} s")]
    WindowTooShort(f64),
    #[error("process {0} has fewer than two samples")]
    NotEnoughSamples(usize),
    #[error("no processes to aggregate")]
    NoProcesses,
}

/// One snapshot of a process. OS fields are `None` where the platform
/// offers no per-process accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub t_ns: u64,
    pub voluntary_cs: Option<u64>,
    pub involuntary_cs: Option<u64>,
    pub kernel_crossings: u64,
    pub rss_bytes: Option<u64>,
    #[serde(default)]
    pub counters: CounterSnapshot,
}

impl MetricsSample {
    pub fn context_switches(&self) -> Option<u64> {
        Some(self.voluntary_cs? + self.involuntary_cs?)
    }
}

/// Context switches summed over every thread the process ever ran,
/// including ones already joined.
fn os_context_switches() -> Option<(u64, u64)> {
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: `ru` is a valid, writable rusage.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut ru) };
    (rc == 0).then_some((ru.ru_nvcsw as u64, ru.ru_nivcsw as u64))
}

/// Current resident set size.
pub fn current_rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let resident: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    (page > 0).then(|| resident * page as u64)
}

pub fn sample_process(counters: &Counters) -> MetricsSample {
    let snap = counters.snapshot();
    let cs = os_context_switches();
    MetricsSample {
        t_ns: monotonic_ns(),
        voluntary_cs: cs.map(|c| c.0),
        involuntary_cs: cs.map(|c| c.1),
        kernel_crossings: snap.kernel_crossings(),
        rss_bytes: current_rss_bytes(),
        counters: snap,
    }
}

/// Samples every `cadence` for `duration`, including both endpoints.
pub fn sample_for(
    counters: &Counters,
    duration: Duration,
    cadence: Duration,
) -> Vec<MetricsSample> {
    let start = monotonic_ns();
    let end = start + duration.as_nanos() as u64;
    let step = cadence.as_nanos().max(1) as u64;
    let mut samples = vec![sample_process(counters)];
    let mut next = start + step;
    loop {
        let target = next.min(end);
        let now = monotonic_ns();
        if target > now {
            thread::sleep(Duration::from_nanos(target - now));
        }
        samples.push(sample_process(counters));
        if target >= end {
            break;
        }
        next += step;
    }
    samples
}

/// Overhead rates over one measurement window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub window_s: f64,
    pub user_kernel_switches_per_s: f64,
    pub context_switches_per_s: Option<f64>,
    pub rss_peak_bytes: Option<u64>,
    pub rss_end_bytes: Option<u64>,
    pub fallback_count: u64,
    /// Instrumented counter deltas over the window, summed over processes.
    pub counters: CounterSnapshot,
}

/// Computes rates per process from its first and last sample, then sums
/// them across processes. Memory is the sum of each process's peak.
pub fn aggregate(
    processes: &[&[MetricsSample]],
    fallback_count: u64,
) -> Result<RateReport, MetricsError> {
    if processes.is_empty() {
        return Err(MetricsError::NoProcesses);
    }
    let mut window_s = f64::INFINITY;
    let mut uks = 0.0;
    let mut cs = Some(0.0);
    let mut rss_peak = Some(0);
    let mut rss_end = Some(0);
    let mut counters = CounterSnapshot::default();
    for (i, samples) in processes.iter().enumerate() {
        let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
            return Err(MetricsError::NotEnoughSamples(i));
        };
        if samples.len() < 2 {
            return Err(MetricsError::NotEnoughSamples(i));
        }
        let w = last.t_ns.saturating_sub(first.t_ns) as f64 / 1e9;
        if w < MIN_WINDOW_S {
            return Err(MetricsError::WindowTooShort(w));
        }
        window_s = window_s.min(w);
        uks += (last.kernel_crossings - first.kernel_crossings) as f64 / w;
        cs = match (cs, first.context_switches(), last.context_switches()) {
            (Some(acc), Some(a), Some(b)) => Some(acc + (b - a) as f64 / w),
            _ => None,
        };
        let peak = samples
            .iter()
            .map(|s| s.rss_bytes)
            .try_fold(0u64, |m, r| r.map(|r| m.max(r)));
        rss_peak = rss_peak.zip(peak).map(|(a, b)| a + b);
        rss_end = rss_end.zip(last.rss_bytes).map(|(a, b)| a + b);
        let d = last.counters.delta(&first.counters);
        counters = CounterSnapshot {
            transport_writes: counters.transport_writes + d.transport_writes,
            transport_reads: counters.transport_reads + d.transport_reads,
            timer_parks: counters.timer_parks + d.timer_parks,
            thread_parks: counters.thread_parks + d.thread_parks,
            shared_lock_acquisitions: counters.shared_lock_acquisitions
                + d.shared_lock_acquisitions,
        };
    }
    Ok(RateReport {
        window_s,
        user_kernel_switches_per_s: uks,
        context_switches_per_s: cs,
        rss_peak_bytes: rss_peak,
        rss_end_bytes: rss_end,
        fallback_count,
        counters,
    })
}

fn opt(v: Option<u64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_samples_csv<W: Write>(mut w: W, samples: &[MetricsSample]) -> io::Result<()> {
    writeln!(w, "{SAMPLE_CSV_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.t_ns,
            opt(s.voluntary_cs),
            opt(s.involuntary_cs),
            s.kernel_crossings,
            opt(s.rss_bytes)
        )?;
    }
    Ok(())
}

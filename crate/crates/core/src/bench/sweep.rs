use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    run_experiment_with, BaselineRatios, BenchError, ExperimentConfig, ExperimentResult,
    ProcessMode,
};
use crate::executors::ExecutorKind;

pub const SWEEP_CSV_HEADER: &str =
    "executor,workers,mode,n,uks_per_s,cs_per_s,rss_peak,fallbacks,valid";

/// One sweep cell as stored in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub executor: ExecutorKind,
    /// Executor threads over all processes of the cell.
    pub workers: usize,
    pub mode: ProcessMode,
    pub n: usize,
    pub uks_per_s: Option<f64>,
    pub cs_per_s: Option<f64>,
    pub rss_peak: Option<u64>,
    pub fallbacks: u64,
    pub valid: bool,
}

impl SweepRow {
    fn from_result(cfg: &ExperimentConfig, result: &Result<ExperimentResult, String>) -> Self {
        match result {
            Ok(r) => SweepRow {
                executor: cfg.executor,
                workers: r.threads,
                mode: cfg.process_mode,
                n: cfg.n_callbacks,
                uks_per_s: Some(r.report.user_kernel_switches_per_s),
                cs_per_s: r.report.context_switches_per_s,
                rss_peak: r.report.rss_peak_bytes,
                fallbacks: r.report.fallback_count,
                valid: r.valid,
            },
            Err(_) => SweepRow {
                executor: cfg.executor,
                workers: 0,
                mode: cfg.process_mode,
                n: cfg.n_callbacks,
                uks_per_s: None,
                cs_per_s: None,
                rss_peak: None,
                fallbacks: 0,
                valid: false,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub n_list: Vec<usize>,
    pub executors: Vec<ExecutorKind>,
    pub modes: Vec<ProcessMode>,
    /// Idle time between cells so OS accounting settles.
    pub gap: Duration,
}

impl SweepPlan {
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            base,
            n_list: vec![1, 4, 8, 12, 16, 20, 24],
            executors: ExecutorKind::ALL.to_vec(),
            modes: ProcessMode::ALL.to_vec(),
            gap: Duration::from_secs(1),
        }
    }

    /// Cell configs in run order: modes, then executors, then N.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &executor in &self.executors {
                for &n in &self.n_list {
                    out.push(ExperimentConfig {
                        executor,
                        process_mode: mode,
                        n_callbacks: n,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub row: SweepRow,
    pub result: Result<ExperimentResult, String>,
}

/// Runs every cell of `plan` one after another. A failing or panicking
/// cell yields an invalid row; the sweep continues.
pub fn sweep(
    plan: &SweepPlan,
    child_exe: &Path,
    mut on_cell: impl FnMut(usize, usize, &SweepCell),
) -> Vec<SweepCell> {
    let cells = plan.cells();
    let total = cells.len();
    let mut out = Vec::with_capacity(total);
    for (i, cfg) in cells.into_iter().enumerate() {
        if i > 0 {
            thread::sleep(plan.gap);
        }
        let result = match catch_unwind(AssertUnwindSafe(|| run_experiment_with(&cfg, child_exe))) {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => Err(e.to_string()),
            Err(_) => Err("cell panicked".to_string()),
        };
        let cell = SweepCell {
            row: SweepRow::from_result(&cfg, &result),
            result,
        };
        on_cell(i, total, &cell);
        out.push(cell);
    }
    out
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), BenchError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    }
    if rows.is_empty() {
        wtr.write_record(SWEEP_CSV_HEADER.split(','))
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a sweep CSV. Fails when the header differs from
/// [`SWEEP_CSV_HEADER`], a row does not parse, or there are no rows.
pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRow>, String> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != SWEEP_CSV_HEADER {
        return Err(format!(
            "expected header {SWEEP_CSV_HEADER:?}, found {header:?}"
        ));
    }
    let rows = rdr
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| format!("row {}: {e}", i + 1)))
        .collect::<Result<Vec<SweepRow>, _>>()?;
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    UserKernelSwitches,
    ContextSwitches,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::UserKernelSwitches, Metric::ContextSwitches];

    pub fn value(self, row: &SweepRow) -> Option<f64> {
        match self {
            Metric::UserKernelSwitches => row.uks_per_s,
            Metric::ContextSwitches => row.cs_per_s,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::UserKernelSwitches => "user-kernel switches/s",
            Metric::ContextSwitches => "context switches/s",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRatio {
    pub executor: ExecutorKind,
    pub mode: ProcessMode,
    pub n: usize,
    pub ratios: BaselineRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRatio {
    pub executor: ExecutorKind,
    pub mode: ProcessMode,
    pub metric: Metric,
    pub max: f64,
    pub at_n: usize,
}

/// `ratio(n_hi) / ratio(n_lo)` for the callback-isolated executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub mode: ProcessMode,
    pub metric: Metric,
    pub n_lo: usize,
    pub n_hi: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub cells: Vec<CellRatio>,
    pub max: Vec<MaxRatio>,
    pub flatness: Vec<Flatness>,
}

impl RatioReport {
    pub fn ratio(
        &self,
        executor: ExecutorKind,
        mode: ProcessMode,
        n: usize,
    ) -> Option<&BaselineRatios> {
        self.cells
            .iter()
            .find(|c| c.executor == executor && c.mode == mode && c.n == n)
            .map(|c| &c.ratios)
    }

    pub fn flatness(&self, mode: ProcessMode, metric: Metric) -> Option<&Flatness> {
        self.flatness
            .iter()
            .find(|f| f.mode == mode && f.metric == metric)
    }

    pub fn max_ratio(
        &self,
        executor: ExecutorKind,
        mode: ProcessMode,
        metric: Metric,
    ) -> Option<&MaxRatio> {
        self.max
            .iter()
            .find(|m| m.executor == executor && m.mode == mode && m.metric == metric)
    }
}

fn div(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    }
}

/// Ratios of every valid cell against the valid single-threaded cell with
/// the same N and mode. Flatness uses N=4 as the low end when present
/// (otherwise the smallest N) and the largest N as the high end.
pub fn ratio_report(rows: &[SweepRow]) -> Result<RatioReport, BenchError> {
    let baseline: BTreeMap<(ProcessMode, usize), &SweepRow> = rows
        .iter()
        .filter(|r| r.valid && r.executor == ExecutorKind::SingleThreaded)
        .map(|r| ((r.mode, r.n), r))
        .collect();
    let mut report = RatioReport::default();
    for r in rows.iter().filter(|r| r.valid) {
        let Some(base) = baseline.get(&(r.mode, r.n)) else {
            return Err(BenchError::MissingBaseline {
                executor: r.executor,
                n: r.n,
                mode: r.mode,
            });
        };
        report.cells.push(CellRatio {
            executor: r.executor,
            mode: r.mode,
            n: r.n,
            ratios: BaselineRatios {
                user_kernel_switches: div(r.uks_per_s, base.uks_per_s),
                context_switches: div(r.cs_per_s, base.cs_per_s),
            },
        });
    }
    report.cells.sort_by_key(|c| (c.mode, c.executor, c.n));

    let series: BTreeMap<(ExecutorKind, ProcessMode), Vec<&CellRatio>> =
        report.cells.iter().fold(BTreeMap::new(), |mut m, c| {
            m.entry((c.executor, c.mode)).or_default().push(c);
            m
        });
    let get = |c: &CellRatio, metric: Metric| match metric {
        Metric::UserKernelSwitches => c.ratios.user_kernel_switches,
        Metric::ContextSwitches => c.ratios.context_switches,
    };
    let mut max = Vec::new();
    let mut flatness = Vec::new();
    for ((executor, mode), cells) in &series {
        for metric in Metric::ALL {
            let points: Vec<(usize, f64)> = cells
                .iter()
                .filter_map(|c| get(c, metric).map(|v| (c.n, v)))
                .collect();
            if let Some(&(at_n, m)) = points.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
                max.push(MaxRatio {
                    executor: *executor,
                    mode: *mode,
                    metric,
                    max: m,
                    at_n,
                });
            }
            if *executor != ExecutorKind::CallbackIsolated || points.len() < 2 {
                continue;
            }
            let lo = points
                .iter()
                .find(|p| p.0 == 4)
                .or_else(|| points.first())
                .copied();
            let hi = points.last().copied();
            if let (Some(lo), Some(hi)) = (lo, hi) {
                if hi.0 > lo.0 && lo.1 > 0.0 {
                    flatness.push(Flatness {
                        mode: *mode,
                        metric,
                        n_lo: lo.0,
                        n_hi: hi.0,
                        value: hi.1 / lo.1,
                    });
                }
            }
        }
    }
    report.max = max;
    report.flatness = flatness;
    Ok(report)
}

//! Acceptance runner. Prints one line per criterion and exits non-zero when
//! any criterion fails. Skipped criteria are marked `SKIP` with the reason.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::{any_overlap, fit_line, replay, simulate, Scenario};
use isolexec::bench::{pub_id, ExperimentResult, ProcessMode};
use isolexec::executors::{self, ExecError, ExecutorKind, ExecutorOptions};
use isolexec::model::{
    CallbackGroup, CallbackKind, CallbackSpec, CustomHandler, Handler, NodeSpec, Policy, SchedAttr,
    SystemDescription,
};
use isolexec::schedctl::{current_cpu, probe_capabilities, EnforcementOutcome};
use isolexec::transport::Domain;

const SWEEP_N: [usize; 6] = [4, 8, 12, 16, 20, 24];
const SWEEP_CELL_S: f64 = 10.0;
const FLATNESS_LIMIT: f64 = 1.5;
const ORDERING_REPEATS: usize = 3;
const ORDERING_REQUIRED: usize = 2;
const RSS_SLOPE_LIMIT_BYTES: f64 = 2.5e6;
const RSS_RATIO_LIMIT: f64 = 2.0;
const SIM_SCENARIOS: u64 = 500;
const STRESS_EXECUTIONS: u64 = 10_000;
const AFFINITY_SAMPLES: usize = 100;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_isolexec")
}

fn description(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("descriptions")
        .join(name)
}

/// One benchmark cell in a fresh `isolexec run` process.
fn cell(
    executor: ExecutorKind,
    mode: ProcessMode,
    n: usize,
    duration_s: f64,
) -> Result<ExperimentResult, String> {
    let out = Command::new(bin())
        .args(["run", "--json", "--executor", executor.short_name()])
        .args(["--mode", &mode.to_string(), "--n", &n.to_string()])
        .args(["--duration", &duration_s.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    let r: ExperimentResult = serde_json::from_slice(&out.stdout).map_err(|e| {
        format!(
            "{executor} n={n} {mode}: exit {:?}, {e}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })?;
    eprintln!(
        "  {executor} n={n} {mode}: cs/s {:.1}, uks/s {:.1}, rss {:.1} MiB, threads {}, valid {}",
        r.report.context_switches_per_s.unwrap_or(f64::NAN),
        r.report.user_kernel_switches_per_s,
        r.report.rss_peak_bytes.unwrap_or(0) as f64 / 1048576.0,
        r.threads,
        r.valid
    );
    Ok(r)
}

fn cs(r: &ExperimentResult) -> Result<f64, String> {
    r.report
        .context_switches_per_s
        .ok_or_else(|| "context switch counters unavailable".to_string())
}

// 1
fn one_to_one_persistence() -> Verdict {
    let r = match cell(ExecutorKind::CallbackIsolated, ProcessMode::Intra, 24, 5.0) {
        Ok(r) => r,
        Err(e) => return Fail(e),
    };
    let mut owner: BTreeMap<i32, &str> = BTreeMap::new();
    for c in &r.callbacks {
        if c.thread_ids.len() != 1 {
            return Fail(format!("{} ran on {} threads", c.id, c.thread_ids.len()));
        }
        let tid = *c.thread_ids.first().unwrap();
        if let Some(other) = owner.insert(tid, &c.id) {
            return Fail(format!("{} and {other} share thread {tid}", c.id));
        }
    }
    verdict(
        r.valid && r.callbacks.len() == 48,
        format!(
            "{} callbacks on {} distinct threads",
            r.callbacks.len(),
            owner.len()
        ),
    )
}

type Sweep = BTreeMap<(ExecutorKind, ProcessMode, usize), Result<ExperimentResult, String>>;

fn run_sweep() -> Sweep {
    let mut out = Sweep::new();
    for mode in ProcessMode::ALL {
        for executor in [ExecutorKind::SingleThreaded, ExecutorKind::CallbackIsolated] {
            for n in SWEEP_N {
                out.insert((executor, mode, n), cell(executor, mode, n, SWEEP_CELL_S));
                thread::sleep(Duration::from_millis(500));
            }
        }
    }
    out
}

fn sweep_ratio(sweep: &Sweep, mode: ProcessMode, n: usize) -> Result<f64, String> {
    let get = |e| match sweep.get(&(e, mode, n)) {
        Some(Ok(r)) if r.valid => cs(r),
        Some(Ok(r)) => Err(format!("{e} n={n} {mode} invalid: {:?}", r.problems)),
        Some(Err(e)) => Err(e.clone()),
        None => Err(format!("{e} n={n} {mode} missing")),
    };
    Ok(get(ExecutorKind::CallbackIsolated)? / get(ExecutorKind::SingleThreaded)?)
}

// 2
fn bounded_ratio(sweep: &Sweep) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in ProcessMode::ALL {
        let ratios: Result<Vec<f64>, String> = SWEEP_N
            .iter()
            .map(|&n| sweep_ratio(sweep, mode, n))
            .collect();
        let ratios = match ratios {
            Ok(r) => r,
            Err(e) => return Fail(e),
        };
        let (lo, hi) = (ratios[0], ratios[ratios.len() - 1]);
        let flat = hi <= FLATNESS_LIMIT * lo;
        ok &= flat;
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
        lines.push(format!(
            "{mode}: cie/ste cs ratios [{}], ratio(24)/ratio(4) = {:.3} (limit {FLATNESS_LIMIT}), max {max:.2}{}",
            shown.join(", "),
            hi / lo,
            if mode == ProcessMode::Intra { " vs about 5x reported" } else { " vs about 1.4x reported" }
        ));
    }
    verdict(ok, lines.join("; "))
}

// 3
fn cie_vs_mte() -> Verdict {
    let workers = probe_capabilities().core_count;
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in ProcessMode::ALL {
        let mut held = 0;
        let mut runs = Vec::new();
        for _ in 0..ORDERING_REPEATS {
            let pair = cell(ExecutorKind::CallbackIsolated, mode, 24, SWEEP_CELL_S)
                .and_then(|c| Ok((cs(&c)?, c.valid)))
                .and_then(|c| {
                    let m = cell(ExecutorKind::MultiThreaded, mode, 24, SWEEP_CELL_S)?;
                    Ok((c, (cs(&m)?, m.valid)))
                });
            match pair {
                Ok(((c, cv), (m, mv))) => {
                    if cv && mv && c <= m {
                        held += 1;
                    }
                    runs.push(format!("cie {c:.0} vs mte {m:.0}"));
                }
                Err(e) => runs.push(format!("error: {e}")),
            }
        }
        ok &= held >= ORDERING_REQUIRED;
        lines.push(format!(
            "{mode}: cie<=mte in {held}/{ORDERING_REPEATS} runs [{}]",
            runs.join(", ")
        ));
    }
    verdict(ok, format!("mte workers {workers}; {}", lines.join("; ")))
}

// 4
fn crossing_asymmetry(sweep: &Sweep) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for ((executor, mode, n), r) in sweep {
        let r = match r {
            Ok(r) => r,
            Err(e) => return Fail(e.clone()),
        };
        let delivery = r.report.counters.delivery_crossings();
        let firings: u64 = (0..*n)
            .map(|i| r.callback(&pub_id(i)).map_or(0, |c| c.window_executions))
            .sum();
        let good = match mode {
            ProcessMode::Intra => delivery == 0,
            ProcessMode::Inter => firings > 0 && delivery >= firings,
        };
        if !good {
            ok = false;
            lines.push(format!(
                "{executor} n={n} {mode}: {delivery} delivery crossings for {firings} firings"
            ));
        } else if *n == 24 {
            lines.push(format!(
                "{executor} n=24 {mode}: {delivery} for {firings} firings"
            ));
        }
    }
    verdict(ok, lines.join("; "))
}

fn single_timer(id: &str, period_ns: u64, handler: Handler) -> SystemDescription {
    let mut sys = SystemDescription {
        topics: vec![],
        groups: vec![CallbackGroup::new("g")],
        nodes: vec![NodeSpec::new("n").callback(
            CallbackSpec::new(
                id,
                CallbackKind::Timer {
                    period_ns,
                    phase_ns: 0,
                },
                "g",
            )
            .with_handler(handler),
        )],
    };
    sys.normalize().expect("valid");
    sys
}

fn timer_run(busy_ns: u64, run: Duration) -> Result<(u64, u64, u64), ExecError> {
    let sys = single_timer(
        "t",
        10_000_000,
        Handler::BusyWork {
            duration_ns: busy_ns,
        },
    );
    let domain = Domain::new();
    let mut h = executors::spawn(
        ExecutorKind::CallbackIsolated,
        &sys,
        &domain,
        ExecutorOptions::default(),
    )?;
    thread::sleep(run);
    let stats = h.shutdown()?;
    let c = stats.callback("t").expect("timer stats");
    Ok((c.executions, c.overruns, c.max_concurrency))
}

// 5
fn overrun_detection() -> Verdict {
    let slow = timer_run(15_000_000, Duration::from_secs(3));
    let fast = timer_run(1_000_000, Duration::from_secs(5));
    match (slow, fast) {
        (Ok((se, so, sc)), Ok((fe, fo, fc))) => verdict(
            so >= 1 && sc == 1 && fo == 0 && fc == 1,
            format!(
                "15ms on 10ms: {se} runs, {so} overruns, concurrency {sc}; 1ms on 10ms: {fe} runs, {fo} overruns, concurrency {fc}"
            ),
        ),
        (a, b) => Fail(format!("executor error: {:?} / {:?}", a.err(), b.err())),
    }
}

// 6
fn constraint_validation() -> Verdict {
    let shared = SystemDescription::load(description("shared_group.json")).expect("fixture loads");
    let refused = matches!(
        executors::spawn(
            ExecutorKind::CallbackIsolated,
            &shared,
            &Domain::new(),
            ExecutorOptions::default()
        ),
        Err(ExecError::Constraint(_))
    );
    let code = |f: &str| {
        Command::new(bin())
            .arg("validate")
            .arg(description(f))
            .output()
            .ok()
            .and_then(|o| o.status.code())
    };
    let (bad, good) = (code("shared_group.json"), code("benchmark_pair_n4.json"));
    verdict(
        refused && bad == Some(1) && good == Some(0),
        format!("strict cie refused shared group: {refused}; validate exits {bad:?} and {good:?}"),
    )
}

// 7
fn semantics_oracle() -> Verdict {
    let mut mismatches = Vec::new();
    let mut cycles = 0;
    for seed in 0..SIM_SCENARIOS {
        let s = Scenario::random(seed, 4, 20);
        let (want, got) = (simulate(&s), replay(&s));
        cycles += want.len();
        if want != got {
            mismatches.push(seed);
        }
    }
    verdict(
        mismatches.is_empty(),
        format!("{SIM_SCENARIOS} scenarios, {cycles} cycles, mismatching seeds {mismatches:?}"),
    )
}

// 8
fn mutual_exclusion_stress() -> Verdict {
    let busy = Handler::BusyWork {
        duration_ns: 300_000,
    };
    let timer = |id: &str, group: &str, phase_ns| {
        CallbackSpec::new(
            id,
            CallbackKind::Timer {
                period_ns: 2_000_000,
                phase_ns,
            },
            group,
        )
        .with_handler(busy.clone())
    };
    let mut sys = SystemDescription {
        topics: vec![],
        groups: ["pair", "solo_c", "solo_d"]
            .into_iter()
            .map(CallbackGroup::new)
            .collect(),
        nodes: vec![NodeSpec::new("n")
            .callback(timer("a", "pair", 0))
            .callback(timer("b", "pair", 0))
            .callback(timer("c", "solo_c", 0))
            .callback(timer("d", "solo_d", 500_000))],
    };
    sys.normalize().expect("valid");
    let group_of = [0, 0, 1, 2];
    let opts = ExecutorOptions {
        workers: Some(4),
        trace: true,
        ..Default::default()
    };
    let domain = Domain::new();
    let mut h = match executors::spawn(ExecutorKind::MultiThreaded, &sys, &domain, opts) {
        Ok(h) => h,
        Err(e) => return Fail(e.to_string()),
    };
    let deadline = Instant::now() + Duration::from_secs(60);
    while h.snapshot().iter().map(|c| c.executions).sum::<u64>() < STRESS_EXECUTIONS
        && Instant::now() < deadline
    {
        thread::sleep(Duration::from_millis(50));
    }
    let stats = match h.shutdown() {
        Ok(s) => s,
        Err(e) => return Fail(e.to_string()),
    };
    let mut same: Vec<(u64, u64)> = stats
        .trace
        .iter()
        .filter(|r| group_of[r.callback] == 0)
        .map(|r| (r.start_ns, r.end_ns))
        .collect();
    let same_overlap = any_overlap(&mut same);
    let mut all: Vec<(u64, u64, usize)> = stats
        .trace
        .iter()
        .map(|r| (r.start_ns, r.end_ns, group_of[r.callback]))
        .collect();
    all.sort_unstable();
    let mut cross = 0u64;
    for (i, a) in all.iter().enumerate() {
        for b in all[i + 1..].iter().take_while(|b| b.0 < a.1) {
            if b.2 != a.2 {
                cross += 1;
            }
        }
    }
    let executions = stats.total_executions();
    verdict(
        executions >= STRESS_EXECUTIONS && !same_overlap && cross > 0,
        format!(
            "{executions} executions, {} traced, same-group overlap: {same_overlap}, distinct-group overlaps: {cross}",
            stats.trace.len()
        ),
    )
}

// 9
fn scheduling_enforcement() -> Verdict {
    let caps = probe_capabilities();
    let fifo = Policy::FifoRt { priority: 50 };
    if caps.core_count < 3 || !caps.supports(&fifo) {
        return Skip(format!(
            "needs FIFO privileges and core 2; fifo_rt {:?}, {} cores",
            caps.fifo_rt, caps.core_count
        ));
    }
    let cpus = Arc::new(Mutex::new(Vec::new()));
    let handler = {
        let cpus = cpus.clone();
        Handler::Custom(CustomHandler::new(move |_| {
            cpus.lock().unwrap().push(current_cpu());
        }))
    };
    let attr = SchedAttr::fifo(50).with_affinity([2]);
    let mut sys = single_timer("rt", 10_000_000, handler);
    sys.nodes[0].callbacks[0].sched = Some(attr.clone());
    let domain = Domain::new();
    let mut h = match executors::spawn(
        ExecutorKind::CallbackIsolated,
        &sys,
        &domain,
        ExecutorOptions::default(),
    ) {
        Ok(h) => h,
        Err(e) => return Fail(e.to_string()),
    };
    let deadline = Instant::now() + Duration::from_secs(10);
    while cpus.lock().unwrap().len() < AFFINITY_SAMPLES && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(50));
    }
    let stats = match h.shutdown() {
        Ok(s) => s,
        Err(e) => return Fail(e.to_string()),
    };
    let samples = cpus.lock().unwrap().clone();
    let on_two = samples.iter().filter(|c| **c == Some(2)).count();
    let readback_ok = match &stats.callback("rt").and_then(|c| c.enforcement.clone()) {
        Some(EnforcementOutcome::Applied { readback }) => {
            readback.policy == attr.policy && readback.affinity == attr.affinity
        }
        _ => false,
    };
    verdict(
        readback_ok && samples.len() >= AFFINITY_SAMPLES && on_two == samples.len(),
        format!(
            "read-back matches: {readback_ok}; {on_two}/{} samples on cpu 2",
            samples.len()
        ),
    )
}

// 10
fn memory_trend(sweep: &Sweep) -> Verdict {
    let rss = |e, n| match sweep.get(&(e, ProcessMode::Intra, n)) {
        Some(Ok(r)) => r
            .report
            .rss_peak_bytes
            .ok_or_else(|| "rss unavailable".to_string()),
        Some(Err(e)) => Err(e.clone()),
        None => Err("missing cell".to_string()),
    };
    let points: Result<Vec<(f64, f64)>, String> = SWEEP_N
        .iter()
        .map(|&n| rss(ExecutorKind::CallbackIsolated, n).map(|b| (n as f64, b as f64)))
        .collect();
    let (points, ste24) = match (points, rss(ExecutorKind::SingleThreaded, 24)) {
        (Ok(p), Ok(s)) => (p, s as f64),
        (a, b) => return Fail(format!("{:?} / {:?}", a.err(), b.err())),
    };
    let (slope, intercept) = fit_line(&points);
    let cie24 = points.last().unwrap().1;
    verdict(
        slope <= RSS_SLOPE_LIMIT_BYTES && cie24 <= RSS_RATIO_LIMIT * ste24,
        format!(
            "cie rss {:.2} MB + {:.1} kB per callback; n=24 cie {:.2} MB vs ste {:.2} MB ({:.2}x)",
            intercept / 1e6,
            slope / 1e3,
            cie24 / 1e6,
            ste24 / 1e6,
            cie24 / ste24
        ),
    )
}

fn main() -> ExitCode {
    let mut results: BTreeMap<usize, (&str, Verdict)> = BTreeMap::new();
    let mut record = |n, name, v: Verdict| {
        let (tag, detail) = match &v {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        eprintln!("criterion {n} {name}: {tag} ({detail})");
        results.insert(n, (name, v));
    };
    record(1, "one-to-one persistence", one_to_one_persistence());
    record(5, "overrun detection", overrun_detection());
    record(6, "constraint validation", constraint_validation());
    record(7, "executor semantics oracle", semantics_oracle());
    record(8, "mutual exclusion stress", mutual_exclusion_stress());
    record(9, "scheduling enforcement", scheduling_enforcement());
    eprintln!("running the ste/cie sweep");
    let sweep = run_sweep();
    record(2, "bounded ratio", bounded_ratio(&sweep));
    record(4, "kernel crossing asymmetry", crossing_asymmetry(&sweep));
    record(10, "memory trend", memory_trend(&sweep));
    eprintln!("running cie/mte repetitions");
    record(3, "cie vs mte ordering", cie_vs_mte());

    let mut failed = 0;
    let seen: BTreeSet<usize> = results.keys().copied().collect();
    assert_eq!(seen, (1..=10).collect(), "every criterion reports");
    for (n, (name, v)) in &results {
        match v {
            Pass(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Skip(d) => println!("criterion {n:>2} SKIP  {name}: {d}"),
            Fail(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

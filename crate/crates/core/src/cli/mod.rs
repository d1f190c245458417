//! Command-line front end.
//!
//! Exit codes: 0 success, 1 domain violation (constraint violations, cyclic
//! graphs, invalid runs, sweeps without a single valid cell), 2 usage or
//! input error (bad flags, unreadable or malformed files, output collisions).

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bench::report::{render_report, SUMMARY_FILE};
use crate::bench::{
    self, child_cell_from_env, read_sweep_csv, run_experiment, run_subscriber_child,
    write_sweep_csv, BenchError, ExperimentConfig, ProcessMode, SweepPlan, SweepRow,
};
use crate::executors::ExecutorKind;
use crate::metrics::write_samples_csv;
use crate::model::{
    build_graph, validate_isolation_constraints, DanglingTopicPolicy, GraphOptions, ModelError,
    SystemDescription,
};
use crate::schedctl::probe_capabilities;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "isolexec",
    version,
    about = "Callback executors and their overhead benchmark"
)]
pub struct Cli {
    /// TOML file with `[experiment]` and `[sweep]` tables; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a system description: graph, cycles and isolation constraints.
    Validate {
        path: PathBuf,
        /// Treat topics without a publisher or subscriber as errors.
        #[arg(long)]
        dangling_error: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print which scheduling policies this process may use, as JSON.
    Probe,
    /// Run one benchmark cell.
    Run(RunArgs),
    /// Run the cross product of executors, N values and process modes.
    Sweep(SweepArgs),
    /// Render plots and a ratio summary from a sweep CSV.
    Report {
        csv: PathBuf,
        /// Directory for the plot and summary files; defaults to the CSV's.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Args)]
pub struct CellArgs {
    /// ste, mte or cie.
    #[arg(long)]
    pub executor: Option<ExecutorKind>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Callbacks per node.
    #[arg(long = "n")]
    pub n_callbacks: Option<usize>,
    /// intra or inter.
    #[arg(long)]
    pub mode: Option<ProcessMode>,
    #[arg(long)]
    pub period_ns: Option<u64>,
    /// Measurement window in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub payload_bytes: Option<usize>,
    #[arg(long)]
    pub busywork_ns: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Let the callback-isolated executor share a thread among a group's members.
    #[arg(long)]
    pub permissive: bool,
    /// Give every timer phase zero instead of spreading them over the period.
    #[arg(long)]
    pub aligned: bool,
}

impl CellArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.executor {
            cfg.executor = v;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(v) = self.n_callbacks {
            cfg.n_callbacks = v;
        }
        if let Some(v) = self.mode {
            cfg.process_mode = v;
        }
        if let Some(v) = self.period_ns {
            cfg.publish_period_ns = v;
        }
        if let Some(v) = self.duration {
            cfg.duration_s = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_s = v;
        }
        if let Some(v) = self.payload_bytes {
            cfg.payload_bytes = v;
        }
        if let Some(v) = self.busywork_ns {
            cfg.handler_busywork_ns = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.permissive {
            cfg.strict = false;
        }
        if self.aligned {
            cfg.stagger = false;
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    /// Print the full result as JSON on stdout.
    #[arg(long)]
    pub json: bool,
    /// Write the result JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write this process's metric samples as CSV.
    #[arg(long)]
    pub samples_csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long, hide = true)]
    pub role: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cell: CellArgs,
    /// Comma-separated executors, e.g. `ste,mte,cie`.
    #[arg(long, value_delimiter = ',')]
    pub executors: Option<Vec<ExecutorKind>>,
    /// Comma-separated N values, e.g. `1,4,8`.
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Comma-separated process modes, e.g. `intra,inter`.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<ProcessMode>>,
    /// Seconds of idle time between cells.
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

/// Config-file equivalents of the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<ExperimentConfig>,
    pub sweep: SweepSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub executors: Option<Vec<ExecutorKind>>,
    pub n_list: Option<Vec<usize>>,
    pub modes: Option<Vec<ProcessMode>>,
    pub gap_s: Option<f64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<ConfigFile, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Entry point of the binary.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    run(std::env::args_os())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let config = match &cli.config {
        Some(p) => match load_config(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        },
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Validate {
            path,
            dangling_error,
            json,
        } => cmd_validate(&path, dangling_error, json),
        Command::Probe => {
            println!(
                "{}",
                serde_json::to_string_pretty(&probe_capabilities()).expect("report serializes")
            );
            EXIT_OK
        }
        Command::Run(args) => cmd_run(&config, &args),
        Command::Sweep(args) => cmd_sweep(&config, &args),
        Command::Report { csv, out_dir } => cmd_report(&csv, out_dir.as_deref()),
    }
}

/// Validation outcome of a description file.
#[derive(Debug, serde::Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub topo_order: Vec<String>,
}

/// Checks a description. `Err` carries an input error (unreadable or
/// unparsable file).
pub fn validate_file(
    path: &Path,
    dangling: DanglingTopicPolicy,
) -> Result<ValidationReport, ModelError> {
    let mut report = ValidationReport {
        ok: false,
        errors: Vec::new(),
        warnings: Vec::new(),
        topo_order: Vec::new(),
    };
    let sys = match SystemDescription::load(path) {
        Ok(s) => s,
        Err(e @ (ModelError::Io { .. } | ModelError::Parse(_))) => return Err(e),
        Err(e) => {
            report.errors.push(e.to_string());
            return Ok(report);
        }
    };
    match build_graph(
        &sys,
        GraphOptions {
            dangling_topic: dangling,
        },
    ) {
        Ok(graph) => {
            report.warnings = graph.warnings.iter().map(|w| w.to_string()).collect();
            report.topo_order = graph
                .topo_order
                .iter()
                .map(|&i| graph.vertices[i].clone())
                .collect();
            let constraints = validate_isolation_constraints(&sys, &graph);
            report
                .errors
                .extend(constraints.violations.iter().map(|v| v.to_string()));
        }
        Err(e) => report.errors.push(e.to_string()),
    }
    report.ok = report.errors.is_empty();
    Ok(report)
}

fn cmd_validate(path: &Path, dangling_error: bool, json: bool) -> i32 {
    let policy = if dangling_error {
        DanglingTopicPolicy::Error
    } else {
        DanglingTopicPolicy::Warn
    };
    let report = match validate_file(path, policy) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        for w in &report.warnings {
            println!("warning: {w}");
        }
        for e in &report.errors {
            println!("error: {e}");
        }
        if report.ok {
            println!(
                "ok: {} callbacks, order {}",
                report.topo_order.len(),
                report.topo_order.join(" -> ")
            );
        }
    }
    if report.ok {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

fn refuse_existing(path: &Path, force: bool) -> bool {
    if path.exists() && !force {
        eprintln!(
            "error: {} exists; pass --force to overwrite",
            path.display()
        );
        return true;
    }
    false
}

fn bench_exit(e: &BenchError) -> i32 {
    match e {
        BenchError::InvalidConfig(_) | BenchError::Io(_) => EXIT_USAGE,
        _ => EXIT_VIOLATION,
    }
}

fn cmd_run(config: &ConfigFile, args: &RunArgs) -> i32 {
    if let Some(role) = &args.role {
        if role != "subscriber" {
            eprintln!("error: unknown role {role:?}");
            return EXIT_USAGE;
        }
        return run_child();
    }
    let mut cfg = config.experiment.clone().unwrap_or_default();
    args.cell.apply(&mut cfg);
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    for p in [&args.out, &args.samples_csv].into_iter().flatten() {
        if refuse_existing(p, args.force) {
            return EXIT_USAGE;
        }
    }
    let result = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return bench_exit(&e);
        }
    };
    let text = serde_json::to_string_pretty(&result).expect("result serializes");
    if let (Some(p), Some(samples)) = (&args.samples_csv, result.samples.first()) {
        if let Err(e) = write_samples(p, samples) {
            eprintln!("error: {}: {e}", p.display());
            return EXIT_USAGE;
        }
    }
    if let Some(p) = &args.out {
        if let Err(e) = fs::write(p, &text) {
            eprintln!("error: {}: {e}", p.display());
            return EXIT_USAGE;
        }
    }
    if args.json {
        println!("{text}");
    } else {
        let r = &result.report;
        println!(
            "{} n={} {}: {:.1} user-kernel switches/s, {} context switches/s, peak rss {}, {} threads, fallbacks {}",
            cfg.executor,
            cfg.n_callbacks,
            cfg.process_mode,
            r.user_kernel_switches_per_s,
            r.context_switches_per_s.map_or("n/a".into(), |v| format!("{v:.1}")),
            r.rss_peak_bytes.map_or("n/a".into(), |v| format!("{:.1} MiB", v as f64 / 1048576.0)),
            result.threads,
            r.fallback_count,
        );
        for p in &result.problems {
            println!("problem: {p}");
        }
    }
    if result.valid {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

fn run_child() -> i32 {
    let cell = match child_cell_from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match run_subscriber_child(&cell) {
        Ok(run) => {
            let mut out = io::stdout().lock();
            let _ = serde_json::to_writer(&mut out, &run);
            let _ = writeln!(out);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: subscriber: {e}");
            bench_exit(&e)
        }
    }
}

/// Sweep plan from config file and flags, flags winning.
pub fn sweep_plan(config: &ConfigFile, args: &SweepArgs) -> SweepPlan {
    let mut base = config.experiment.clone().unwrap_or_default();
    args.cell.apply(&mut base);
    let mut plan = SweepPlan::new(base);
    let s = &config.sweep;
    if let Some(v) = args.executors.clone().or_else(|| s.executors.clone()) {
        plan.executors = v;
    }
    if let Some(v) = args.n_list.clone().or_else(|| s.n_list.clone()) {
        plan.n_list = v;
    }
    if let Some(v) = args.modes.clone().or_else(|| s.modes.clone()) {
        plan.modes = v;
    }
    if let Some(v) = args.gap.or(s.gap_s) {
        plan.gap = Duration::from_secs_f64(v.max(0.0));
    }
    plan
}

fn cmd_sweep(config: &ConfigFile, args: &SweepArgs) -> i32 {
    let plan = sweep_plan(config, args);
    let out = args
        .out
        .clone()
        .or_else(|| config.sweep.out.clone())
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    if plan.n_list.is_empty() || plan.executors.is_empty() || plan.modes.is_empty() {
        eprintln!("error: executors, n-list and modes must be non-empty");
        return EXIT_USAGE;
    }
    if let Some(bad) = plan.cells().iter().find_map(|c| c.validate().err()) {
        eprintln!("error: {bad}");
        return EXIT_USAGE;
    }
    if refuse_existing(&out, args.force) {
        return EXIT_USAGE;
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot locate own executable: {e}");
            return EXIT_USAGE;
        }
    };
    let cells = bench::sweep(&plan, &exe, |i, total, cell| {
        let r = &cell.row;
        match &cell.result {
            Ok(_) => eprintln!(
                "[{}/{total}] {} n={} {}: uks/s {:.1}, cs/s {}, valid {}",
                i + 1,
                r.executor,
                r.n,
                r.mode,
                r.uks_per_s.unwrap_or(f64::NAN),
                r.cs_per_s.map_or("n/a".into(), |v| format!("{v:.1}")),
                r.valid
            ),
            Err(e) => eprintln!(
                "[{}/{total}] {} n={} {}: failed: {e}",
                i + 1,
                r.executor,
                r.n,
                r.mode
            ),
        }
    });
    let rows: Vec<SweepRow> = cells.into_iter().map(|c| c.row).collect();
    let written = fs::File::create(&out)
        .map_err(BenchError::from)
        .and_then(|f| write_sweep_csv(io::BufWriter::new(f), &rows));
    if let Err(e) = written {
        eprintln!("error: {}: {e}", out.display());
        return EXIT_USAGE;
    }
    let valid = rows.iter().filter(|r| r.valid).count();
    println!(
        "wrote {} rows ({valid} valid) to {}",
        rows.len(),
        out.display()
    );
    if valid == 0 {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    }
}

fn cmd_report(csv: &Path, out_dir: Option<&Path>) -> i32 {
    let rows = match fs::File::open(csv)
        .map_err(|e| e.to_string())
        .and_then(read_sweep_csv)
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: schema mismatch in {}: {e}", csv.display());
            return EXIT_USAGE;
        }
    };
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
    let report = render_report(&rows);
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| format!("{}: {e}", p.display()))
    };
    let written = fs::create_dir_all(&dir)
        .map_err(|e| format!("{}: {e}", dir.display()))
        .and_then(|_| {
            report
                .plots
                .iter()
                .try_for_each(|(name, svg)| write(name, svg))
                .and_then(|_| write(SUMMARY_FILE, &report.summary))
        });
    if let Err(e) = written {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    print!("{}", report.summary);
    EXIT_OK
}

fn write_samples(path: &Path, samples: &[crate::metrics::MetricsSample]) -> io::Result<()> {
    write_samples_csv(io::BufWriter::new(fs::File::create(path)?), samples)
}

//! Plots and text summary for a sweep table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::sweep::{ratio_report, Metric, SweepRow};
use super::ProcessMode;
use crate::executors::ExecutorKind;

/// Published intra-process CIE/STE switch ratio the summary compares against.
pub const REFERENCE_INTRA_RATIO: f64 = 5.0;
/// Published inter-process CIE/STE switch ratio.
pub const REFERENCE_INTER_RATIO: f64 = 1.4;

pub const PLOT_FILES: [&str; 3] = [
    "user_kernel_switches.svg",
    "context_switches.svg",
    "memory.svg",
];
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    /// `(file name, svg document)` for each plot.
    pub plots: Vec<(String, String)>,
    pub summary: String,
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn series(rows: &[SweepRow], value: impl Fn(&SweepRow) -> Option<f64>) -> Series {
    let mut by: BTreeMap<(ExecutorKind, ProcessMode), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.valid) {
        if let Some(v) = value(r) {
            by.entry((r.executor, r.mode))
                .or_default()
                .push((r.n as f64, v));
        }
    }
    by.into_iter()
        .map(|((e, m), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("{e} {m}"), pts)
        })
        .collect()
}

pub fn render_report(rows: &[SweepRow]) -> RenderedReport {
    let plots = vec![
        (
            PLOT_FILES[0].to_string(),
            line_chart(
                "User-kernel switches",
                "callbacks per node (N)",
                "switches / s",
                &series(rows, |r| Metric::UserKernelSwitches.value(r)),
            ),
        ),
        (
            PLOT_FILES[1].to_string(),
            line_chart(
                "Context switches",
                "callbacks per node (N)",
                "switches / s",
                &series(rows, |r| Metric::ContextSwitches.value(r)),
            ),
        ),
        (
            PLOT_FILES[2].to_string(),
            line_chart(
                "Memory (peak RSS)",
                "callbacks per node (N)",
                "MiB",
                &series(rows, |r| r.rss_peak.map(|b| b as f64 / (1024.0 * 1024.0))),
            ),
        ),
    ];
    RenderedReport {
        plots,
        summary: summary_text(rows),
    }
}

fn summary_text(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let valid = rows.iter().filter(|r| r.valid).count();
    let _ = writeln!(s, "cells: {} ({valid} valid)", rows.len());
    let compared = rows
        .iter()
        .any(|r| r.valid && r.executor != ExecutorKind::SingleThreaded);
    if !compared {
        let _ = writeln!(s, "baseline only: no executor to compare against ste");
        return s;
    }
    let report = match ratio_report(rows) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(s, "ratios unavailable: {e}");
            return s;
        }
    };
    for mode in ProcessMode::ALL {
        let reference = match mode {
            ProcessMode::Intra => REFERENCE_INTRA_RATIO,
            ProcessMode::Inter => REFERENCE_INTER_RATIO,
        };
        for metric in Metric::ALL {
            if let Some(m) = report.max_ratio(ExecutorKind::CallbackIsolated, mode, metric) {
                let _ = writeln!(
                    s,
                    "max cie/ste ratio, {mode}, {metric}: {:.3} at n={} (reference: about {reference}x)",
                    m.max, m.at_n
                );
            }
        }
        for metric in Metric::ALL {
            if let Some(f) = report.flatness(mode, metric) {
                let _ = writeln!(
                    s,
                    "flatness, {mode}, {metric}: ratio(n={}) / ratio(n={}) = {:.3}",
                    f.n_hi, f.n_lo, f.value
                );
            }
        }
    }
    for m in report
        .max
        .iter()
        .filter(|m| m.executor == ExecutorKind::MultiThreaded)
    {
        let _ = writeln!(
            s,
            "max mte/ste ratio, {}, {}: {:.3} at n={}",
            m.mode, m.metric, m.max, m.at_n
        );
    }
    s
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Upper axis bound rounded to 1, 2 or 5 times a power of ten.
fn nice_ceiling(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * p)
        .find(|c| *c >= v)
        .unwrap_or(10.0 * p)
}

/// Self-contained SVG line chart, one polyline per series.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.iter().flat_map(|(_, p)| p);
    let x_max = nice_ceiling(pts.clone().map(|p| p.0).fold(0.0, f64::max));
    let y_max = nice_ceiling(pts.map(|p| p.1).fold(0.0, f64::max));
    let sx = |x: f64| left + x / x_max * pw;
    let sy = |y: f64| top + ph - y / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, y) = (left + f * pw, top + ph - f * ph);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + 4.0,
            fmt_tick(f * y_max)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            top + ph + 16.0,
            fmt_tick(f * x_max)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if name.ends_with("inter") {
            r#" stroke-dasharray="6 3""#
        } else {
            ""
        };
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            escape(name),
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 10.0 + i as f64 * 18.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() || v >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

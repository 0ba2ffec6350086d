//! CSV tables and self-contained SVG log-log plots.

use std::fmt::Write;

use crate::metrics::SlopeFit;
use crate::solvers::PushedEnsemble;

use super::commands::{ScheduleReport, SweepRow, VelocityCheckReport};

pub const SWEEP_HEADER: &str = "config_hash,preset,integrator,schedule_kind,h,N,d,metric,tv,tv_stderr,n_samples,seed";

/// `# generated <unix seconds>`; the only line that differs between reruns.
pub fn timestamp_line() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# generated {secs}")
}

fn with_timestamp(timestamp: Option<&str>, header: &str) -> String {
    let mut out = String::new();
    if let Some(ts) = timestamp {
        out.push_str(ts);
        out.push('\n');
    }
    out.push_str(header);
    out.push('\n');
    out
}

pub fn sweep_csv(rows: &[SweepRow], timestamp: Option<&str>) -> String {
    let mut out = with_timestamp(timestamp, SWEEP_HEADER);
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.preset,
            r.integrator,
            r.schedule_kind,
            r.h,
            r.n_steps,
            r.d,
            r.metric.as_str(),
            r.tv,
            r.tv_stderr,
            r.n_samples,
            r.seed
        )
        .unwrap();
    }
    out
}

pub fn check_csv(report: &VelocityCheckReport, config_hash: &str, preset: &str, timestamp: Option<&str>) -> String {
    let mut out = with_timestamp(
        timestamp,
        "config_hash,preset,panel,probe,t,x,value,reference,tolerance,pass",
    );
    for r in &report.rows {
        let x: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{config_hash},{preset},{},{},{},{},{},{},{},{}",
            r.panel.as_str(),
            r.probe,
            r.t,
            x.join(";"),
            r.value,
            r.reference,
            r.tolerance,
            r.pass
        )
        .unwrap();
    }
    out
}

/// Columns `idx, y_1..y_d, logdet_sum, rho0_logpdf`; the last two are empty
/// when the ensemble was pushed without density tracking.
pub fn ensemble_csv(ens: &PushedEnsemble, timestamp: Option<&str>) -> String {
    let ys: Vec<String> = (1..=ens.dim).map(|k| format!("y_{k}")).collect();
    let mut out = with_timestamp(timestamp, &format!("idx,{},logdet_sum,rho0_logpdf", ys.join(",")));
    for i in 0..ens.len() {
        write!(out, "{}", ens.indices[i]).unwrap();
        for v in ens.point(i) {
            write!(out, ",{v}").unwrap();
        }
        match (&ens.log_det_sums, &ens.initial_log_density) {
            (Some(ld), Some(init)) => writeln!(out, ",{},{}", ld[i], init[i]).unwrap(),
            _ => out.push_str(",,\n"),
        }
    }
    out
}

pub fn points_csv(points: &[f64], dim: usize, timestamp: Option<&str>) -> String {
    let ys: Vec<String> = (1..=dim).map(|k| format!("y_{k}")).collect();
    let mut out = with_timestamp(timestamp, &format!("idx,{}", ys.join(",")));
    for (i, row) in points.chunks_exact(dim).enumerate() {
        write!(out, "{i}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn schedule_csv(report: &ScheduleReport, timestamp: Option<&str>) -> String {
    let mut out = with_timestamp(timestamp, "k,t,h_k");
    let times = report.schedule.times();
    for (k, t) in times.iter().enumerate() {
        let h = times.get(k + 1).map(|n| (n - t).to_string()).unwrap_or_default();
        writeln!(out, "{k},{t},{h}").unwrap();
    }
    out
}

/// One plotted series.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
    pub fit: Option<SlopeFit>,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const ML: f64 = 80.0;
const MR: f64 = 30.0;
const MT: f64 = 40.0;
const MB: f64 = 60.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn decade_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.log10()), hi.max(v.log10()))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Log-log scatter with one fitted line and slope annotation per series.
pub fn loglog_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = decade_range(all().map(|p| p.0));
    let (y0, y1) = decade_range(all().map(|p| p.1));
    let px = |x: f64| ML + (x.log10() - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y.log10() - y0) / (y1 - y0) * (H - MT - MB);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r##"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
        W - ML - MR,
        H - MT - MB
    )
    .unwrap();
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(10f64.powi(e));
        writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{MT}" x2="{x:.1}" y2="{}" stroke="#ddd"/>"##,
            H - MB
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#,
            H - MB + 18.0
        )
        .unwrap();
    }
    for e in (y0 as i32)..=(y1 as i32) {
        let y = py(10f64.powi(e));
        writeln!(
            s,
            r##"<line x1="{ML}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##,
            W - MR
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#,
            ML - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (ML + W - MR) / 2.0,
        H - 16.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
        (MT + H - MB) / 2.0,
        escape(y_label)
    )
    .unwrap();

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for &(x, y) in ser.points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0) {
            writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#,
                px(x),
                py(y)
            )
            .unwrap();
        }
        let mut label = ser.name.to_string();
        if let Some(fit) = ser.fit {
            let xs: Vec<f64> = ser.points.iter().map(|p| p.0).filter(|x| *x > 0.0).collect();
            let (a, b) = xs
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let line = |x: f64| (fit.intercept + fit.slope * x.ln()).exp();
            writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="5,3"/>"#,
                px(a),
                py(line(a)),
                px(b),
                py(line(b))
            )
            .unwrap();
            write!(label, ": slope {:.2} (R² {:.3})", fit.slope, fit.r_squared).unwrap();
        }
        let ly = MT + 18.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
            ML + 12.0,
            ly - 9.0
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, ML + 28.0, escape(&label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

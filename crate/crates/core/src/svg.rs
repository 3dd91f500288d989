//! Minimal self-contained SVG charts.

use std::fmt::Write as _;

use crate::curvefit::FitResult;
use crate::error_analysis::CategorySummary;
use crate::reliability::IccBootstrapReport;
use crate::stats::Quartiles;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        let ypad = (y1 - y0) * 0.05;
        Frame {
            x0,
            x1,
            y0: y0 - ypad,
            y1: y1 + ypad,
        }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame) {
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = PAD,
        bottom = H - PAD,
        right = W - PAD
    );
    for (v, anchor, x, y) in [
        (f.x0, "start", PAD, H - PAD + 14.0),
        (f.x1, "end", W - PAD, H - PAD + 14.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#, short(v));
    }
    for v in [f.y0, f.y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, PAD - 4.0, f.y(v) + 4.0, short(v));
    }
}

fn short(v: f64) -> String {
    format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Empirical points as crosses with the fitted curve.
pub fn learning_curve(title: &str, points: &[(f64, f64)], fit: &FitResult) -> String {
    let (lo, hi) = bounds(points.iter().map(|p| p.0));
    let curve: Vec<(f64, f64)> = (0..=100)
        .map(|i| {
            let n = lo + (hi - lo) * i as f64 / 100.0;
            (n, fit.form.eval(fit.params, n))
        })
        .collect();
    let f = Frame::new(
        points.iter().map(|p| p.0),
        points.iter().map(|p| p.1).chain(curve.iter().map(|p| p.1)),
    );
    let mut s = open(title);
    axes(&mut s, &f);
    let path: Vec<String> = curve
        .iter()
        .enumerate()
        .map(|(i, (n, y))| format!("{}{:.2} {:.2}", if i == 0 { 'M' } else { 'L' }, f.x(*n), f.y(*y)))
        .collect();
    let _ = writeln!(s, r#"<path d="{}" stroke="steelblue" fill="none" stroke-width="1.5"/>"#, path.join(" "));
    for (n, y) in points {
        let (x, y) = (f.x(*n), f.y(*y));
        let _ = writeln!(
            s,
            r#"<path d="M{:.2} {:.2} l8 8 m0 -8 l-8 8" stroke="black"/>"#,
            x - 4.0,
            y - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Box per subsample size; whiskers at 1.5 IQR clipped to the data.
pub fn icc_boxplot(report: &IccBootstrapReport) -> String {
    let all = report.sizes.iter().flat_map(|s| s.values.iter().copied());
    let n = report.sizes.len().max(1) as f64;
    let f = Frame {
        x0: 0.0,
        x1: n,
        ..Frame::new([0.0, n].into_iter(), all)
    };
    let mut s = open("ICC(2,k) by number of raters");
    axes(&mut s, &f);
    let bw = (W - 2.0 * PAD) / n * 0.5;
    for (i, size) in report.sizes.iter().enumerate() {
        let q = Quartiles::of(&size.values);
        let lo_fence = q.q1 - 1.5 * q.iqr();
        let hi_fence = q.q3 + 1.5 * q.iqr();
        let wlo = size.values.iter().copied().filter(|v| *v >= lo_fence).fold(f64::INFINITY, f64::min);
        let whi = size.values.iter().copied().filter(|v| *v <= hi_fence).fold(f64::NEG_INFINITY, f64::max);
        let cx = f.x(i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<path d="M{cx:.2} {:.2} V{:.2} M{cx:.2} {:.2} V{:.2}" stroke="black"/>"#,
            f.y(wlo),
            f.y(q.q1),
            f.y(q.q3),
            f.y(whi)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="lightsteelblue" stroke="black"/>"#,
            cx - bw / 2.0,
            f.y(q.q3),
            (f.y(q.q1) - f.y(q.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{:.2} {:.2} h{bw:.2}" stroke="black" stroke-width="2"/>"#,
            cx - bw / 2.0,
            f.y(q.median)
        );
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 28.0, size.size);
    }
    s.push_str("</svg>\n");
    s
}

/// Paired bars of error share and frequency per category of one criterion.
pub fn share_vs_frequency(criterion: &str, rows: &[&CategorySummary]) -> String {
    let n = rows.len().max(1) as f64;
    let top = rows.iter().flat_map(|r| [r.share, r.freq]).fold(0.0, f64::max).max(1e-9);
    let f = Frame {
        x0: 0.0,
        x1: n,
        y0: 0.0,
        y1: top * 1.05,
    };
    let mut s = open(&format!("{criterion}: error share vs frequency"));
    axes(&mut s, &f);
    let slot = (W - 2.0 * PAD) / n;
    for (i, r) in rows.iter().enumerate() {
        let x = f.x(i as f64) + slot * 0.15;
        for (k, (v, color)) in [(r.share, "indianred"), (r.freq, "gray")].into_iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                x + k as f64 * slot * 0.35,
                f.y(v),
                slot * 0.35,
                f.y(0.0) - f.y(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            f.x(i as f64 + 0.5),
            H - PAD + 14.0,
            escape(&r.category)
        );
    }
    s.push_str("</svg>\n");
    s
}

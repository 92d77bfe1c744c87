//! Static SVG band plots of MSE quantiles on a log scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::experiment::{Axis, QuantileSeries};

/// Values are clamped to this floor before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 44.0;

fn log10c(v: f64) -> f64 {
    v.max(LOG_FLOOR).log10()
}

fn axis_label(axis: Axis) -> &'static str {
    match axis {
        Axis::Iteration => "iteration",
        Axis::ModeledFlops => "flops (modeled)",
        Axis::MeasuredFlops => "flops (measured)",
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    ox: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let w = PANEL_W - MARGIN_L - MARGIN_R;
        if self.x1 > self.x0 {
            self.ox + MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * w
        } else {
            self.ox + MARGIN_L + w / 2.0
        }
    }

    fn py(&self, v: f64) -> f64 {
        let h = PANEL_H - MARGIN_T - MARGIN_B;
        MARGIN_T + (self.y1 - log10c(v)) / (self.y1 - self.y0) * h
    }
}

fn band(out: &mut String, f: &Frame, s: &QuantileSeries, lo: &[f64], hi: &[f64], fill: &str) {
    let _ = write!(out, r#"<path fill="{fill}" stroke="none" d=""#);
    for i in 0..s.len() {
        let _ = write!(out, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, f.px(s.grid[i]), f.py(hi[i]));
    }
    for i in (0..s.len()).rev() {
        let _ = write!(out, "L{:.2} {:.2} ", f.px(s.grid[i]), f.py(lo[i]));
    }
    out.push_str("Z\"/>\n");
}

fn panel(out: &mut String, s: &QuantileSeries, ox: f64) {
    let logs = s.min.iter().chain(&s.max).map(|&v| log10c(v));
    let (lo, hi) = logs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = (lo.floor(), hi.ceil());
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let f = Frame {
        x0: s.grid[0],
        x1: s.grid[s.len() - 1],
        y0,
        y1,
        ox,
    };
    let (left, right) = (ox + MARGIN_L, ox + PANEL_W - MARGIN_R);
    let (top, bottom) = (MARGIN_T, PANEL_H - MARGIN_B);

    let _ = writeln!(
        out,
        r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        right - left,
        bottom - top
    );
    let step = ((y1 - y0) / 8.0).ceil().max(1.0);
    let mut e = y0;
    while e <= y1 {
        let y = f.py(10f64.powf(e));
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">1e{}</text>"##,
            left - 4.0,
            y + 4.0,
            e as i64
        );
        e += step;
    }
    for (x, anchor) in [(f.x0, "start"), (f.x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="{anchor}">{x}</text>"#,
            f.px(x),
            bottom + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        PANEL_H - 8.0,
        axis_label(s.axis)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="18" font-size="12" text-anchor="middle">MSE</text>"#,
        left
    );

    if s.len() == 1 {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#1f4e9c"/>"##,
            f.px(s.grid[0]),
            f.py(s.median[0])
        );
        return;
    }
    band(out, &f, s, &s.min, &s.max, "#c6d4ee");
    band(out, &f, s, &s.q25, &s.q75, "#7f9fd6");
    let _ = write!(out, r##"<path fill="none" stroke="#1f4e9c" stroke-width="1.5" d=""##);
    for i in 0..s.len() {
        let _ = write!(out, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, f.px(s.grid[i]), f.py(s.median[i]));
    }
    out.push_str("\"/>\n");
}

/// Panels side by side in one document.
pub fn render_panels(series: &[&QuantileSeries]) -> String {
    let width = PANEL_W * series.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, s) in series.iter().enumerate() {
        if !s.is_empty() {
            panel(&mut out, s, PANEL_W * i as f64);
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_svg(series: &QuantileSeries) -> String {
    render_panels(&[series])
}

pub fn emit_svg(series: &QuantileSeries, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_svg(series))?;
    Ok(())
}

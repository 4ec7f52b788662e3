//! Minimal SVG emission for line plots, bar charts and heatmaps.

use std::fmt::Write;

use crate::tensor::Tensor;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD
    );
    for (v, anchor, px, py) in [
        (x.0, "start", PAD, H - PAD + 16.0),
        (x.1, "end", W - PAD, H - PAD + 16.0),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{px}" y="{py}" text-anchor="{anchor}">{}</text>"#,
            fmt_num(v)
        );
    }
    for (v, py) in [(y.0, H - PAD), (y.1, PAD + 4.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{py}" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            fmt_num(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line plot of one or more series sharing axes.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series<'_>]) -> String {
    let mut out = String::new();
    header(&mut out, W, H, title);
    let xb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yb = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let yb = (yb.0.min(0.0), yb.1);
    axes(&mut out, xb, yb, xlabel, ylabel);
    let sx = |x: f64| PAD + (x - xb.0) / (xb.1 - xb.0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - yb.0) / (yb.1 - yb.0) * (H - 2.0 * PAD);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[&str], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, W, H, title);
    let ymax = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    axes(&mut out, (0.0, 0.0), (0.0, ymax), "", "fraction");
    let group_w = (W - 2.0 * PAD) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = PAD + ci as f64 * group_w + group_w * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(ci).copied().unwrap_or(0.0);
            let h = v / ymax * (H - 2.0 * PAD);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + si as f64 * bar_w,
                H - PAD - h,
                bar_w,
                h,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            gx + group_w * 0.4,
            H - PAD + 14.0,
            escape(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * (si as f64 + 1.0),
            PALETTE[si % PALETTE.len()],
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Block-average a square matrix down to at most `max_cells` per side.
fn downsample(m: &Tensor, max_cells: usize) -> (Vec<f64>, usize, f64) {
    let n = m.rows();
    let cells = n.min(max_cells).max(1);
    let step = n as f64 / cells as f64;
    let mut out = vec![0.0; cells * cells];
    for ci in 0..cells {
        let (r0, r1) = ((ci as f64 * step) as usize, (((ci + 1) as f64 * step) as usize).min(n));
        for cj in 0..cells {
            let (c0, c1) = ((cj as f64 * step) as usize, (((cj + 1) as f64 * step) as usize).min(n));
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += m.at(r, c) as f64;
                }
            }
            let count = ((r1 - r0) * (c1 - c0)).max(1);
            out[ci * cells + cj] = acc / count as f64;
        }
    }
    (out, cells, step)
}

/// Grayscale heatmap (white = 0, black = max) with boundary lines at `boundaries`.
pub fn heatmap(title: &str, m: &Tensor, boundaries: &[usize]) -> String {
    let size = 512.0;
    let (cells, n, step) = downsample(m, 128);
    let max = cells.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let cell = size / n as f64;
    let mut out = String::new();
    header(&mut out, size + 2.0 * PAD, size + 2.0 * PAD, title);
    for i in 0..n {
        for j in 0..n {
            let v = cells[i * n + j] / max;
            if v <= 0.0 {
                continue;
            }
            // Monotone ramp on sqrt scale so faint mass stays visible.
            let shade = (255.0 * (1.0 - v.sqrt())).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                PAD + j as f64 * cell,
                PAD + i as f64 * cell,
                cell + 0.05,
                cell + 0.05
            );
        }
    }
    for &b in boundaries {
        let p = PAD + b as f64 / step * cell;
        let _ = writeln!(
            out,
            r##"<line x1="{p:.2}" y1="{PAD}" x2="{p:.2}" y2="{}" stroke="#d62728" stroke-width="0.6"/>"##,
            PAD + size
        );
        let _ = writeln!(
            out,
            r##"<line x1="{PAD}" y1="{p:.2}" x2="{}" y2="{p:.2}" stroke="#d62728" stroke-width="0.6"/>"##,
            PAD + size
        );
    }
    let _ = writeln!(
        out,
        r#"<rect x="{PAD}" y="{PAD}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">key position</text>"#,
        PAD + size / 2.0,
        PAD + size + 20.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svgs_are_well_formed_enough() {
        let s = line_plot(
            "t",
            "x",
            "y",
            &[Series {
                name: "a",
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        let b = bar_chart("b", &["x", "y"], &[("s", vec![0.2, 0.8])]);
        assert!(b.contains("<rect"));
        let m = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let h = heatmap("h", &m, &[2]);
        assert_eq!(h.matches("rgb(0,0,0)").count(), 4);
    }
}

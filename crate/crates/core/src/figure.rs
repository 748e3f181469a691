//! Minimal SVG line plots: posterior means with credible bands, truth, data and virtual points.

use std::fmt::Write;

/// One posterior curve with its credible band.
#[derive(Clone, Debug)]
pub struct Curve {
    pub label: String,
    pub color: String,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// One task panel.
#[derive(Clone, Debug, Default)]
pub struct Panel {
    pub title: String,
    pub x: Vec<f64>,
    pub truth: Vec<f64>,
    pub curves: Vec<Curve>,
    pub data: Vec<(f64, f64)>,
    pub virtuals: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 40.0;

fn bounds(p: &Panel) -> (f64, f64, f64, f64) {
    let xs = p.x.iter().chain(p.data.iter().map(|d| &d.0)).chain(p.virtuals.iter().map(|d| &d.0));
    let ys = p
        .truth
        .iter()
        .chain(p.curves.iter().flat_map(|c| c.mean.iter().chain(&c.lower).chain(&c.upper)))
        .chain(p.data.iter().map(|d| &d.1))
        .chain(p.virtuals.iter().map(|d| &d.1));
    let finite = |it: &mut dyn Iterator<Item = &f64>| {
        it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = finite(&mut xs.into_iter());
    let (y0, y1) = finite(&mut ys.into_iter());
    let pad = |a: f64, b: f64| if (b - a).abs() < 1e-12 || !a.is_finite() { (a - 1.0, b + 1.0) } else { (a, b) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let dy = 0.05 * (y1 - y0);
    (x0, x1, y0 - dy, y1 + dy)
}

fn polyline(out: &mut String, pts: &[(f64, f64)], style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    if coords.len() > 1 {
        let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
    }
}

/// Renders panels stacked vertically as an SVG 1.1 document.
pub fn render_svg(panels: &[Panel]) -> String {
    let width = PANEL_W + 2.0 * MARGIN + 120.0;
    let height = panels.len().max(1) as f64 * (PANEL_H + 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    for (k, p) in panels.iter().enumerate() {
        let top = k as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN;
        let (x0, x1, y0, y1) = bounds(p);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * PANEL_W;
        let sy = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>
<text x="{MARGIN}" y="{:.1}">{}</text>
<text x="{MARGIN}" y="{:.1}">{x0:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{x1:.3}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end">{y1:.3}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{y0:.3}</text>"#,
            top - 6.0,
            p.title,
            top + PANEL_H + 14.0,
            MARGIN + PANEL_W,
            top + PANEL_H + 14.0,
            MARGIN - 4.0,
            top + 10.0,
            MARGIN - 4.0,
            top + PANEL_H,
        );
        for c in &p.curves {
            let upper: Vec<(f64, f64)> = p.x.iter().zip(&c.upper).map(|(&x, &y)| (sx(x), sy(y))).collect();
            let lower: Vec<(f64, f64)> = p.x.iter().zip(&c.lower).map(|(&x, &y)| (sx(x), sy(y))).rev().collect();
            let band: Vec<String> = upper
                .iter()
                .chain(&lower)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{x:.2},{y:.2}"))
                .collect();
            if band.len() > 2 {
                let _ = writeln!(s, r#"<polygon fill="{}" fill-opacity="0.2" stroke="none" points="{}"/>"#, c.color, band.join(" "));
            }
            let mean: Vec<(f64, f64)> = p.x.iter().zip(&c.mean).map(|(&x, &y)| (sx(x), sy(y))).collect();
            polyline(&mut s, &mean, &format!(r#"stroke="{}" stroke-width="1.5""#, c.color));
        }
        let truth: Vec<(f64, f64)> = p.x.iter().zip(&p.truth).map(|(&x, &y)| (sx(x), sy(y))).collect();
        polyline(&mut s, &truth, r#"stroke="black" stroke-dasharray="4,3""#);
        for &(x, y) in &p.data {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#, sx(x), sy(y));
        }
        for &(x, y) in &p.virtuals {
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="orange" stroke="black"/>"#, sx(x) - 3.5, sy(y) - 3.5);
        }
        for (j, c) in p.curves.iter().enumerate() {
            let ly = top + 14.0 + 14.0 * j as f64;
            let lx = MARGIN + PANEL_W + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 16.0,
                c.color,
                lx + 20.0,
                ly + 4.0,
                c.label
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

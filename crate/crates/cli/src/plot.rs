//! Predicted-vs-ground-truth profile figures, as PNG or SVG.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use image::{Rgb, RgbImage};

use crate::UsageError;

const W: u32 = 900;
const H: u32 = 520;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 56.0;

const PRED: [u8; 3] = [214, 39, 40];
const GT: [u8; 3] = [31, 119, 180];
const INK: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];

/// A profile read from a `wavelength_nm,value` CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub wavelengths: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn read_curve(path: &Path) -> anyhow::Result<Curve> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut curve = Curve {
        wavelengths: Vec::new(),
        values: Vec::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(w, v)| Some((w.trim().parse::<f64>().ok()?, v.trim().parse::<f64>().ok()?)));
        let Some((w, v)) = parsed else {
            anyhow::bail!("{} line {}: expected `wavelength,value`", path.display(), i + 1);
        };
        curve.wavelengths.push(w);
        curve.values.push(v);
    }
    if curve.values.is_empty() {
        anyhow::bail!("{}: no samples", path.display());
    }
    Ok(curve)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(curves: &[&Curve]) -> Self {
        let xs = curves.iter().flat_map(|c| c.wavelengths.iter().copied());
        let ys = curves.iter().flat_map(|c| c.values.iter().copied());
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((0.0f64, 1.0f64), |(a, b), v| (a.min(v), b.max(v)));
        let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
        Self {
            x: (x0, x1),
            y: (y0, y1),
        }
    }

    fn px(&self, w: f64) -> f64 {
        LEFT + (w - self.x.0) / (self.x.1 - self.x.0) * (W as f64 - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H as f64 - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H as f64 - TOP - BOTTOM)
    }

    fn x_ticks(&self) -> Vec<f64> {
        (0..=5)
            .map(|i| self.x.0 + (self.x.1 - self.x.0) * i as f64 / 5.0)
            .collect()
    }

    fn y_ticks(&self) -> Vec<f64> {
        (0..=4)
            .map(|i| self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0)
            .collect()
    }
}

/// Writes the figure; the format follows the extension of `out`.
pub fn render(out: &Path, pred: &Curve, gt: &Curve, labels: (&str, &str)) -> anyhow::Result<()> {
    let ext = out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => png(pred, gt, labels)
            .save(out)
            .with_context(|| format!("writing {}", out.display())),
        Some("svg") => std::fs::write(out, svg(pred, gt, labels)).with_context(|| format!("writing {}", out.display())),
        _ => Err(UsageError(format!("--out {} must end in .png or .svg", out.display())).into()),
    }
}

fn png(pred: &Curve, gt: &Curve, labels: (&str, &str)) -> RgbImage {
    let f = Frame::new(&[pred, gt]);
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x_lo, x_hi) = (LEFT, W as f64 - RIGHT);
    let (y_lo, y_hi) = (TOP, H as f64 - BOTTOM);

    for t in f.y_ticks() {
        let y = f.py(t);
        line(&mut img, (x_lo, y), (x_hi, y), GRID, 1);
        let label = format!("{t:.2}");
        text(&mut img, x_lo - 8.0 - 8.0 * label.len() as f64, y - 4.0, &label, INK);
    }
    for t in f.x_ticks() {
        let x = f.px(t);
        line(&mut img, (x, y_lo), (x, y_hi), GRID, 1);
        let label = format!("{t:.0}");
        text(&mut img, x - 4.0 * label.len() as f64, y_hi + 8.0, &label, INK);
    }
    line(&mut img, (x_lo, y_hi), (x_hi, y_hi), INK, 1);
    line(&mut img, (x_lo, y_lo), (x_lo, y_hi), INK, 1);
    text(
        &mut img,
        (W as f64 - 15.0 * 8.0) / 2.0,
        H as f64 - 22.0,
        "wavelength (nm)",
        INK,
    );
    text(&mut img, 8.0, 10.0, "normalized count", INK);

    for (curve, color) in [(gt, GT), (pred, PRED)] {
        let pts: Vec<(f64, f64)> = curve
            .wavelengths
            .iter()
            .zip(&curve.values)
            .map(|(&w, &v)| (f.px(w), f.py(v)))
            .collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], color, 2);
        }
    }

    let width = 8.0 * labels.0.len().max(labels.1.len()) as f64 + 48.0;
    let x0 = x_hi - width - 8.0;
    for (i, (label, color)) in [(labels.0, PRED), (labels.1, GT)].into_iter().enumerate() {
        let y = y_lo + 12.0 + 16.0 * i as f64;
        line(&mut img, (x0, y), (x0 + 28.0, y), color, 2);
        text(&mut img, x0 + 36.0, y - 4.0, label, INK);
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3], thickness: i64) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round() as i64;
        let y = (a.1 + (b.1 - a.1) * t).round() as i64;
        for dx in 0..thickness {
            for dy in 0..thickness {
                put(img, x + dx, y + dy, color);
            }
        }
    }
}

fn text(img: &mut RgbImage, x: f64, y: f64, s: &str, color: [u8; 3]) {
    let (x, y) = (x.round() as i64, y.round() as i64);
    for (i, ch) in s.chars().enumerate() {
        let glyph = font8x8::legacy::BASIC_LEGACY
            .get(ch as usize)
            .copied()
            .unwrap_or(font8x8::legacy::NOTHING_TO_DISPLAY);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    put(img, x + 8 * i as i64 + col, y + row as i64, color);
                }
            }
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg(pred: &Curve, gt: &Curve, labels: (&str, &str)) -> String {
    let f = Frame::new(&[pred, gt]);
    let (x_lo, x_hi) = (LEFT, W as f64 - RIGHT);
    let (y_lo, y_hi) = (TOP, H as f64 - BOTTOM);
    let hex = |c: [u8; 3]| format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for t in f.y_ticks() {
        let y = f.py(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x_lo}" y1="{y:.2}" x2="{x_hi}" y2="{y:.2}" stroke="{}"/>"#,
            hex(GRID)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{t:.2}</text>"#,
            x_lo - 8.0,
            y + 4.0
        );
    }
    for t in f.x_ticks() {
        let x = f.px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y_lo}" x2="{x:.2}" y2="{y_hi}" stroke="{}"/>"#,
            hex(GRID)
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t:.0}</text>"#,
            y_hi + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<polyline points="{x_lo},{y_lo} {x_lo},{y_hi} {x_hi},{y_hi}" fill="none" stroke="{}"/>"#,
        hex(INK)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">wavelength (nm)</text>"#,
        W / 2,
        H - 14
    );
    let _ = writeln!(s, r#"<text x="8" y="18">normalized count</text>"#);
    for (curve, color) in [(gt, GT), (pred, PRED)] {
        let pts: Vec<String> = curve
            .wavelengths
            .iter()
            .zip(&curve.values)
            .map(|(&w, &v)| format!("{:.2},{:.2}", f.px(w), f.py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            hex(color)
        );
    }
    let x0 = x_hi - 8.0 * labels.0.len().max(labels.1.len()) as f64 - 56.0;
    for (i, (label, color)) in [(labels.0, PRED), (labels.1, GT)].into_iter().enumerate() {
        let y = y_lo + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/>"#,
            x0 + 28.0,
            hex(color)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x0 + 36.0, y + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(values: &[f64]) -> Curve {
        Curve {
            wavelengths: (0..values.len()).map(|i| 400.0 + i as f64).collect(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn mse_of_known_pair() {
        assert_eq!(mse(&[0.0, 1.0], &[0.0, 0.0]), 0.5);
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn png_draws_both_curves() {
        let img = png(&curve(&[0.0, 0.5, 1.0]), &curve(&[1.0, 0.5, 0.0]), ("a", "b"));
        assert_eq!(img.dimensions(), (W, H));
        let has = |c: [u8; 3]| img.pixels().any(|p| p.0 == c);
        assert!(has(PRED) && has(GT));
    }

    #[test]
    fn svg_escapes_labels() {
        let s = svg(&curve(&[0.0, 1.0]), &curve(&[0.0, 1.0]), ("p<1>", "gt"));
        assert!(s.contains("p&lt;1&gt;"));
        assert_eq!(s.matches("<polyline").count(), 3);
    }
}

//! Standalone SVG figures: 1-D predictive plots (dashed mean, shaded 95%
//! band, context points) and grey-scale image panels.
//!
//! Coordinates are printed with a fixed number of decimals so the same input
//! always yields the same bytes.

use std::fmt::Write;
use std::path::Path;

use crate::error::{write_file, CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f5fa8", "#c0392b", "#27864a", "#7d3c98"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub xs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plot {
    pub title: String,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
    pub points: Vec<(f64, f64)>,
}

/// Data-space rectangle shown by a plot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Plot {
    fn validate(&self) -> Result<()> {
        for s in &self.series {
            if s.xs.len() != s.ys.len() {
                return Err(CliError::Config(format!("series {:?}: {} xs, {} ys", s.label, s.xs.len(), s.ys.len())));
            }
        }
        for b in &self.bands {
            if b.xs.len() != b.lower.len() || b.xs.len() != b.upper.len() {
                return Err(CliError::Config("band arrays differ in length".into()));
            }
        }
        let all_finite = self
            .series
            .iter()
            .flat_map(|s| s.xs.iter().chain(&s.ys))
            .chain(self.bands.iter().flat_map(|b| b.xs.iter().chain(&b.lower).chain(&b.upper)))
            .chain(self.points.iter().flat_map(|(x, y)| [x, y]))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(CliError::Config("plot data contains non-finite values".into()));
        }
        Ok(())
    }

    /// Bounding box of every plotted value, padded by 5% per side.
    pub fn limits(&self) -> Limits {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            xs.extend(&s.xs);
            ys.extend(&s.ys);
        }
        for b in &self.bands {
            xs.extend(&b.xs);
            ys.extend(b.lower.iter().chain(&b.upper));
        }
        for &(x, y) in &self.points {
            xs.push(x);
            ys.push(y);
        }
        Limits { x: padded(&xs), y: padded(&ys) }
    }
}

fn padded(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    (lo - 0.05 * span, hi + 0.05 * span)
}

struct Frame {
    lim: Limits,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.lim.x.0) / (self.lim.x.1 - self.lim.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.lim.y.0) / (self.lim.y.1 - self.lim.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `plot` to an SVG document.
pub fn render_plot(plot: &Plot) -> Result<String> {
    plot.validate()?;
    let f = Frame { lim: plot.limits() };
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(&plot.title)
    )
    .unwrap();
    // axes box and tick labels at the limits
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444" stroke-width="1"/>"##,
        x1 - x0,
        y1 - y0
    )
    .unwrap();
    for (x, anchor, v) in [(x0, "start", f.lim.x.0), (x1, "end", f.lim.x.1)] {
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.2}</text>"#,
            y1 + 14.0
        )
        .unwrap();
    }
    for (y, v) in [(y1, f.lim.y.0), (y0 + 8.0, f.lim.y.1)] {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.2}</text>"#,
            x0 - 4.0
        )
        .unwrap();
    }
    for (i, b) in plot.bands.iter().enumerate() {
        if b.xs.is_empty() {
            continue;
        }
        let mut pts: Vec<String> = b.xs.iter().zip(&b.upper).map(|(&x, &y)| format!("{:.3},{:.3}", f.px(x), f.py(y))).collect();
        pts.extend(b.xs.iter().zip(&b.lower).rev().map(|(&x, &y)| format!("{:.3},{:.3}", f.px(x), f.py(y))));
        writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{}" fill-opacity="0.25" stroke="none"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
    }
    for (i, line) in plot.series.iter().enumerate() {
        if line.xs.is_empty() {
            continue;
        }
        let pts: Vec<String> = line.xs.iter().zip(&line.ys).map(|(&x, &y)| format!("{:.3},{:.3}", f.px(x), f.py(y))).collect();
        let dash = if line.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        writeln!(
            s,
            r#"<polyline class="series" points="{}" fill="none" stroke="{}" stroke-width="2"{dash}><title>{}</title></polyline>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()],
            escape(&line.label)
        )
        .unwrap();
    }
    for &(x, y) in &plot.points {
        writeln!(s, r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="3" fill="black"/>"#, f.px(x), f.py(y)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_plot(plot: &Plot, path: &Path) -> Result<()> {
    write_file(path, render_plot(plot)?.as_bytes())
}

/// A `[h × w]` row-major grey-scale image with values clamped to `[0, 1]`;
/// `None` pixels are drawn as masked (blue).
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Option<f64>>,
}

const CELL: f64 = 8.0;
const GAP: f64 = 16.0;

/// Panels side by side, each scaled to `CELL` units per pixel.
pub fn render_panels(panels: &[Panel]) -> Result<String> {
    for p in panels {
        if p.pixels.len() != p.height * p.width {
            return Err(CliError::Config(format!("panel {:?} has {} pixels for {}x{}", p.title, p.pixels.len(), p.height, p.width)));
        }
    }
    let total_w = panels.iter().map(|p| p.width as f64 * CELL + GAP).sum::<f64>() + GAP;
    let total_h = panels.iter().map(|p| p.height as f64 * CELL).fold(0.0, f64::max) + 2.0 * GAP + 12.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{total_w:.0}" height="{total_h:.0}" fill="white"/>"#).unwrap();
    let mut left = GAP;
    let top = GAP + 12.0;
    for p in panels {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            left + p.width as f64 * CELL / 2.0,
            GAP,
            escape(&p.title)
        )
        .unwrap();
        for i in 0..p.height {
            for j in 0..p.width {
                let fill = match p.pixels[i * p.width + j] {
                    Some(v) => {
                        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        format!("#{g:02x}{g:02x}{g:02x}")
                    }
                    None => "#3a5fcd".to_string(),
                };
                writeln!(
                    s,
                    r#"<rect x="{:.0}" y="{:.0}" width="{CELL:.0}" height="{CELL:.0}" fill="{fill}"/>"#,
                    left + j as f64 * CELL,
                    top + i as f64 * CELL
                )
                .unwrap();
            }
        }
        left += p.width as f64 * CELL + GAP;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_panels(panels: &[Panel], path: &Path) -> Result<()> {
    write_file(path, render_panels(panels)?.as_bytes())
}

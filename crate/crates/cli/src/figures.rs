//! Deterministic SVG figures: raster maps of the grid-cell variables and
//! panels for effects and Engel curves. Fixed palettes, fixed layout, fixed
//! float formatting; rendering the same tables twice produces identical
//! bytes.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use satengel_core::econ::{BinnedEffects, EffectEstimate, EngelFit, LoessCurve, PlaceboRun};
use satengel_core::rasterize::{winsorize, GridCellObservation, WinsorSpec};
use satengel_core::Proxy;

const VIRIDIS: [(f64, f64, f64); 9] = [
    (0.267, 0.005, 0.329),
    (0.281, 0.155, 0.469),
    (0.244, 0.290, 0.537),
    (0.191, 0.407, 0.556),
    (0.147, 0.511, 0.557),
    (0.120, 0.617, 0.536),
    (0.208, 0.718, 0.473),
    (0.430, 0.808, 0.346),
    (0.993, 0.906, 0.144),
];

fn viridis(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let mix = |a: f64, b: f64| ((a + f * (b - a)) * 255.0).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(VIRIDIS[i].0, VIRIDIS[i + 1].0),
        mix(VIRIDIS[i].1, VIRIDIS[i + 1].1),
        mix(VIRIDIS[i].2, VIRIDIS[i + 1].2)
    )
}

pub enum MapVariable {
    Intensity,
    Footprint,
    TinArea,
    NightLight,
}

impl MapVariable {
    fn value(&self, c: &GridCellObservation) -> f64 {
        match self {
            MapVariable::Intensity => c.x as f64,
            MapVariable::Footprint => c.y_footprint,
            MapVariable::TinArea => c.y_tin,
            MapVariable::NightLight => c.y_night,
        }
    }

    fn title(&self) -> &'static str {
        match self {
            MapVariable::Intensity => "Treatment intensity (households treated per cell)",
            MapVariable::Footprint => "Building footprint (m2 per cell)",
            MapVariable::TinArea => "Tin-roof area (m2 per cell)",
            MapVariable::NightLight => "Night light (radiance per cell)",
        }
    }
}

/// Render one grid-cell variable as a colored cell map. The color scale is
/// bounded by the winsorized data range (upper percentile from the config);
/// only retained cells (those with eligible households) are drawn.
pub fn render_map(
    cells: &[GridCellObservation],
    variable: MapVariable,
    winsor_upper_pct: f64,
    path: &Path,
) -> Result<(f64, f64)> {
    let raw: Vec<f64> = cells.iter().map(|c| variable.value(c)).collect();
    let clipped = winsorize(&raw, &WinsorSpec::upper(winsor_upper_pct))
        .context("winsorizing map values")?;
    let lo = clipped.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);

    let min_col = cells.iter().map(|c| c.cell.col).min().unwrap_or(0);
    let max_col = cells.iter().map(|c| c.cell.col).max().unwrap_or(0);
    let min_row = cells.iter().map(|c| c.cell.row).min().unwrap_or(0);
    let max_row = cells.iter().map(|c| c.cell.row).max().unwrap_or(0);
    let ncols = (max_col - min_col + 1) as f64;
    let nrows = (max_row - min_row + 1) as f64;
    let scale = (800.0 / ncols.max(nrows)).min(12.0);
    let width = ncols * scale;
    let height = nrows * scale + 30.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="100%" height="100%" fill="white"/><text x="4" y="16" font-family="sans-serif" font-size="13">{} | scale [{lo:.4}, {hi:.4}]</text>"#,
        variable.title()
    );
    for (c, v) in cells.iter().zip(&clipped) {
        let x = (c.cell.col - min_col) as f64 * scale;
        // SVG y grows downward; row index grows northward.
        let y = (max_row - c.cell.row) as f64 * scale + 30.0;
        let color = viridis((v - lo) / span);
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{scale:.2}" height="{scale:.2}" fill="{color}"/>"#
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok((lo, hi))
}

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.min_x) / (self.max_x - self.min_x).max(1e-12) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.min_y) / (self.max_y - self.min_y).max(1e-12) * self.h
    }
}

/// Binned effects with placebo draws in gray, one panel per outcome; pooled
/// estimate in the subtitle.
pub fn render_effects_figure(
    outcomes: &[(Proxy, &BinnedEffects, &EffectEstimate, Option<&PlaceboRun>)],
    path: &Path,
) -> Result<()> {
    let panel_w = 300.0;
    let panel_h = 240.0;
    let margin = 50.0;
    let width = outcomes.len() as f64 * (panel_w + margin) + margin;
    let height = panel_h + 110.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (k, (proxy, binned, pooled, placebo)) in outcomes.iter().enumerate() {
        // x positions: bin index 0 (reference) .. n bins.
        let n_bins = binned.bins.len();
        let mut min_y: f64 = 0.0;
        let mut max_y: f64 = 0.0;
        for b in &binned.bins {
            min_y = min_y.min(b.estimate.ci95.0);
            max_y = max_y.max(b.estimate.ci95.1);
        }
        if let Some(p) = placebo {
            for d in &p.draws {
                for b in &d.binned.bins {
                    min_y = min_y.min(b.estimate.coefficient);
                    max_y = max_y.max(b.estimate.coefficient);
                }
            }
        }
        let pad = (max_y - min_y).max(1e-9) * 0.08;
        let panel = Panel {
            x0: margin + k as f64 * (panel_w + margin),
            y0: 60.0,
            w: panel_w,
            h: panel_h,
            min_x: -0.5,
            max_x: n_bins as f64 + 0.5,
            min_y: min_y - pad,
            max_y: max_y + pad,
        };

        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="30" font-family="sans-serif" font-size="14">{}</text>"#,
            panel.x0,
            proxy.as_str()
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="48" font-family="sans-serif" font-size="11">pooled: {:.4} [{:.4}, {:.4}] per unit</text>"#,
            panel.x0, pooled.coefficient, pooled.ci95.0, pooled.ci95.1
        );
        // Axes and zero line.
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black" stroke-width="1"/>"#,
            panel.x0, panel.y0, panel.w, panel.h
        );
        let zero_y = panel.py(0.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{zero_y:.2}" x2="{:.1}" y2="{zero_y:.2}" stroke="#888" stroke-dasharray="4 3"/>"#,
            panel.x0,
            panel.x0 + panel.w
        );

        // Placebo draws: gray polylines through (bin index, coefficient),
        // anchored at the zero reference bin.
        if let Some(p) = placebo {
            for d in &p.draws {
                let mut points = format!("{:.2},{:.2}", panel.px(0.0), panel.py(0.0));
                for (j, b) in d.binned.bins.iter().enumerate() {
                    let _ = write!(
                        points,
                        " {:.2},{:.2}",
                        panel.px((j + 1) as f64),
                        panel.py(b.estimate.coefficient)
                    );
                }
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{points}" fill="none" stroke="#bbbbbb" stroke-width="0.6"/>"#
                );
            }
        }

        // Reference bin and estimates with CI whiskers.
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
            panel.px(0.0),
            panel.py(0.0)
        );
        for (j, b) in binned.bins.iter().enumerate() {
            let x = panel.px((j + 1) as f64);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#c0392b" stroke-width="1.5"/>"#,
                panel.py(b.estimate.ci95.0),
                panel.py(b.estimate.ci95.1)
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="#c0392b"/>"#,
                panel.py(b.estimate.coefficient)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                panel.y0 + panel.h + 16.0,
                b.label
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">x=0</text>"#,
            panel.px(0.0),
            panel.y0 + panel.h + 16.0
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

/// Engel panels: control-arm scatter, LOESS curve with band, and the linear
/// fit, one panel per proxy.
pub fn render_engel_figure(
    panels: &[(Proxy, &EngelFit, &LoessCurve, Vec<(f64, f64)>)],
    welfare_label: &str,
    path: &Path,
) -> Result<()> {
    let panel_w = 300.0;
    let panel_h = 240.0;
    let margin = 50.0;
    let width = panels.len() as f64 * (panel_w + margin) + margin;
    let height = panel_h + 100.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (k, (proxy, fit, curve, scatter)) in panels.iter().enumerate() {
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for &(_, q) in scatter {
            min_y = min_y.min(q);
            max_y = max_y.max(q);
        }
        for v in curve.band_lo.iter().chain(&curve.band_hi) {
            min_y = min_y.min(*v);
            max_y = max_y.max(*v);
        }
        let min_x = curve.w.first().copied().unwrap_or(0.0);
        let max_x = curve.w.last().copied().unwrap_or(1.0);
        let panel = Panel {
            x0: margin + k as f64 * (panel_w + margin),
            y0: 50.0,
            w: panel_w,
            h: panel_h,
            min_x,
            max_x,
            min_y,
            max_y,
        };

        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="26" font-family="sans-serif" font-size="14">{} vs {}</text>"#,
            panel.x0,
            proxy.as_str(),
            welfare_label
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="42" font-family="sans-serif" font-size="11">slope {:.6} (se {:.6}), n={}</text>"#,
            panel.x0, fit.beta, fit.se_beta, fit.n
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black" stroke-width="1"/>"#,
            panel.x0, panel.y0, panel.w, panel.h
        );

        // Confidence band polygon.
        let mut band = String::new();
        for i in 0..curve.w.len() {
            let _ = write!(band, "{:.2},{:.2} ", panel.px(curve.w[i]), panel.py(curve.band_hi[i]));
        }
        for i in (0..curve.w.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", panel.px(curve.w[i]), panel.py(curve.band_lo[i]));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="#a8d5e2" fill-opacity="0.6" stroke="none"/>"#,
            band.trim_end()
        );

        // Scatter.
        for &(w, q) in scatter {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.4" fill="#555555" fill-opacity="0.5"/>"#,
                panel.px(w),
                panel.py(q.clamp(panel.min_y, panel.max_y))
            );
        }

        // LOESS curve (solid) and linear fit (dotted).
        let mut pts = String::new();
        for i in 0..curve.w.len() {
            let _ = write!(pts, "{:.2},{:.2} ", panel.px(curve.w[i]), panel.py(curve.fitted[i]));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="#1b6ca8" stroke-width="2"/>"#,
            pts.trim_end()
        );
        let (y1, y2) = (fit.alpha + fit.beta * min_x, fit.alpha + fit.beta * max_x);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c0392b" stroke-width="1.5" stroke-dasharray="5 4"/>"#,
            panel.px(min_x),
            panel.py(y1.clamp(panel.min_y, panel.max_y)),
            panel.px(max_x),
            panel.py(y2.clamp(panel.min_y, panel.max_y))
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

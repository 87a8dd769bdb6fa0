// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static SVG heatmap of an [`EffectMatrix`].
//!
//! Rows are grouped by distance (ascending), one row per token offset; columns
//! are window start layers. Colour is a diverging blue-white-red scale
//! symmetric about zero and clipped at a percentile of `|effect|`.

use std::fmt::Write as _;
use std::path::Path;

use super::{io_err, EffectMatrix, Result, RunnerError};

#[derive(Debug, Clone)]
pub struct HeatmapOptions {
    /// Quantile of `|effect|` mapped to the ends of the scale.
    pub clip_quantile: f64,
    pub cell_width: f64,
    pub cell_height: f64,
    pub title: Option<String>,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        Self {
            clip_quantile: 0.99,
            cell_width: 22.0,
            cell_height: 12.0,
            title: None,
        }
    }
}

const NEGATIVE: [f64; 3] = [33.0, 102.0, 172.0];
const MIDPOINT: [f64; 3] = [247.0, 247.0, 247.0];
const POSITIVE: [f64; 3] = [178.0, 24.0, 43.0];
const LEGEND_STEPS: usize = 21;

fn colour(value: f64, clip: f64) -> String {
    let t = if clip > 0.0 { (value / clip).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t >= 0.0 { POSITIVE } else { NEGATIVE };
    let a = t.abs();
    let c: Vec<u8> = (0..3)
        .map(|i| (MIDPOINT[i] + (end[i] - MIDPOINT[i]) * a).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Nearest-rank quantile of absolute values.
fn abs_quantile(values: impl Iterator<Item = f64>, q: f64) -> f64 {
    let mut abs: Vec<f64> = values.map(f64::abs).filter(|v| v.is_finite()).collect();
    if abs.is_empty() {
        return 0.0;
    }
    abs.sort_by(f64::total_cmp);
    let rank = ((q * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    abs[rank - 1]
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

pub fn heatmap_svg(matrix: &EffectMatrix, opts: &HeatmapOptions) -> Result<String> {
    if matrix.is_empty() {
        return Err(RunnerError::NothingToRender);
    }
    let (nd, no, nw) = matrix.shape();
    let clip = abs_quantile(matrix.values(), opts.clip_quantile);
    let (cw, ch) = (opts.cell_width, opts.cell_height);
    let group_gap = ch * 0.5;
    let left = 170.0;
    let top = 40.0;
    let grid_w = cw * nw as f64;
    let grid_h = (ch * no as f64) * nd as f64 + group_gap * (nd.saturating_sub(1)) as f64;
    let right = 150.0;
    let width = left + grid_w + right;
    let legend_y = top + grid_h + 52.0;
    let height = legend_y + 46.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect class="background" width="100%" height="100%" fill="white"/>"#);
    let title = opts.title.clone().unwrap_or_else(|| {
        format!(
            "Mean patching effect at {} over {} placenames (window width {})",
            matrix.config.site, matrix.count, matrix.config.window_width
        )
    });
    let _ = writeln!(s, r#"<text class="title" x="{left}" y="20" font-size="13">{}</text>"#, escape(&title));

    let mut y = top;
    for d in 0..nd {
        let group_top = y;
        for o in 0..no {
            let label = matrix
                .token_labels
                .get(d)
                .and_then(|row| row.get(o))
                .map(|l| {
                    let (c, k) = (l.clean.trim(), l.corrupted.trim());
                    if c == k { c.to_owned() } else { format!("{c} \u{2192} {k}") }
                })
                .unwrap_or_default();
            let _ = writeln!(
                s,
                r#"<text class="row-label" x="{:.1}" y="{:.1}" text-anchor="end">{} {}</text>"#,
                left - 6.0,
                y + ch * 0.8,
                matrix.offsets[o],
                escape(&label)
            );
            for w in 0..nw {
                let v = matrix.mean_effect[d][o][w];
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}"><title>{} / offset {} / layer {}: {}</title></rect>"#,
                    left + cw * w as f64,
                    y,
                    colour(v, clip),
                    escape(&matrix.distances[d].text),
                    matrix.offsets[o],
                    matrix.windows[w],
                    tick(v)
                );
            }
            y += ch;
        }
        let _ = writeln!(
            s,
            r#"<text class="group-label" x="{:.1}" y="{:.1}">{}</text>"#,
            left + grid_w + 8.0,
            (group_top + y) / 2.0 + 3.0,
            escape(&matrix.distances[d].text)
        );
        y += group_gap;
    }

    let axis_y = top + grid_h;
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{left}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#,
        left + grid_w
    );
    let every = if nw > 30 { 5 } else { 1 };
    for (w, start) in matrix.windows.iter().enumerate().filter(|(w, _)| w % every == 0) {
        let _ = writeln!(
            s,
            r#"<text class="x-tick" x="{:.1}" y="{:.1}" text-anchor="middle">{start}</text>"#,
            left + cw * (w as f64 + 0.5),
            axis_y + 12.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">model layer (window start)</text>"#,
        left + grid_w / 2.0,
        axis_y + 28.0
    );

    let step_w = 12.0;
    for i in 0..LEGEND_STEPS {
        let v = -clip + 2.0 * clip * i as f64 / (LEGEND_STEPS - 1) as f64;
        let _ = writeln!(
            s,
            r#"<rect class="legend-step" x="{:.1}" y="{legend_y:.1}" width="{step_w}" height="10" fill="{}"/>"#,
            left + step_w * i as f64,
            colour(v, clip)
        );
    }
    let legend_w = step_w * LEGEND_STEPS as f64;
    for (x, v) in [(0.0, -clip), (legend_w / 2.0, 0.0), (legend_w, clip)] {
        let _ = writeln!(
            s,
            r#"<text class="legend-tick" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + x,
            legend_y + 22.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="legend-label" x="{:.1}" y="{:.1}">effect (KL nats; clipped at {:.0}th percentile of |effect|)</text>"#,
        left + legend_w + 10.0,
        legend_y + 9.0,
        opts.clip_quantile * 100.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_heatmap(matrix: &EffectMatrix, svg_path: &Path, opts: &HeatmapOptions) -> Result<()> {
    let svg = heatmap_svg(matrix, opts)?;
    std::fs::write(svg_path, svg).map_err(io_err(svg_path))
}

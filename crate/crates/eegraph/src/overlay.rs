//! Saliency overlays: a JSON dump and an SVG rendering of the map next to
//! the electrode graph.

use std::fmt::Write as _;
use std::path::Path;

use eegraph_core::graph::{EegGraph, ElectrodeLayout};
use eegraph_core::interpret::{Overlay, SALIENT};

use crate::container::write_json;
use crate::error::{Error, Result};

/// White at 0 to red at 1; green and blue fall monotonically with `v`.
pub fn heat_color(v: f64) -> [u8; 3] {
    let c = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    [255, c, c]
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

const CELL: f64 = 14.0;
const LABEL_W: f64 = 40.0;
const HEAD_R: f64 = 120.0;

/// Top view of the scalp: x to the right, nose up.
fn project(p: [f64; 3]) -> (f64, f64) {
    (p[0] * HEAD_R, -p[1] * HEAD_R)
}

/// Heatmap of the grid (channels as rows) and the electrode graph with each
/// node filled by its time-averaged saliency.
pub fn render_svg(overlay: &Overlay, layout: &ElectrodeLayout, graph: Option<&EegGraph>) -> Result<String> {
    let n = overlay.channels.len();
    if layout.len() != n {
        return Err(Error::Usage(format!("layout has {} electrodes, map has {n} channels", layout.len())));
    }
    let t = overlay.n_steps;
    let grid_w = LABEL_W + CELL * t as f64;
    let grid_h = CELL * n as f64;
    let cx = grid_w + 40.0 + HEAD_R;
    let cy = 20.0 + HEAD_R;
    let width = cx + HEAD_R + 30.0;
    let height = (grid_h + 20.0).max(2.0 * HEAD_R + 40.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<g id="grid" transform="translate(0,10)">"#);
    for (i, name) in overlay.channels.iter().enumerate() {
        let y = CELL * i as f64;
        let _ = writeln!(s, r#"<text x="2" y="{}">{name}</text>"#, y + CELL - 3.0);
        for j in 0..t {
            let v = overlay.grid[i * t + j];
            let stroke = if v > SALIENT { r#" stroke="black""# } else { "" };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"{stroke}/>"#,
                LABEL_W + CELL * j as f64,
                hex(heat_color(v))
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="graph" transform="translate({cx},{cy})">"#);
    let _ = writeln!(s, r#"<circle cx="0" cy="0" r="{HEAD_R}" fill="none" stroke="gray"/>"#);
    if let Some(g) = graph {
        let wmax = g.weights.iter().copied().fold(0.0, f64::max);
        for i in 0..n {
            for j in 0..n {
                let w = g.weight(i, j);
                if i == j || w <= 0.0 || (!g.directed && j < i) {
                    continue;
                }
                let ((x1, y1), (x2, y2)) = (project(layout.coords[i]), project(layout.coords[j]));
                let _ = writeln!(
                    s,
                    r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="steelblue" stroke-opacity="{:.3}"/>"#,
                    w / wmax
                );
            }
        }
    }
    for (i, name) in overlay.channels.iter().enumerate() {
        let (x, y) = project(layout.coords[i]);
        let v = overlay.channel_means[i];
        let _ = writeln!(
            s,
            r#"<circle class="node" data-channel="{name}" data-value="{v}" cx="{x:.2}" cy="{y:.2}" r="9" fill="{}" stroke="black"/>"#,
            hex(heat_color(v))
        );
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="7">{name}</text>"#, x, y + 2.5);
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

/// Writes `<stem>.json` and `<stem>.svg` into `dir`.
pub fn export_overlay(
    dir: &Path,
    stem: &str,
    overlay: &Overlay,
    layout: &ElectrodeLayout,
    graph: Option<&EegGraph>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_json(&dir.join(format!("{stem}.json")), overlay)?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, render_svg(overlay, layout, graph)?).map_err(Error::io(&svg))
}

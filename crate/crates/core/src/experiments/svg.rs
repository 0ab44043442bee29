use std::fmt::Write;

use super::{Metric, PhaseGrid};

const CELL_W: usize = 40;
const CELL_H: usize = 28;
const LEFT: usize = 60;
const TOP: usize = 30;
const BOTTOM: usize = 50;

/// Color stops from the grid minimum (first) to the maximum (last).
const STOPS: [(u8, u8, u8); 3] = [(0x31, 0x36, 0x95), (0xff, 0xff, 0xbf), (0xa5, 0x00, 0x26)];

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let seg = if t < 0.5 { 0 } else { 1 };
    let u = if t < 0.5 { t * 2.0 } else { (t - 0.5) * 2.0 };
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * u).round() as u8;
    let (a, b) = (STOPS[seg], STOPS[seg + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Renders the grid as a raster of rectangles: SNR increases to the right,
/// N increases upward. Colors run linearly in the metric from `#313695`
/// at the grid minimum through `#ffffbf` to `#a50026` at the maximum.
pub fn render_heatmap_svg(grid: &PhaseGrid, metric: Metric) -> String {
    let (rows, cols) = (grid.rows(), grid.cols());
    let vals = grid.values(metric);
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = LEFT + cols * CELL_W + 10;
    let height = TOP + rows * CELL_H + BOTTOM;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="16">{} at alpha = {} (min {lo:.4}, max {hi:.4})</text>"#, metric.name(), grid.alpha);
    for i in 0..rows {
        let y = TOP + (rows - 1 - i) * CELL_H;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">N={}</text>"#, LEFT - 4, y + CELL_H / 2 + 4, grid.n_axis[i]);
        for j in 0..cols {
            let v = grid.cell(i, j).metric(metric);
            let x = LEFT + j * CELL_W;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}"><title>N={} SNR={:.4} {}={v:.4}</title></rect>"#,
                color((v - lo) / span),
                grid.n_axis[i],
                grid.snr_axis[j],
                metric.name()
            );
        }
    }
    let base = TOP + rows * CELL_H;
    for (j, snr) in grid.snr_axis.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{snr:.3}</text>"#, base + 14);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">SNR</text>"#, LEFT + cols * CELL_W / 2, base + 34);
    s.push_str("</svg>\n");
    s
}

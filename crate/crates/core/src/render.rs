//! Deterministic SVG drawings of vector maps and PPM rasters of BEV grids.

use std::fmt::Write as _;

use crate::map::{Category, Range, VectorMap};
use crate::tensor::Tensor;

/// Pixels per meter.
const SCALE: f64 = 8.0;
const MARGIN: f64 = 30.0;
const GAP: f64 = 40.0;

pub fn category_color(c: Category) -> &'static str {
    match c {
        Category::Boundary => "green",
        Category::Divider => "red",
        Category::PedCrossing => "blue",
    }
}

fn panel(out: &mut String, title: &str, map: Option<&VectorMap>, range: &Range, x0: f64) {
    let (w, h) = (range.width() * SCALE, range.height() * SCALE);
    let px = |p: [f64; 2]| (x0 + (p[0] - range.x_min) * SCALE, MARGIN + (range.y_max - p[1]) * SCALE);
    let _ = writeln!(out, r#"<g><text x="{:.1}" y="{:.1}" font-size="12">{title}</text>"#, x0, MARGIN - 8.0);
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{MARGIN:.1}" width="{w:.1}" height="{h:.1}" fill="white" stroke="black"/>"#
    );
    let step = 10.0;
    let mut y = (range.y_min / step).ceil() * step;
    while y <= range.y_max {
        let (_, py) = px([range.x_min, y]);
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="8" text-anchor="end">{y}</text>"#, x0 - 6.0, py + 3.0);
        y += step;
    }
    let mut x = (range.x_min / step).ceil() * step;
    while x <= range.x_max {
        let (pxx, _) = px([x, range.y_min]);
        let _ = writeln!(out, r#"<line x1="{pxx:.1}" y1="{:.1}" x2="{pxx:.1}" y2="{:.1}" stroke="black"/>"#, MARGIN + h, MARGIN + h + 4.0);
        let _ = writeln!(out, r#"<text x="{pxx:.1}" y="{:.1}" font-size="8" text-anchor="middle">{x}</text>"#, MARGIN + h + 13.0);
        x += step;
    }
    if let Some(map) = map {
        for e in &map.elements {
            let pts: Vec<String> = e
                .points
                .iter()
                .map(|&p| {
                    let (a, b) = px(range.clamp(p));
                    format!("{a:.2},{b:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2" stroke-opacity="{:.3}"/>"#,
                pts.join(" "),
                category_color(e.category),
                e.confidence.clamp(0.2, 1.0)
            );
        }
    }
    out.push_str("</g>\n");
}

/// Ground truth on the left, prediction (when given) on the right, both
/// with metric axes. Stroke opacity follows confidence.
pub fn map_svg(gt: &VectorMap, pred: Option<&VectorMap>, range: &Range) -> String {
    let (w, h) = (range.width() * SCALE, range.height() * SCALE);
    let panels = if pred.is_some() { 2.0 } else { 1.0 };
    let total_w = 2.0 * MARGIN + panels * w + (panels - 1.0) * GAP;
    let total_h = 2.0 * MARGIN + h;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}">"#
    );
    panel(&mut out, &format!("ground truth {}", gt.scene_id), Some(gt), range, MARGIN);
    if let Some(p) = pred {
        panel(&mut out, &format!("prediction {}", p.scene_id), Some(p), range, MARGIN + w + GAP);
    }
    out.push_str("</svg>\n");
    out
}

/// Binary PPM (P6) of one channel of a `[C, H, W]` grid, min-max scaled to
/// gray, with grid row 0 (y_min) at the bottom of the image.
pub fn grid_ppm(grid: &Tensor, channel: usize) -> Option<Vec<u8>> {
    let s = grid.shape();
    if s.len() != 3 || channel >= s[0] {
        return None;
    }
    let (h, w) = (s[1], s[2]);
    let plane = &grid.data()[channel * h * w..(channel + 1) * h * w];
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in (0..h).rev() {
        for c in 0..w {
            let v = ((plane[r * w + c] - lo) / span * 255.0).round() as u8;
            out.extend_from_slice(&[v, v, v]);
        }
    }
    Some(out)
}

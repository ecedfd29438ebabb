use std::f64::consts::TAU;

use rand::Rng;

use super::SceneConfig;
use crate::grid::GridSpec;
use crate::map::{Category, MapElement, Point, VectorMap};

/// Smooth lateral curve `x(y) = base + amp * sin(TAU * (y - y0) / wavelength + phase)`.
#[derive(Clone, Copy)]
struct Curve {
    base: f64,
    amp: f64,
    wavelength: f64,
    phase: f64,
    y0: f64,
}

impl Curve {
    fn x(&self, y: f64) -> f64 {
        self.base + self.amp * (TAU * (y - self.y0) / self.wavelength + self.phase).sin()
    }
}

fn count<R: Rng + ?Sized>(range: [usize; 2], rng: &mut R) -> usize {
    rng.random_range(range[0]..=range[1].max(range[0]))
}

/// Evenly spaced `y` stations over `[ya, yb]` with mild interior jitter.
fn stations<R: Rng + ?Sized>(ya: f64, yb: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let step = (yb - ya) / (k - 1) as f64;
    (0..k)
        .map(|i| {
            let y = ya + i as f64 * step;
            if i == 0 || i + 1 == k {
                y
            } else {
                y + rng.random_range(-0.2..0.2) * step
            }
        })
        .collect()
}

/// Samples road boundaries, lane dividers and pedestrian crossings.
pub fn generate_map<R: Rng + ?Sized>(scene_id: &str, spec: &GridSpec, cfg: &SceneConfig, rng: &mut R) -> VectorMap {
    let r = spec.range;
    let (width, height) = (r.width(), r.height());
    let amp = rng.random_range(0.0..0.05) * width;
    let wavelength = rng.random_range(1.0..2.5) * height;
    let phase = rng.random_range(0.0..TAU);
    let left = Curve {
        base: r.x_min + rng.random_range(0.07..0.2) * width,
        amp,
        wavelength,
        phase,
        y0: r.y_min,
    };
    let right = Curve {
        base: r.x_max - rng.random_range(0.07..0.2) * width,
        amp,
        wavelength,
        phase,
        y0: r.y_min,
    };

    let mut elements = Vec::new();
    let mut push = |category: Category, points: Vec<Point>| {
        let id = elements.len() as u32;
        elements.push(MapElement {
            id,
            category,
            confidence: 1.0,
            points: points.into_iter().map(|p| r.clamp(p)).collect(),
        });
    };

    for curve in [left, right] {
        let k = count(cfg.boundary_vertices, rng).max(2);
        let pts = stations(r.y_min, r.y_max, k, rng).into_iter().map(|y| [curve.x(y), y]).collect();
        push(Category::Boundary, pts);
    }

    let n_div = count(cfg.dividers, rng);
    for i in 0..n_div {
        let frac = (i + 1) as f64 / (n_div + 1) as f64 + rng.random_range(-0.03..0.03);
        let (ya, yb) = if rng.random_bool(0.6) {
            (r.y_min, r.y_max)
        } else {
            let len = rng.random_range(0.4..0.9) * height;
            let start = rng.random_range(r.y_min..r.y_max - len);
            (start, start + len)
        };
        let k = count(cfg.divider_vertices, rng).max(2);
        let pts = stations(ya, yb, k, rng)
            .into_iter()
            .map(|y| [left.x(y) + frac * (right.x(y) - left.x(y)), y])
            .collect();
        push(Category::Divider, pts);
    }

    let n_cross = count(cfg.crossings, rng);
    let margin = 0.08 * height;
    let mut placed: Vec<f64> = Vec::new();
    for _ in 0..n_cross {
        for _attempt in 0..20 {
            let yc = rng.random_range(r.y_min + margin..r.y_max - margin);
            if placed.iter().any(|&y| (y - yc).abs() < 0.12 * height) {
                continue;
            }
            placed.push(yc);
            let (yl, yr) = (yc + rng.random_range(-1.0..1.0), yc + rng.random_range(-1.0..1.0));
            push(Category::PedCrossing, vec![[left.x(yl) + 0.5, yl], [right.x(yr) - 0.5, yr]]);
            break;
        }
    }

    VectorMap::new(scene_id, elements)
}

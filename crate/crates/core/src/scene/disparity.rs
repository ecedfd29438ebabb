use rand::Rng;

use crate::grid::{BevGrid, FlowField, GridSpec};
use crate::tensor::{bilinear_gather, Tensor};

const COARSE_ROWS: usize = 5;
const COARSE_COLS: usize = 3;

/// Smooth random flow: a coarse 5x3 field of uniform values in
/// `[-max, max]` per component, bilinearly upsampled (corners aligned).
pub fn sample_flow<R: Rng + ?Sized>(spec: &GridSpec, max: f64, rng: &mut R) -> FlowField {
    let (h, w) = (spec.h, spec.w);
    let mut flow = Tensor::zeros(&[2, h, w]);
    if max <= 0.0 {
        return FlowField { flow };
    }
    for comp in 0..2 {
        let coarse: Vec<f64> = (0..COARSE_ROWS * COARSE_COLS).map(|_| rng.random_range(-max..=max)).collect();
        for row in 0..h {
            let cy = if h > 1 { row as f64 * (COARSE_ROWS - 1) as f64 / (h - 1) as f64 } else { 0.0 };
            for col in 0..w {
                let cx = if w > 1 { col as f64 * (COARSE_COLS - 1) as f64 / (w - 1) as f64 } else { 0.0 };
                let v = sample_clamped(&coarse, COARSE_ROWS, COARSE_COLS, cy, cx);
                flow.set(&[comp, row, col], v);
            }
        }
    }
    FlowField { flow }
}

/// Bilinear read with border clamping.
fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Distorts a clean grid so that warping the result by `flow` (sampling at
/// `q + flow(q)`) recovers it: each output cell `p` reads the clean grid at
/// the `q` solving `q + flow(q) = p`, found by fixed-point iteration.
/// Resampling here is bicubic so that the bilinear warp is the only
/// interpolation between the clean and the recovered grid.
pub fn apply_disparity(clean: &BevGrid, flow: &FlowField) -> BevGrid {
    let (c, h, w) = (clean.channels(), clean.spec.h, clean.spec.w);
    let hw = h * w;
    let (fy, fx) = flow.flow.data().split_at(hw);
    let mut coords = vec![0.0; 2 * hw];
    for row in 0..h {
        for col in 0..w {
            let (p_r, p_c) = (row as f64, col as f64);
            let (mut q_r, mut q_c) = (p_r, p_c);
            for _ in 0..30 {
                q_r = p_r - sample_clamped(fy, h, w, q_r, q_c);
                q_c = p_c - sample_clamped(fx, h, w, q_r, q_c);
            }
            coords[row * w + col] = q_r;
            coords[hw + row * w + col] = q_c;
        }
    }
    let data = bicubic_gather(clean.features.data(), c, h, w, &coords);
    BevGrid {
        modality: clean.modality,
        features: Tensor::new(vec![c, h, w], data).expect("shape preserved"),
        spec: clean.spec,
    }
}

/// Catmull-Rom weights for the taps at offsets -1, 0, 1, 2 from `floor(t)`.
fn cubic_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic resampling of `x[c, h, w]` at `coords[2, h, w]`, zero outside the grid.
fn bicubic_gather(x: &[f64], c: usize, h: usize, w: usize, coords: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for o in 0..hw {
        let (py, px) = (coords[o], coords[hw + o]);
        let (y0, x0) = (py.floor(), px.floor());
        let (wy, wx) = (cubic_weights(py - y0), cubic_weights(px - x0));
        for (dy, wyv) in wy.iter().enumerate() {
            let yy = y0 as isize + dy as isize - 1;
            if yy < 0 || yy >= h as isize || *wyv == 0.0 {
                continue;
            }
            for (dx, wxv) in wx.iter().enumerate() {
                let xx = x0 as isize + dx as isize - 1;
                if xx < 0 || xx >= w as isize || *wxv == 0.0 {
                    continue;
                }
                let wt = wyv * wxv;
                let src = yy as usize * w + xx as usize;
                for ci in 0..c {
                    out[ci * hw + o] += wt * x[ci * hw + src];
                }
            }
        }
    }
    out
}

/// Cells whose warped sampling position stays at least `margin` cells inside
/// the grid; outside of it zero padding makes recovery undefined.
pub fn valid_region(flow: &FlowField, margin: f64) -> Vec<bool> {
    let (h, w) = (flow.flow.shape()[1], flow.flow.shape()[2]);
    let coords = flow.sampling_coords();
    let hw = h * w;
    (0..hw)
        .map(|i| {
            let (r, c) = (coords.data()[i], coords.data()[hw + i]);
            let (r0, c0) = ((i / w) as f64, (i % w) as f64);
            let inside = |r: f64, c: f64| r >= margin && r <= (h - 1) as f64 - margin && c >= margin && c <= (w - 1) as f64 - margin;
            inside(r0, c0) && inside(r, c)
        })
        .collect()
}

/// Max absolute difference between `clean` and `distorted` warped back by
/// `flow` over the valid region, and the dynamic range of `clean`.
pub fn recovery_error(clean: &BevGrid, distorted: &BevGrid, flow: &FlowField) -> (f64, f64) {
    let (c, h, w) = (clean.channels(), clean.spec.h, clean.spec.w);
    let hw = h * w;
    let restored = bilinear_gather(distorted.features.data(), c, h, w, flow.sampling_coords().data(), h, w);
    let valid = valid_region(flow, 2.0);
    let mut err: f64 = 0.0;
    for ci in 0..c {
        for i in 0..hw {
            if valid[i] {
                err = err.max((restored[ci * hw + i] - clean.features.data()[ci * hw + i]).abs());
            }
        }
    }
    let (lo, hi) = clean
        .features
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (err, hi - lo)
}

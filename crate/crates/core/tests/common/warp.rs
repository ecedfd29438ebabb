use bevmap::grid::{BevGrid, GridSpec, Modality};
use bevmap::map::Range;
use bevmap::scene::{apply_disparity, generate_map, recovery_error, render_modality, sample_flow, SceneConfig};
use bevmap::sgc::warp;
use bevmap::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

/// Largest recovery error relative to dynamic range, pinned from a
/// reference run over seeds 0..50 with some headroom.
pub const RECOVERY_BOUND: f64 = 0.1;

pub fn zero_flow_identity(trials: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..trials {
        let x = Tensor::randn(&[3, 7, 5], 10.0, &mut rng);
        let tape = Tape::new();
        let y = warp(tape.constant(x.clone()), tape.constant(Tensor::zeros(&[2, 7, 5]))).map_err(|e| e.to_string())?;
        ensure(*y.value() == x, || "zero flow changed the grid".into())?;
    }
    Ok(format!("{trials} grids bit-identical"))
}

pub fn integer_shift() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (6, 5);
    let shifts = [(1i64, 0i64), (0, -2), (-3, 1), (2, 2), (7, 0)];
    for (dh, dw) in shifts {
        let x = Tensor::randn(&[2, h, w], 1.0, &mut rng);
        let mut flow = Tensor::zeros(&[2, h, w]);
        for i in 0..h * w {
            flow.data_mut()[i] = dh as f64;
            flow.data_mut()[h * w + i] = dw as f64;
        }
        let tape = Tape::new();
        let y = warp(tape.constant(x.clone()), tape.constant(flow)).map_err(|e| e.to_string())?;
        let y = y.value();
        for c in 0..2 {
            for r in 0..h {
                for q in 0..w {
                    let (sr, sq) = (r as i64 + dh, q as i64 + dw);
                    let inside = (0..h as i64).contains(&sr) && (0..w as i64).contains(&sq);
                    let expect = if inside { x.get(&[c, sr as usize, sq as usize]) } else { 0.0 };
                    ensure(y.get(&[c, r, q]) == expect, || format!("shift ({dh},{dw}) at ({c},{r},{q})"))?;
                }
            }
        }
    }
    Ok(format!("{} shifts exact with zero fill", shifts.len()))
}

fn paper_spec() -> GridSpec {
    GridSpec { range: Range { x_min: -15.0, x_max: 15.0, y_min: -60.0, y_max: 60.0 }, h: 100, w: 25 }
}

pub fn clean_camera(seed: u64) -> BevGrid {
    let spec = paper_spec();
    let cfg = SceneConfig { channels: 8, ..SceneConfig::default() };
    let map = generate_map("s", &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    render_modality(&map, &spec, &cfg, Modality::Camera, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Warping generated disparity back by the ground-truth flow recovers the
/// clean camera grid within the interpolation bound.
pub fn scene_recovery(seeds: u64) -> Check {
    let disparity = SceneConfig::default().disparity_max;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let cam = clean_camera(seed);
        let flow = sample_flow(&cam.spec, disparity, &mut ChaCha8Rng::seed_from_u64(seed + 77));
        let distorted = apply_disparity(&cam, &flow);
        let (err, range) = recovery_error(&cam, &distorted, &flow);
        worst = worst.max(err / range);
    }
    ensure(worst < RECOVERY_BOUND, || format!("worst relative recovery error {worst}"))?;
    Ok(format!("{seeds} scenes, worst relative error {worst:.3} < {RECOVERY_BOUND}"))
}

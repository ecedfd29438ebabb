use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SceneConfig;
use crate::geom::polyline_dist;
use crate::grid::{BevGrid, GridSpec, Modality};
use crate::map::{PerCategory, Point, VectorMap};
use crate::tensor::Tensor;

/// Polyline vertices in continuous `(row, col)` grid coordinates.
fn to_grid_line(points: &[Point], spec: &GridSpec) -> Vec<Point> {
    points
        .iter()
        .map(|&p| {
            let (r, c) = spec.to_grid(p);
            [r, c]
        })
        .collect()
}

/// `[3, H, W]` per-category raster with a Gaussian cross-section of
/// `sigma` cells; overlapping elements of one category combine by max.
/// `jitter` perturbs every vertex independently (meters).
pub fn category_raster<R: Rng + ?Sized>(
    map: &VectorMap,
    spec: &GridSpec,
    sigma: f64,
    jitter: f64,
    gains: &PerCategory<f64>,
    rng: &mut R,
) -> Tensor {
    let (h, w) = (spec.h, spec.w);
    let mut out = Tensor::zeros(&[3, h, w]);
    let noise = Normal::new(0.0, jitter.max(0.0)).expect("jitter is finite");
    let inv = 1.0 / (2.0 * sigma * sigma);
    for e in &map.elements {
        let pts: Vec<Point> = e
            .points
            .iter()
            .map(|p| if jitter > 0.0 { [p[0] + noise.sample(rng), p[1] + noise.sample(rng)] } else { *p })
            .collect();
        let line = to_grid_line(&pts, spec);
        let gain = gains[e.category];
        let plane = &mut out.data_mut()[e.category.index() * h * w..][..h * w];
        for row in 0..h {
            for col in 0..w {
                let d = polyline_dist([row as f64, col as f64], &line);
                let v = gain * (-d * d * inv).exp();
                let cell = &mut plane[row * w + col];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    out
}

/// Fixed per-modality embedding of the 3 category channels into `channels`.
pub fn projection(channels: usize, modality: Modality) -> Tensor {
    let tag = match modality {
        Modality::Camera => 0xCA3E_2A00,
        Modality::Lidar => 0x11DA_2000,
        Modality::Fused => 0xF05E_D000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tag ^ channels as u64);
    Tensor::randn(&[channels, 3], 1.0, &mut rng)
}

fn project(p: &Tensor, raster: &Tensor, h: usize, w: usize) -> Tensor {
    let c = p.shape()[0];
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let dst = &mut out.data_mut()[ci * hw..(ci + 1) * hw];
        for k in 0..3 {
            let wk = p.get(&[ci, k]);
            for (d, s) in dst.iter_mut().zip(&raster.data()[k * hw..(k + 1) * hw]) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Renders one sensor's BEV grid for `map`.
///
/// Camera: vertex jitter, per-scene perturbed projection, full range.
/// LiDAR: exact geometry, per-category gain, empty beyond `lidar_range`,
/// random cell dropout.
pub fn render_modality<R: Rng + ?Sized>(
    map: &VectorMap,
    spec: &GridSpec,
    cfg: &SceneConfig,
    modality: Modality,
    rng: &mut R,
) -> BevGrid {
    let (h, w) = (spec.h, spec.w);
    let features = match modality {
        Modality::Camera | Modality::Fused => {
            let raster = category_raster(map, spec, cfg.raster_sigma, cfg.cam_jitter, &PerCategory::new(1.0, 1.0, 1.0), rng);
            let mut p = projection(cfg.channels, Modality::Camera);
            if cfg.cam_mix_noise > 0.0 {
                let noise = Tensor::randn(p.shape(), cfg.cam_mix_noise, rng);
                for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
                    *a += b;
                }
            }
            project(&p, &raster, h, w)
        }
        Modality::Lidar => {
            let raster = category_raster(map, spec, cfg.raster_sigma, 0.0, &cfg.lidar_gain, rng);
            let mut f = project(&projection(cfg.channels, Modality::Lidar), &raster, h, w);
            let noise = Normal::new(0.0, cfg.lidar_noise.max(0.0)).expect("noise is finite");
            let hw = h * w;
            for row in 0..h {
                for col in 0..w {
                    let p = spec.cell_center(row, col);
                    let far = p[0].hypot(p[1]) > cfg.lidar_range;
                    let dropped = cfg.lidar_dropout > 0.0 && rng.random_bool(cfg.lidar_dropout.clamp(0.0, 1.0));
                    for ci in 0..cfg.channels {
                        let v = &mut f.data_mut()[ci * hw + row * w + col];
                        if far || dropped {
                            *v = 0.0;
                        } else if cfg.lidar_noise > 0.0 {
                            *v += noise.sample(rng);
                        }
                    }
                }
            }
            f
        }
    };
    BevGrid {
        modality,
        features,
        spec: *spec,
    }
}

/// Binary `[H, W]` mask of cells whose centre lies within half a cell of the
/// element; two-point crossings are drawn as their segment.
pub fn rasterize_mask(points: &[Point], spec: &GridSpec) -> Vec<f64> {
    let line = to_grid_line(points, spec);
    let mut out = vec![0.0; spec.h * spec.w];
    for row in 0..spec.h {
        for col in 0..spec.w {
            if polyline_dist([row as f64, col as f64], &line) <= 0.5 + 1e-9 {
                out[row * spec.w + col] = 1.0;
            }
        }
    }
    out
}

//! Deterministic synthetic scenes: vector ground truth plus camera-like and
//! LiDAR-like BEV grids with cross-modal disparity and LiDAR range holes.

mod dataset;
mod disparity;
mod layout;
mod raster;

pub use dataset::{make_dataset, read_scene, write_scene, Dataset, DatasetError, Manifest, SceneEntry, Split, MANIFEST_VERSION, SCENE_MAGIC, SCENE_VERSION};
pub use disparity::{apply_disparity, recovery_error, sample_flow, valid_region};
pub use layout::generate_map;
pub use raster::{category_raster, projection, rasterize_mask, render_modality};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{BevGrid, FlowField, GridSpec, Modality};
use crate::map::{PerCategory, VectorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Feature channels of the rendered grids.
    pub channels: usize,
    /// Inclusive `[min, max]` element counts.
    pub dividers: [usize; 2],
    pub crossings: [usize; 2],
    /// Inclusive keypoint-count ranges for generated polylines.
    pub boundary_vertices: [usize; 2],
    pub divider_vertices: [usize; 2],
    /// Gaussian cross-section of rasterised elements, in cells.
    pub raster_sigma: f64,
    /// Per-vertex camera position jitter, meters.
    pub cam_jitter: f64,
    /// Std of the per-scene perturbation of the camera channel projection.
    pub cam_mix_noise: f64,
    /// Additive per-cell camera noise.
    pub cam_noise: f64,
    /// LiDAR cells farther than this from the ego origin are empty, meters.
    pub lidar_range: f64,
    pub lidar_dropout: f64,
    /// LiDAR response per category relative to the camera.
    pub lidar_gain: PerCategory<f64>,
    pub lidar_noise: f64,
    /// Largest per-component disparity, in cells.
    pub disparity_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            dividers: [1, 4],
            crossings: [0, 3],
            boundary_vertices: [4, 8],
            divider_vertices: [3, 6],
            raster_sigma: 2.0,
            cam_jitter: 0.2,
            cam_mix_noise: 0.05,
            cam_noise: 0.0,
            lidar_range: 30.0,
            lidar_dropout: 0.1,
            lidar_gain: PerCategory::new(1.0, 1.0, 1.0),
            lidar_noise: 0.0,
            disparity_max: 1.5,
        }
    }
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub seed: u64,
    pub gt_map: VectorMap,
    pub cam: BevGrid,
    pub lidar: BevGrid,
    pub gt_flow: FlowField,
}

/// Mixes a dataset seed, split and index into an independent scene seed.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        ^ (split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(grid: &mut BevGrid) {
    for v in grid.features.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Generates a complete scene from its own seed. Every stored value is
/// rounded to `f32` so that the on-disk form reproduces it exactly.
pub fn generate_scene(id: &str, seed: u64, spec: &GridSpec, cfg: &SceneConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_map = generate_map(id, spec, cfg, &mut rng);
    for e in &mut gt_map.elements {
        for p in &mut e.points {
            *p = [p[0] as f32 as f64, p[1] as f32 as f64];
        }
    }
    let clean_cam = render_modality(&gt_map, spec, cfg, Modality::Camera, &mut rng);
    let mut lidar = render_modality(&gt_map, spec, cfg, Modality::Lidar, &mut rng);
    let flow = sample_flow(spec, cfg.disparity_max, &mut rng);
    let mut cam = apply_disparity(&clean_cam, &flow);
    if cfg.cam_noise > 0.0 {
        let noise = crate::tensor::Tensor::randn(cam.features.shape(), cfg.cam_noise, &mut rng);
        for (v, n) in cam.features.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    quantize(&mut cam);
    quantize(&mut lidar);
    let mut gt_flow = flow;
    for v in gt_flow.flow.data_mut() {
        *v = *v as f32 as f64;
    }
    SyntheticScene {
        id: id.to_string(),
        seed,
        gt_map,
        cam,
        lidar,
        gt_flow,
    }
}

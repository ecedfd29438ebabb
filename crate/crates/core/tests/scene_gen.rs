use bevmap::grid::{BevGrid, FlowField, GridSpec, Modality};
use bevmap::map::{Category, PerCategory, Range};
use bevmap::scene::{
    apply_disparity, category_raster, generate_map, generate_scene, make_dataset, recovery_error, render_modality,
    sample_flow, Dataset, SceneConfig, Split,
};
use bevmap::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn paper_spec() -> GridSpec {
    GridSpec {
        range: Range { x_min: -15.0, x_max: 15.0, y_min: -60.0, y_max: 60.0 },
        h: 100,
        w: 25,
    }
}

fn small_cfg() -> SceneConfig {
    SceneConfig { channels: 8, ..SceneConfig::default() }
}

mod common;

use common::warp::clean_camera;

#[test]
fn generation_is_deterministic() {
    let a = generate_scene("s", 42, &paper_spec(), &small_cfg());
    let b = generate_scene("s", 42, &paper_spec(), &small_cfg());
    assert_eq!(a, b);
    assert_eq!(a.gt_map.to_json(), b.gt_map.to_json());
    let c = generate_scene("s", 43, &paper_spec(), &small_cfg());
    assert_ne!(a.gt_map, c.gt_map);
}

#[test]
fn maps_satisfy_invariants_over_many_seeds() {
    let spec = paper_spec();
    let cfg = small_cfg();
    let caps = PerCategory::new(25, 20, 15);
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = generate_map("s", &spec, &cfg, &mut rng);
        m.validate(&spec.range).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        for c in Category::ALL {
            assert!(m.of_category(c).count() <= caps[c]);
        }
        assert_eq!(m.of_category(Category::Boundary).count(), 2);
        assert!((1..=4).contains(&m.of_category(Category::Divider).count()));
        assert!(m.of_category(Category::PedCrossing).count() <= 3);
        for e in m.of_category(Category::PedCrossing) {
            assert_eq!(e.points.len(), 2);
        }
        for e in m.of_category(Category::Boundary) {
            assert_eq!(e.points.first().unwrap()[1], spec.range.y_min);
            assert_eq!(e.points.last().unwrap()[1], spec.range.y_max);
        }
    }
}

#[test]
fn lidar_is_exactly_zero_beyond_effective_range() {
    let spec = paper_spec();
    let cfg = SceneConfig { lidar_noise: 0.05, ..small_cfg() };
    let s = generate_scene("s", 5, &spec, &cfg);
    let (h, w) = (spec.h, spec.w);
    let mut far_cells = 0;
    for row in 0..h {
        for col in 0..w {
            let p = spec.cell_center(row, col);
            if p[0].hypot(p[1]) > cfg.lidar_range {
                far_cells += 1;
                for c in 0..cfg.channels {
                    assert_eq!(s.lidar.features.get(&[c, row, col]), 0.0);
                }
            }
        }
    }
    assert!(far_cells > 0);
}

#[test]
fn noiseless_camera_and_lidar_rasters_coincide() {
    let spec = paper_spec();
    let cfg = small_cfg();
    let map = generate_map("s", &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let ones = PerCategory::new(1.0, 1.0, 1.0);
    let cam = category_raster(&map, &spec, cfg.raster_sigma, 0.0, &ones, &mut ChaCha8Rng::seed_from_u64(1));
    let lidar = category_raster(&map, &spec, cfg.raster_sigma, 0.0, &ones, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(cam, lidar);
}

#[test]
fn lidar_is_sparser_than_camera() {
    let spec = paper_spec();
    let cfg = small_cfg();
    let nonzero = |g: &BevGrid| g.features.data().iter().filter(|v| v.abs() > 1e-6).count();
    let (mut cam_total, mut lidar_total) = (0, 0);
    for seed in 0..100 {
        let map = generate_map("s", &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let cam = render_modality(&map, &spec, &cfg, Modality::Camera, &mut rng);
        let lidar = render_modality(&map, &spec, &cfg, Modality::Lidar, &mut rng);
        cam_total += nonzero(&cam);
        lidar_total += nonzero(&lidar);
    }
    assert!(lidar_total < cam_total, "lidar {lidar_total} vs camera {cam_total}");
}

#[test]
fn zero_disparity_is_identity() {
    let cam = clean_camera(0);
    let flow = sample_flow(&cam.spec, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(flow.flow.data().iter().all(|&v| v == 0.0));
    assert_eq!(apply_disparity(&cam, &flow), cam);
}

#[test]
fn constant_integer_disparity_recovers_exactly() {
    let cam = clean_camera(1);
    let (h, w) = (cam.spec.h, cam.spec.w);
    for (dh, dw) in [(1.0, 0.0), (-2.0, 1.0), (0.0, -1.0)] {
        let flow = FlowField {
            flow: Tensor::from_fn(&[2, h, w], |i| if i < h * w { dh } else { dw }),
        };
        let distorted = apply_disparity(&cam, &flow);
        let (err, _) = recovery_error(&cam, &distorted, &flow);
        assert_eq!(err, 0.0, "flow ({dh}, {dw})");
    }
}

#[test]
fn smooth_disparity_recovers_within_bound() {
    common::pass(common::warp::scene_recovery(50));
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GridSpec { h: 20, w: 10, ..paper_spec() };
    let cfg = small_cfg();
    let ds = make_dataset(dir.path(), 9, &spec, &cfg, 3, 2).unwrap();
    assert_eq!(ds.manifest.count(Split::Train), 3);
    assert_eq!(ds.manifest.count(Split::Test), 2);
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.manifest, ds.manifest);
    for e in &reopened.manifest.scenes {
        let loaded = reopened.load(e).unwrap();
        let fresh = generate_scene(&e.id, e.seed, &spec, &cfg);
        assert_eq!(loaded, fresh, "scene {}", e.id);
    }
}

#[test]
fn corrupt_scene_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GridSpec { h: 10, w: 5, ..paper_spec() };
    let ds = make_dataset(dir.path(), 1, &spec, &small_cfg(), 1, 0).unwrap();
    let path = dir.path().join(&ds.manifest.scenes[0].file);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(ds.load(&ds.manifest.scenes[0]).is_err());
    std::fs::write(dir.path().join("manifest.toml"), "format_version = 'x'").unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

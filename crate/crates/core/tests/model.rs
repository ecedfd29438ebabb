use bevmap::config::{Ablation, RunConfig, Switch};
use bevmap::map::Category;
use bevmap::model::Model;
use bevmap::pec::{positional_features, spatial_mask, Slots};
use bevmap::scene::generate_scene;
use bevmap::sgc::{cross_modal_attend, flatten_cells, unflatten_cells};
use bevmap::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::attention::row_sums;
use common::{attention, gradients, pass, warp as warp_checks};

#[test]
fn full_model_gradients_match_finite_differences() {
    pass(gradients::composed(Ablation { sgc: Switch::On, pec: Switch::On }, gradients::SEEDS));
}

#[test]
fn baseline_model_gradients_match_finite_differences() {
    pass(gradients::composed(Ablation { sgc: Switch::Off, pec: Switch::Off }, gradients::SEEDS));
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    pass(gradients::training_loss(gradients::SEEDS));
}

#[test]
fn every_attention_in_the_network_is_row_normalised() {
    pass(attention::network(10));
}

#[test]
fn cross_modal_attention_sees_every_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let q = tape.param(Tensor::randn(&[12, 4], 3.0, &mut rng));
    let k = tape.param(Tensor::randn(&[12, 4], 3.0, &mut rng));
    let v = tape.param(Tensor::randn(&[12, 4], 1.0, &mut rng));
    let out = cross_modal_attend(q, k, v).unwrap();
    assert_eq!(out.shape(), vec![12, 4]);
    let probs = tape.attention_probs();
    assert_eq!(probs.len(), 1);
    assert_eq!(probs[0].1, 12);
    row_sums(&tape).unwrap();
}

#[test]
fn flatten_and_unflatten_are_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
    let tape = Tape::new();
    let f = flatten_cells(tape.constant(x.clone())).unwrap();
    assert_eq!(f.shape(), vec![20, 3]);
    assert_eq!(f.value().get(&[7, 2]), x.get(&[2, 1, 2]));
    let back = unflatten_cells(f, 4, 5).unwrap();
    assert_eq!(*back.value(), x);
}

#[test]
fn warp_zero_flow_is_bit_exact_identity() {
    pass(warp_checks::zero_flow_identity(10));
}

#[test]
fn warp_integer_flow_shifts_with_zero_fill() {
    pass(warp_checks::integer_shift());
}

#[test]
fn warp_gradients_match_finite_differences() {
    pass(gradients::warp_op(gradients::SEEDS));
}

#[test]
fn spatial_mask_is_a_per_cell_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let m = spatial_mask(tape.constant(f.clone()), tape.constant(b.clone())).unwrap();
    let m = m.value();
    assert_eq!(m.shape(), &[3, 6]);
    for k in 0..3 {
        for cell in 0..6 {
            let want: f64 = (0..4).map(|c| f.get(&[k, c]) * b.data()[c * 6 + cell]).sum();
            assert!((m.get(&[k, cell]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn positional_features_are_bounded_and_distinct() {
    let p = positional_features(5, 4, 2);
    assert_eq!(p.shape(), &[20, 2 + 4 * 2]);
    assert!(p.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    let rows: Vec<&[f64]> = p.data().chunks(10).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert_ne!(rows[i], rows[j]);
        }
    }
}

#[test]
fn slots_partition_elements_and_points() {
    let cfg = RunConfig::default();
    let s = Slots::from_config(&cfg.model);
    assert_eq!(s.elements, 60);
    assert_eq!(s.points, 25 * 2 + 20 * 10 + 15 * 30);
    let mut next_e = 0;
    let mut next_p = 0;
    for (g, c) in s.groups.iter().zip(Category::ALL) {
        assert_eq!(g.category, c);
        assert_eq!(g.elem_offset, next_e);
        assert_eq!(g.point_offset, next_p);
        next_e += g.elements;
        next_p += g.elements * g.points;
    }
    for m in 0..s.elements {
        let g = s.group_of(m);
        assert!(m >= g.elem_offset && m < g.elem_offset + g.elements);
    }
}

#[test]
fn emitted_elements_respect_threshold_and_layout() {
    let cfg = RunConfig::benchmark();
    let model = Model::new(&cfg);
    let scene = generate_scene("s", 9, &cfg.grid, &cfg.scene);
    for threshold in [0.0, 0.3, 0.4] {
        let mut c = cfg.clone();
        c.threshold = threshold;
        let m = Model { config: c, ..model.clone() };
        let map = m.predict(&scene).unwrap();
        assert_eq!(map.scene_id, "s");
        for e in &map.elements {
            assert!(e.confidence >= threshold);
            assert_eq!(e.points.len(), cfg.model.points[e.category]);
            assert!(e.points.iter().all(|p| cfg.grid.range.contains(*p)));
        }
        if threshold == 0.0 {
            assert_eq!(map.elements.len(), cfg.model.total_elements());
        }
    }
}

#[test]
fn forward_is_deterministic_and_seed_dependent() {
    let cfg = RunConfig::benchmark();
    let scene = generate_scene("s", 1, &cfg.grid, &cfg.scene);
    let a = Model::new(&cfg).infer(&scene).unwrap();
    let b = Model::new(&cfg).infer(&scene).unwrap();
    assert_eq!(a, b);
    let c = Model::new(&RunConfig { seed: 1, ..cfg }).infer(&scene).unwrap();
    assert_ne!(a, c);
}


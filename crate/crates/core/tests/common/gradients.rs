use bevmap::config::{Ablation, ModelConfig, RunConfig};
use bevmap::grid::GridSpec;
use bevmap::heads::total_loss;
use bevmap::map::{Category, MapElement, PerCategory, Range, VectorMap};
use bevmap::model::Model;
use bevmap::sgc::warp;
use bevmap::tensor::{attention, grad_check, Binding, GradCheckReport, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;
/// Denominator floor of the relative error. Key-side biases get an exactly
/// zero gradient (softmax is shift invariant) that both estimates only
/// reproduce to rounding noise.
pub const FLOOR: f64 = 1e-5;

fn verdict(rep: &GradCheckReport, what: &str, seed: u64, worst: &mut f64) -> Result<(), String> {
    let w = rep.worst_floored(FLOOR);
    *worst = worst.max(w);
    ensure(!rep.non_finite && w < TOL, || format!("{what} seed {seed}: max rel err {w:e}"))
}

type OpFn = dyn for<'t> Fn(&[Var<'t>]) -> bevmap::tensor::Result<Var<'t>>;

/// One case per differentiable tape operation: inputs for a seed and the op.
fn op_cases(g: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Box<OpFn>, f64)> {
    let mut r = |s: &[usize], std: f64| Tensor::randn(s, std, g);
    let a = r(&[3, 4], 1.0);
    let b = r(&[3, 4], 1.0);
    let row = r(&[4], 1.0);
    let cube = r(&[3, 2, 2], 1.0);
    let logits = r(&[5, 4], 1.0);
    let tgt = Tensor::from_fn(&[5, 4], |i| (i % 3 == 0) as u8 as f64);
    let (q, k, v, bias) = (r(&[2, 3, 4], 1.0), r(&[2, 5, 4], 1.0), r(&[2, 5, 3], 1.0), r(&[1, 5], 1.0));
    let row_bias = r(&[2, 3, 5], 1.0);
    let conv = [r(&[2, 4, 3], 1.0), r(&[3, 2, 3, 3], 0.5), r(&[3], 0.5)];
    let grid = r(&[2, 4, 5], 1.0);
    // Fractional parts stay inside [0.1, 0.9] so the step never crosses a cell edge.
    let coords = Tensor::from_fn(&[2, 3, 3], |_| g.random_range(-1.0..5.0f64).floor() + g.random_range(0.1..0.9));
    let (m1, m2) = (Tensor::randn(&[3, 5], 1.0, g), Tensor::randn(&[5, 2], 1.0, g));
    let vec7 = Tensor::randn(&[7], 1.0, g);
    let targets = [0usize, 3, 2, 3, 1];
    let weights = [1.0, 0.1, 2.0, 0.1, 1.0];
    let ab = vec![a.clone(), b.clone()];
    let ar = vec![a.clone(), row.clone()];
    let one = vec![a.clone()];
    vec![
        ("matmul", vec![m1, m2], Box::new(|v: &[Var]| v[0].matmul(v[1])), 1e-5),
        ("transpose", one.clone(), Box::new(|v: &[Var]| v[0].transpose()), 1e-5),
        ("reshape", one.clone(), Box::new(|v: &[Var]| v[0].reshape(&[2, 6])), 1e-5),
        ("add", ab.clone(), Box::new(|v: &[Var]| v[0].add(v[1])), 1e-5),
        ("sub", ab.clone(), Box::new(|v: &[Var]| v[0].sub(v[1])), 1e-5),
        ("mul", ab.clone(), Box::new(|v: &[Var]| v[0].mul(v[1])), 1e-5),
        ("add_row", ar.clone(), Box::new(|v: &[Var]| v[0].add_row(v[1])), 1e-5),
        ("mul_row", ar, Box::new(|v: &[Var]| v[0].mul_row(v[1])), 1e-5),
        ("scale", one.clone(), Box::new(|v: &[Var]| v[0].scale(-1.7)), 1e-5),
        ("add_scalar", one.clone(), Box::new(|v: &[Var]| v[0].add_scalar(0.3)), 1e-5),
        ("relu", one.clone(), Box::new(|v: &[Var]| v[0].relu()), 1e-5),
        ("sigmoid", one.clone(), Box::new(|v: &[Var]| v[0].sigmoid()), 1e-5),
        ("softmax", vec![vec7], Box::new(|v: &[Var]| v[0].softmax()), 1e-5),
        ("concat", ab, Box::new(|v: &[Var]| Var::concat(&[v[0], v[1]])), 1e-5),
        ("narrow", one.clone(), Box::new(|v: &[Var]| v[0].narrow(1, 2)), 1e-5),
        ("gather_rows", one.clone(), Box::new(|v: &[Var]| v[0].gather_rows(&[2, 0, 2])), 1e-5),
        ("sum", one.clone(), Box::new(|v: &[Var]| v[0].sum()), 1e-5),
        ("mean", one.clone(), Box::new(|v: &[Var]| v[0].mean()), 1e-5),
        ("mean_axis_0", one.clone(), Box::new(|v: &[Var]| v[0].mean_axis(0)), 1e-5),
        ("mean_axis_1", one, Box::new(|v: &[Var]| v[0].mean_axis(1)), 1e-5),
        ("mean_pool", vec![cube.clone()], Box::new(|v: &[Var]| v[0].mean_pool()), 1e-5),
        ("channel_norm", vec![cube], Box::new(|v: &[Var]| v[0].channel_norm(1e-5)), 1e-5),
        ("conv3x3", conv.to_vec(), Box::new(|v: &[Var]| v[0].conv3x3(v[1], v[2])), 1e-5),
        ("bilinear", vec![grid, coords], Box::new(|v: &[Var]| v[0].bilinear_sample(v[1])), 1e-4),
        ("attention", vec![q.clone(), k.clone(), v.clone(), bias], Box::new(|v: &[Var]| attention(v[0], v[1], v[2], Some(v[3]))), 1e-5),
        ("attention_row_bias", vec![q, k, v, row_bias], Box::new(|v: &[Var]| attention(v[0], v[1], v[2], Some(v[3]))), 1e-5),
        ("cross_entropy", vec![logits.clone()], Box::new(move |v: &[Var]| v[0].cross_entropy(&targets, &weights)), 1e-5),
        ("bce_with_logits", vec![logits.clone()], Box::new({
            let tgt = tgt.clone();
            move |v: &[Var]| v[0].bce_with_logits(&tgt)
        }), 1e-5),
        ("mse", vec![logits.clone()], Box::new(move |v: &[Var]| v[0].mse(&tgt)), 1e-5),
        ("scalar_fn", vec![logits], Box::new(|v: &[Var]| {
            let x = v[0].value();
            let value = x.data().iter().map(|e| e * e).sum();
            Var::scalar_fn(&[v[0]], value, vec![Tensor::from_fn(x.shape(), |i| 2.0 * x.data()[i])])
        }), 1e-5),
    ]
}

/// Every tape operation over `seeds` seeds.
pub fn ops(seeds: u64) -> Check {
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for seed in 0..seeds {
        let mut g = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (name, inputs, f, step) in op_cases(&mut g) {
            let rep = grad_check(&inputs, step, seed, |_, v| f(v)).map_err(|e| format!("{name}: {e}"))?;
            verdict(&rep, name, seed, &mut worst)?;
            if seed == 0 {
                names.push(name);
            }
        }
    }
    Ok(format!("{} ops x {seeds} seeds, worst {worst:.1e}", names.len()))
}

/// Tiny model: 4x3 grid, 4 channels, one layer, 4 element slots.
pub fn tiny(seed: u64, ablation: Ablation) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.grid = GridSpec { range: Range { x_min: -3.0, x_max: 3.0, y_min: -4.0, y_max: 4.0 }, h: 4, w: 3 };
    cfg.model = ModelConfig {
        channels: 4,
        layers: 1,
        caps: PerCategory::new(1, 1, 2),
        points: PerCategory::new(2, 3, 3),
        flow_blocks: 1,
        pos_freqs: 1,
        query_std: 0.5,
        ..ModelConfig::default()
    };
    cfg.scene.channels = 4;
    cfg.ablation = ablation;
    cfg
}

/// Camera and LiDAR grids followed by every parameter.
pub fn inputs(model: &Model, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (c, h, w) = (model.config.model.channels, model.config.grid.h, model.config.grid.w);
    let mut v = vec![Tensor::randn(&[c, h, w], 1.0, rng), Tensor::randn(&[c, h, w], 1.0, rng)];
    v.extend(model.params.iter().map(|(name, t)| {
        if name == "sgc.flow.head.b" {
            // Samples at exactly integer offsets sit on bilinear kinks.
            Tensor::new(vec![2], vec![0.37, -0.41]).unwrap()
        } else {
            t.clone()
        }
    }));
    v
}

/// Every prediction output reduced to one scalar with fixed weights.
pub fn readout<'t>(tape: &'t Tape, model: &Model, v: &[Var<'t>], seed: u64) -> bevmap::tensor::Result<Var<'t>> {
    let p = Binding::from_vars(v[2..].to_vec());
    let out = model.forward(&p, v[0], v[1])?;
    let pr = out.predictions;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut parts = vec![pr.logits, pr.keypoints, pr.masks];
    parts.extend(pr.flow);
    let mut acc: Option<Var<'t>> = None;
    for x in parts {
        let w = tape.constant(Tensor::from_fn(&x.shape(), |_| rng.random_range(-1.0..1.0)));
        let term = x.mul(w)?.sum()?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Composed forward pass of one ablation, all outputs, all inputs.
pub fn composed(ablation: Ablation, seeds: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = Model::new(&tiny(seed, ablation));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&model, &mut rng);
        let rep = grad_check(&xs, 1e-5, seed, |tape, v| readout(tape, &model, v, seed)).map_err(|e| e.to_string())?;
        verdict(&rep, ablation.label(), seed, &mut worst)?;
    }
    Ok(format!("{} x {seeds} seeds, worst {worst:.1e}", ablation.label()))
}

pub fn tiny_gt(range: &Range, rng: &mut ChaCha8Rng) -> VectorMap {
    let mut pt = || [rng.random_range(range.x_min..range.x_max), rng.random_range(range.y_min..range.y_max)];
    let elements = vec![
        MapElement { id: 0, category: Category::PedCrossing, confidence: 1.0, points: vec![pt(), pt()] },
        MapElement { id: 1, category: Category::Divider, confidence: 1.0, points: vec![pt(), pt(), pt()] },
        MapElement { id: 2, category: Category::Boundary, confidence: 1.0, points: vec![pt(), pt()] },
    ];
    VectorMap::new("gt", elements)
}

/// Full training loss (matching, keypoints, masks, flow) of the full model.
pub fn training_loss(seeds: u64) -> Check {
    let ab = Ablation::default();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut cfg = tiny(seed, ab);
        cfg.loss.flow_supervision = true;
        let model = Model::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs = inputs(&model, &mut rng);
        let gt = tiny_gt(&cfg.grid.range, &mut rng);
        let gt_flow = Tensor::randn(&[2, cfg.grid.h, cfg.grid.w], 0.5, &mut rng);
        let slots = model.slots().clone();
        let rep = grad_check(&xs, 1e-5, seed, |_, v| {
            let p = Binding::from_vars(v[2..].to_vec());
            let out = model.forward(&p, v[0], v[1])?;
            Ok(total_loss(&out.predictions, &gt, Some(&gt_flow), &cfg.grid, &slots, &cfg.loss)?.0)
        })
        .map_err(|e| e.to_string())?;
        verdict(&rep, "training loss", seed, &mut worst)?;
    }
    Ok(format!("training loss x {seeds} seeds, worst {worst:.1e}"))
}

/// The flow warp with respect to both the grid and the flow.
pub fn warp_op(seeds: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        // Keep sample positions away from integer crossings where bilinear is kinked.
        let flow = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(0.1..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let rep = grad_check(&[x, flow], 1e-6, seed, |_, v| warp(v[0], v[1])).map_err(|e| e.to_string())?;
        verdict(&rep, "warp", seed, &mut worst)?;
    }
    Ok(format!("warp x {seeds} seeds, worst {worst:.1e}"))
}

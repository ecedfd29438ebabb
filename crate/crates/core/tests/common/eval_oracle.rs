use bevmap::eval::{chamfer_distance, evaluate, EvalConfig};
use bevmap::map::{Category, MapElement, Point, VectorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

pub const INTERVAL: f64 = 0.5;

/// Reference evaluator written from the protocol description: within each
/// scene, predictions are visited by descending confidence (ties by index)
/// and each claims the nearest unclaimed ground truth when strictly closer
/// than the threshold; hits across scenes are ranked by confidence (ties by
/// scene then visit order) and AP is the all-point interpolated area.
/// `None` when the category has no ground truth.
pub fn brute_force(preds: &[VectorMap], gts: &[VectorMap], c: Category, t: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (s, g) in gts.iter().enumerate() {
        let p = preds.iter().find(|p| p.scene_id == g.scene_id).unwrap();
        let pe: Vec<&MapElement> = p.elements.iter().filter(|e| e.category == c).collect();
        let ge: Vec<&MapElement> = g.elements.iter().filter(|e| e.category == c).collect();
        n_gt += ge.len();
        let mut visit: Vec<usize> = (0..pe.len()).collect();
        // Insertion sort keeps equal confidences in index order.
        for i in 1..visit.len() {
            let mut j = i;
            while j > 0 && pe[visit[j - 1]].confidence < pe[visit[j]].confidence {
                visit.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut claimed = vec![false; ge.len()];
        for (rank, &i) in visit.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in ge.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let d = chamfer_distance(&pe[i].points, &g.points, INTERVAL).unwrap();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            let hit = match best {
                Some((j, d)) if d < t => {
                    claimed[j] = true;
                    true
                }
                _ => false,
            };
            ranked.push((pe[i].confidence, s, rank, hit));
        }
    }
    if n_gt == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let prec: Vec<f64> = (0..ranked.len())
        .map(|k| ranked[..=k].iter().filter(|r| r.3).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..ranked.len() {
        if ranked[k].3 {
            total += prec[k..].iter().copied().fold(0.0, f64::max);
        }
    }
    Some(total / n_gt as f64)
}

fn random_polyline(rng: &mut ChaCha8Rng, anchor: Point, n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| [anchor[0] + rng.random_range(-0.8..0.8), anchor[1] + i as f64 * 2.0 + rng.random_range(-0.8..0.8)])
        .collect()
}

fn points_for(c: Category, rng: &mut ChaCha8Rng) -> usize {
    match c {
        Category::PedCrossing => 2,
        _ => rng.random_range(2..=4),
    }
}

/// Up to 5 scenes with up to 5 elements each; predictions are noisy copies
/// of the ground truth plus distractors, with confidences on a coarse grid so
/// that ties occur. Returns `(predictions, ground truth)`.
pub fn micro_dataset(seed: u64) -> (Vec<VectorMap>, Vec<VectorMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = rng.random_range(1..=5);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for s in 0..scenes {
        let id = format!("s{s}");
        let mut g = Vec::new();
        let mut p = Vec::new();
        for e in 0..rng.random_range(0..=5) {
            let c = Category::ALL[rng.random_range(0..3)];
            let anchor = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let n = points_for(c, &mut rng);
            let pts = random_polyline(&mut rng, anchor, n);
            g.push(MapElement { id: e, category: c, confidence: 1.0, points: pts.clone() });
            if rng.random_bool(0.8) {
                let noisy = pts.iter().map(|q| [q[0] + rng.random_range(-0.6..0.6), q[1] + rng.random_range(-0.6..0.6)]).collect();
                p.push((c, noisy));
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            let c = Category::ALL[rng.random_range(0..3)];
            let anchor = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let n = points_for(c, &mut rng);
            p.push((c, random_polyline(&mut rng, anchor, n)));
        }
        let p = p
            .into_iter()
            .enumerate()
            .map(|(i, (category, points))| MapElement {
                id: i as u32,
                category,
                confidence: rng.random_range(1..=10) as f64 / 10.0,
                points,
            })
            .collect();
        gts.push(VectorMap::new(id.clone(), g));
        preds.push(VectorMap::new(id, p));
    }
    // Prediction order should not matter for pairing.
    preds.reverse();
    (preds, gts)
}

/// The evaluator against the brute force, per category, threshold and mAP.
pub fn matches_brute_force(seeds: u64) -> Check {
    let cfg = EvalConfig::default();
    let mut compared = 0;
    for seed in 0..seeds {
        let (preds, gts) = micro_dataset(seed);
        let report = evaluate(&preds, &gts, &cfg).map_err(|e| e.to_string())?;
        for (name, thresholds) in cfg.settings() {
            let setting = report.setting(name).ok_or("missing setting")?;
            let mut aps = Vec::new();
            for c in Category::ALL {
                for (k, &t) in thresholds.iter().enumerate() {
                    let b = brute_force(&preds, &gts, c, t);
                    let got = setting.per_category[c][k].ap;
                    ensure(got == b, || format!("seed {seed} {name} {c} t={t}: {got:?} vs {b:?}"))?;
                    aps.extend(b);
                    compared += 1;
                }
            }
            let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
            ensure(setting.map == map, || format!("seed {seed} {name}: mAP {} vs {map}", setting.map))?;
        }
    }
    Ok(format!("{seeds} micro-datasets, {compared} APs exactly equal"))
}

/// AP never decreases as the distance threshold grows.
pub fn monotone_in_threshold(seeds: u64) -> Check {
    let cfg = EvalConfig { hard: vec![0.3, 0.6, 0.9, 1.2, 2.0, 5.0], easy: vec![10.0], interval: INTERVAL };
    for seed in 0..seeds {
        let (preds, gts) = micro_dataset(seed);
        let r = evaluate(&preds, &gts, &cfg).map_err(|e| e.to_string())?;
        let hard = r.setting("hard").ok_or("missing setting")?;
        for c in Category::ALL {
            let aps: Vec<Option<f64>> = hard.per_category[c].iter().map(|t| t.ap).collect();
            for w in aps.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    ensure(a <= b + 1e-12, || format!("seed {seed} {c}: {aps:?}"))?;
                }
            }
        }
    }
    Ok(format!("{seeds} datasets x 6 thresholds"))
}

/// Multiplying every confidence by a positive constant leaves the report unchanged.
pub fn confidence_scale_invariant(seeds: u64) -> Check {
    let cfg = EvalConfig::default();
    for seed in 0..seeds {
        let (preds, gts) = micro_dataset(seed);
        let scale = ChaCha8Rng::seed_from_u64(seed).random_range(0.01..1.0);
        let scaled: Vec<VectorMap> = preds
            .iter()
            .map(|m| {
                let mut m = m.clone();
                for e in &mut m.elements {
                    e.confidence *= scale;
                }
                m
            })
            .collect();
        let a = evaluate(&preds, &gts, &cfg).map_err(|e| e.to_string())?;
        let b = evaluate(&scaled, &gts, &cfg).map_err(|e| e.to_string())?;
        ensure(a.settings == b.settings, || format!("seed {seed}: scale {scale} changed the report"))?;
    }
    Ok(format!("{seeds} datasets"))
}

use bevmap::config::{Ablation, Switch};
use bevmap::model::Model;
use bevmap::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradients::tiny;
use super::{ensure, Check};

/// Checks every recorded attention row; returns how many attentions ran.
pub fn row_sums(tape: &Tape) -> Result<usize, String> {
    let recorded = tape.attention_probs();
    for (probs, t) in &recorded {
        for row in probs.chunks(*t) {
            let s: f64 = row.iter().sum();
            ensure((s - 1.0).abs() < 1e-9, || format!("attention row sums to {s}"))?;
        }
    }
    Ok(recorded.len())
}

/// Forward passes of every ablation on random grids of widely varying
/// scale; every attention in SGC and PEC must be row-normalised.
pub fn network(seeds: u64) -> Check {
    let (mut rows, mut attns) = (0usize, 0usize);
    for ab in Ablation::GRID {
        for seed in 0..seeds {
            let mut cfg = tiny(seed, ab);
            cfg.grid.h = 6;
            cfg.model.layers = 2;
            let model = Model::new(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let scale = rng.random_range(0.1..30.0);
            let cam = tape.constant(Tensor::randn(&[4, 6, 3], scale, &mut rng));
            let lidar = tape.constant(Tensor::randn(&[4, 6, 3], scale, &mut rng));
            model.forward(&p, cam, lidar).map_err(|e| e.to_string())?;
            let n = row_sums(&tape)?;
            // Per decoder layer: point cross, 3 grouped point selves, element
            // cross, element self and 2 point-element exchanges per group.
            let expected = match (ab.sgc, ab.pec) {
                (Switch::Off, Switch::Off) => 1,
                (Switch::On, Switch::Off) => 3,
                (Switch::Off, Switch::On) => 2 * 12,
                (Switch::On, Switch::On) => 2 + 2 * 12,
            };
            ensure(n == expected, || format!("{}: {n} attentions, expected {expected}", ab.label()))?;
            attns += n;
            rows += tape.attention_probs().iter().map(|(p, t)| p.len() / t).sum::<usize>();
        }
    }
    Ok(format!("{attns} attentions, {rows} rows, 4 ablations x {seeds} seeds"))
}

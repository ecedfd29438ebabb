use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::{Result, Tensor};

/// Floor of the relative-error denominator.
pub const GRAD_CHECK_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max elementwise `|a - n| / max(|a|, |n|, eps)` for each input.
    pub max_rel_err: Vec<f64>,
    pub step: f64,
    /// Set when any analytic or numeric gradient entry was not finite.
    pub non_finite: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.worst() < tol
    }

    /// Worst relative error with the denominator floored at `floor`, for
    /// inputs whose true gradient is exactly zero and where both estimates
    /// are rounding noise.
    pub fn worst_floored(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.data().iter().zip(n.data()))
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` may return any shape; it is reduced to a scalar by a fixed random
/// weighting drawn from `seed` so that ops whose outputs have a constant sum
/// (softmax) still get a non-trivial check.
pub fn grad_check<F>(inputs: &[Tensor], step: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let loss = out.mul(tape.constant(weights.clone()))?.sum()?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut non_finite = false;
    for (i, a) in analytic.iter().enumerate() {
        let mut num = Tensor::zeros(inputs[i].shape());
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * step);
            num.data_mut()[j] = n;
            let an = a.data()[j];
            if !n.is_finite() || !an.is_finite() {
                non_finite = true;
                continue;
            }
            let rel = (an - n).abs() / an.abs().max(n.abs()).max(GRAD_CHECK_EPS);
            worst = worst.max(rel);
        }
        numeric.push(num);
        max_rel_err.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err,
        step,
        non_finite,
        analytic,
        numeric,
    })
}

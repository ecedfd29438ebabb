use bevmap::heads::{assignment_cost, dynamic_point_match, hungarian};
use bevmap::map::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

pub fn l1(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

/// Minimum over every injective row-to-column map (or column-to-row map when
/// there are more rows), summed in row order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, chosen: &mut Vec<Option<usize>>, skips: usize, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(assignment_cost(cost, chosen));
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                chosen.push(Some(col));
                rec(cost, row + 1, used, chosen, skips, best);
                chosen.pop();
                used[col] = false;
            }
        }
        if skips > 0 {
            chosen.push(None);
            rec(cost, row + 1, used, chosen, skips - 1, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; c], &mut Vec::new(), r.saturating_sub(c), &mut best);
    best
}

/// Cheapest order-preserving placement over both traversal directions by
/// enumerating every strictly increasing index subsequence.
pub fn brute_point_match(pred: &[Point], gt: &[Point]) -> f64 {
    let (n, k) = (pred.len(), gt.len());
    let rev: Vec<Point> = gt.iter().rev().copied().collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        for g in [gt, rev.as_slice()] {
            let mut c = 0.0;
            for (j, &i) in idx.iter().enumerate() {
                c += l1(pred[i], g[j]);
            }
            best = best.min(c);
        }
    }
    best
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect()
}

/// Hungarian assignment against exhaustive search on up to 6x6 matrices.
pub fn assignment(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = hungarian(&cost);
        ensure(a.len() == rows, || format!("seed {seed}: {} rows assigned of {rows}", a.len()))?;
        ensure(a.iter().flatten().count() == rows.min(cols), || format!("seed {seed}: not a full matching"))?;
        let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        ensure(seen.len() == rows.min(cols), || format!("seed {seed}: columns reused"))?;
        let (got, want) = (assignment_cost(&cost, &a), brute_assignment(&cost));
        ensure(got == want, || format!("seed {seed}: cost {got} vs exhaustive {want}"))?;
    }
    Ok(format!("{seeds} matrices up to 6x6, costs equal"))
}

/// Order-preserving point matching against exhaustive subsequences, N <= 7, K <= 4.
pub fn point_match(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=7);
        let k = rng.random_range(1..=n.min(4));
        let pred = random_points(&mut rng, n);
        let gt = random_points(&mut rng, k);
        let m = dynamic_point_match(&pred, &gt).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = brute_point_match(&pred, &gt);
        ensure(m.match_cost == want, || format!("seed {seed} n {n} k {k}: cost {} vs exhaustive {want}", m.match_cost))?;
        ensure(m.assign.len() == k, || format!("seed {seed}: {} assigned of {k}", m.assign.len()))?;
        let order: Vec<usize> = if m.reversed { m.assign.iter().rev().copied().collect() } else { m.assign.clone() };
        ensure(order.windows(2).all(|w| w[0] < w[1]), || format!("seed {seed}: not order preserving"))?;
        let recomputed: f64 = m.assign.iter().zip(&gt).map(|(&i, g)| l1(pred[i], *g)).sum();
        ensure((recomputed - m.match_cost).abs() < 1e-12, || format!("seed {seed}: cost does not match assignment"))?;
    }
    Ok(format!("{seeds} cases N<=7 K<=4, costs equal"))
}

//! Element assignment and order-preserving keypoint correspondence.

use thiserror::Error;

use crate::geom::{dist, segment_dist};
use crate::map::Point;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match {k} ground-truth points onto {n} predicted points")]
    TooManyGtPoints { k: usize, n: usize },
    #[error("ground truth has no points")]
    EmptyGt,
}

/// Minimum-cost assignment of rows to distinct columns.
///
/// Returns, for each row, its column. When there are more rows than columns
/// only `cols` rows are assigned and the rest get `None`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let mut out = vec![None; rows];
        for (j, r) in hungarian(&t).into_iter().enumerate() {
            if let Some(i) = r {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // Shortest augmenting paths with potentials; 1-based with column 0 as
    // the virtual source.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}

fn l1(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

/// Correspondence between an ordered ground-truth keypoint sequence and a
/// longer predicted one.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMatch {
    /// Predicted index of each ground-truth point, in the ground truth's own order.
    pub assign: Vec<usize>,
    /// The ground truth was traversed end to start.
    pub reversed: bool,
    /// Total L1 distance of the assigned pairs.
    pub match_cost: f64,
    /// Sum over unassigned predictions of their distance to the segment
    /// joining the nearest assigned predictions on either side.
    pub penalty: f64,
}

impl PointMatch {
    pub fn loss(&self, collinear: f64) -> f64 {
        self.match_cost + collinear * self.penalty
    }
}

/// Cheapest strictly increasing placement of `gt` on `pred` in one direction.
fn dp_one_way(pred: &[Point], gt: &[Point]) -> (f64, Vec<usize>) {
    let (n, k) = (pred.len(), gt.len());
    // best[i]: min cost with the current gt point at pred i; back[j][i]
    // stores the predecessor's pred index.
    let mut best: Vec<f64> = (0..n).map(|i| l1(pred[i], gt[0])).collect();
    let mut back = vec![vec![usize::MAX; n]; k];
    for j in 1..k {
        let mut next = vec![f64::INFINITY; n];
        let mut run = f64::INFINITY;
        let mut arg = usize::MAX;
        for i in 0..n {
            if i > 0 && best[i - 1] < run {
                run = best[i - 1];
                arg = i - 1;
            }
            if arg != usize::MAX {
                next[i] = run + l1(pred[i], gt[j]);
                back[j][i] = arg;
            }
        }
        best = next;
    }
    let (mut i, cost) = best
        .iter()
        .enumerate()
        .fold((usize::MAX, f64::INFINITY), |(bi, bc), (i, &c)| if c < bc { (i, c) } else { (bi, bc) });
    let mut path = vec![0; k];
    for j in (0..k).rev() {
        path[j] = i;
        if j > 0 {
            i = back[j][i];
        }
    }
    (cost, path)
}

/// Nearest assigned predictions before and after each unassigned one.
pub fn neighbours(n: usize, assigned: &[bool]) -> Vec<(Option<usize>, Option<usize>)> {
    let mut out = vec![(None, None); n];
    let mut last = None;
    for i in 0..n {
        if assigned[i] {
            last = Some(i);
        } else {
            out[i].0 = last;
        }
    }
    last = None;
    for i in (0..n).rev() {
        if assigned[i] {
            last = Some(i);
        } else {
            out[i].1 = last;
        }
    }
    out
}

fn collinearity(pred: &[Point], assign: &[usize]) -> f64 {
    let mut assigned = vec![false; pred.len()];
    for &i in assign {
        assigned[i] = true;
    }
    neighbours(pred.len(), &assigned)
        .iter()
        .enumerate()
        .filter(|(i, _)| !assigned[*i])
        .map(|(i, nb)| match *nb {
            (Some(a), Some(b)) => segment_dist(pred[i], pred[a], pred[b]).0,
            (Some(a), None) | (None, Some(a)) => dist(pred[i], pred[a]),
            (None, None) => 0.0,
        })
        .sum()
}

/// Order-preserving match of `gt` (K points) onto `pred` (N >= K points),
/// trying both traversal directions of the ground truth. O(N K).
pub fn dynamic_point_match(pred: &[Point], gt: &[Point]) -> Result<PointMatch, MatchError> {
    let (n, k) = (pred.len(), gt.len());
    if k == 0 {
        return Err(MatchError::EmptyGt);
    }
    if k > n {
        return Err(MatchError::TooManyGtPoints { k, n });
    }
    let (fwd_cost, fwd) = dp_one_way(pred, gt);
    let rev_gt: Vec<Point> = gt.iter().rev().copied().collect();
    let (rev_cost, rev) = dp_one_way(pred, &rev_gt);
    let (match_cost, reversed, assign) = if rev_cost < fwd_cost {
        (rev_cost, true, rev.into_iter().rev().collect::<Vec<_>>())
    } else {
        (fwd_cost, false, fwd)
    };
    let penalty = collinearity(pred, &assign);
    Ok(PointMatch { assign, reversed, match_cost, penalty })
}

/// Gradient of `match_cost + collinear * penalty` with respect to the
/// predicted points, holding the correspondence fixed.
pub fn point_loss_grad(pred: &[Point], gt: &[Point], m: &PointMatch, collinear: f64) -> Vec<Point> {
    let mut g = vec![[0.0; 2]; pred.len()];
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let mut assigned = vec![false; pred.len()];
    for (j, &i) in m.assign.iter().enumerate() {
        assigned[i] = true;
        g[i][0] += sign(pred[i][0] - gt[j][0]);
        g[i][1] += sign(pred[i][1] - gt[j][1]);
    }
    if collinear == 0.0 {
        return g;
    }
    for (i, nb) in neighbours(pred.len(), &assigned).into_iter().enumerate() {
        if assigned[i] {
            continue;
        }
        let p = pred[i];
        let (foot, wa, wb, a, b) = match nb {
            (Some(a), Some(b)) => {
                let (_, t) = segment_dist(p, pred[a], pred[b]);
                let f = [pred[a][0] + t * (pred[b][0] - pred[a][0]), pred[a][1] + t * (pred[b][1] - pred[a][1])];
                (f, 1.0 - t, t, a, b)
            }
            (Some(a), None) | (None, Some(a)) => (pred[a], 1.0, 0.0, a, a),
            (None, None) => continue,
        };
        let d = dist(p, foot);
        if d == 0.0 {
            continue;
        }
        let u = [(p[0] - foot[0]) / d, (p[1] - foot[1]) / d];
        for c in 0..2 {
            g[i][c] += collinear * u[c];
            g[a][c] -= collinear * wa * u[c];
            g[b][c] -= collinear * wb * u[c];
        }
    }
    g
}

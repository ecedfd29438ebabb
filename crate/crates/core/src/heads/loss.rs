use serde::{Deserialize, Serialize};

use super::matching::{dynamic_point_match, hungarian, point_loss_grad, MatchError, PointMatch};
use super::{class_probs, Predictions, BACKGROUND, NUM_CLASSES};
use crate::config::LossConfig;
use crate::geom::polyline_dist;
use crate::grid::GridSpec;
use crate::map::{Category, Point, VectorMap};
use crate::pec::Slots;
use crate::scene::rasterize_mask;
use crate::sgc::endpoint_error;
use crate::tensor::{Result, Tensor, TensorError, Var};

/// One predicted slot assigned to one ground-truth element.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementMatch {
    pub slot: usize,
    /// Index into the ground-truth map's elements.
    pub gt: usize,
    pub points: PointMatch,
}

/// Weighted loss components of one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub kp: f64,
    pub mask: f64,
    pub flow: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.cls += o.cls;
        self.kp += o.kp;
        self.mask += o.mask;
        self.flow += o.flow;
    }
}

impl LossBreakdown {
    pub fn scaled(self, s: f64) -> Self {
        Self { total: self.total * s, cls: self.cls * s, kp: self.kp * s, mask: self.mask * s, flow: self.flow * s }
    }
}

fn slot_points(keypoints: &Tensor, first: usize, n: usize) -> Vec<Point> {
    (first..first + n).map(|r| [keypoints.get(&[r, 0]), keypoints.get(&[r, 1])]).collect()
}

/// Symmetric mean point-to-curve distance between two polylines.
pub fn curve_distance(a: &[Point], b: &[Point]) -> f64 {
    let ab = a.iter().map(|p| polyline_dist(*p, b)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| polyline_dist(*p, a)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

/// Hungarian assignment of ground-truth elements to slots of their own
/// category, with cost `-ln p(category) + lambda * curve distance`.
pub fn match_elements(
    probs: &Tensor,
    keypoints: &Tensor,
    gt: &VectorMap,
    slots: &Slots,
    cfg: &LossConfig,
) -> std::result::Result<Vec<ElementMatch>, MatchError> {
    let mut out = Vec::new();
    for c in Category::ALL {
        let g = slots.group(c);
        let gts: Vec<usize> = (0..gt.elements.len()).filter(|&i| gt.elements[i].category == c).collect();
        if gts.is_empty() {
            continue;
        }
        let preds: Vec<Vec<Point>> = (0..g.elements)
            .map(|e| slot_points(keypoints, g.point_offset + e * g.points, g.points))
            .collect();
        let cost: Vec<Vec<f64>> = gts
            .iter()
            .map(|&i| {
                let gp = &gt.elements[i].points;
                (0..g.elements)
                    .map(|e| {
                        let p = probs.get(&[g.elem_offset + e, c.index()]).max(1e-12);
                        -p.ln() + cfg.match_distance * curve_distance(&preds[e], gp)
                    })
                    .collect()
            })
            .collect();
        for (row, slot) in hungarian(&cost).into_iter().enumerate() {
            if let Some(e) = slot {
                let gi = gts[row];
                let points = dynamic_point_match(&preds[e], &gt.elements[gi].points)?;
                out.push(ElementMatch { slot: g.elem_offset + e, gt: gi, points });
            }
        }
    }
    out.sort_by_key(|m| m.slot);
    Ok(out)
}

/// Weighted sum of classification, keypoint, mask and (optionally) flow
/// losses for one scene.
pub fn total_loss<'t>(
    pred: &Predictions<'t>,
    gt: &VectorMap,
    gt_flow: Option<&Tensor>,
    spec: &GridSpec,
    slots: &Slots,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let logits = pred.logits.value();
    let keypoints = pred.keypoints.value();
    let probs = class_probs(&logits);
    let matches = match_elements(&probs, &keypoints, gt, slots, cfg)
        .map_err(|e| TensorError::InvalidArgument { op: "total_loss", reason: e.to_string() })?;

    let m = slots.elements;
    let mut targets = vec![BACKGROUND; m];
    let mut weights = vec![cfg.background; m];
    for mt in &matches {
        targets[mt.slot] = gt.elements[mt.gt].category.index();
        weights[mt.slot] = 1.0;
    }
    debug_assert!(targets.iter().all(|&t| t < NUM_CLASSES));
    let cls = pred.logits.cross_entropy(&targets, &weights)?.scale(cfg.cls)?;
    let mut total = cls;
    let mut parts = LossBreakdown { cls: cls.value().item(), ..Default::default() };

    if !matches.is_empty() {
        let mut grad = Tensor::zeros(keypoints.shape());
        let mut value = 0.0;
        let norm = matches.len() as f64;
        for mt in &matches {
            let g = slots.group_of(mt.slot);
            let first = g.point_offset + (mt.slot - g.elem_offset) * g.points;
            let pts = slot_points(&keypoints, first, g.points);
            let gp = &gt.elements[mt.gt].points;
            let scale = cfg.kp / (g.points as f64 * norm);
            value += scale * mt.points.loss(cfg.collinear);
            for (k, d) in point_loss_grad(&pts, gp, &mt.points, cfg.collinear).into_iter().enumerate() {
                grad.data_mut()[(first + k) * 2] += scale * d[0];
                grad.data_mut()[(first + k) * 2 + 1] += scale * d[1];
            }
        }
        let kp = Var::scalar_fn(&[pred.keypoints], value, vec![grad])?;
        parts.kp = value;
        total = total.add(kp)?;

        let rows: Vec<usize> = matches.iter().map(|mt| mt.slot).collect();
        let hw = spec.cells();
        let mut target = Vec::with_capacity(rows.len() * hw);
        for mt in &matches {
            target.extend(rasterize_mask(&gt.elements[mt.gt].points, spec));
        }
        let target = Tensor::new(vec![rows.len(), hw], target)?;
        let mask = pred.masks.gather_rows(&rows)?.bce_with_logits(&target)?.scale(cfg.mask)?;
        parts.mask = mask.value().item();
        total = total.add(mask)?;
    }

    if cfg.flow_supervision && cfg.flow > 0.0 {
        if let (Some(flow), Some(gt_flow)) = (pred.flow, gt_flow) {
            let (v, g) = endpoint_error(&flow.value(), gt_flow);
            let g = g.map(|x| x * cfg.flow);
            let f = Var::scalar_fn(&[flow], v * cfg.flow, vec![g])?;
            parts.flow = v * cfg.flow;
            total = total.add(f)?;
        }
    }
    parts.total = total.value().item();
    Ok((total, parts))
}

//! Class, keypoint and mask decoders, prediction emission, and the
//! matching-based training loss.

mod loss;
mod matching;

pub use loss::{curve_distance, match_elements, total_loss, ElementMatch, LossBreakdown};
pub use matching::{
    assignment_cost, dynamic_point_match, hungarian, neighbours, point_loss_grad, MatchError, PointMatch,
};

use rand::Rng;

use crate::map::{MapElement, Range, VectorMap};
use crate::nn::{Linear, Mlp};
use crate::pec::{spatial_mask, Slots};
use crate::tensor::{softmax_rows, Binding, ParamSet, Result, Tensor, TensorError, Var};

/// Class index of "no element".
pub const BACKGROUND: usize = 3;
pub const NUM_CLASSES: usize = 4;

/// Raw decoder outputs of one scene.
#[derive(Clone, Copy, Debug)]
pub struct Predictions<'t> {
    /// `[M, 4]`.
    pub logits: Var<'t>,
    /// `[P, 2]` meters.
    pub keypoints: Var<'t>,
    /// `[M, HW]`.
    pub masks: Var<'t>,
    /// `[2, H, W]` when the fusion stage predicts flow.
    pub flow: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub class: Mlp,
    pub keypoint: Mlp,
    pub mask_proj: Linear,
    pub range: Range,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, channels: usize, range: Range, rng: &mut R) -> Self {
        Self {
            class: Mlp::new(ps, "heads.class", channels, channels, NUM_CLASSES, rng),
            keypoint: Mlp::new(ps, "heads.keypoint", channels, channels, 2, rng),
            mask_proj: Linear::new(ps, "heads.mask", channels, channels, rng),
            range,
        }
    }

    /// Logits `[M, 4]`: ped, div, bou, background.
    pub fn classify<'t>(&self, p: &Binding<'t>, elements: Var<'t>) -> Result<Var<'t>> {
        self.class.forward(p, elements)
    }

    /// Keypoints `[P, 2]` in meters, squashed into the perception range.
    pub fn keypoints<'t>(&self, p: &Binding<'t>, points: Var<'t>) -> Result<Var<'t>> {
        let u = self.keypoint.forward(p, points)?;
        to_range(u, &self.range)
    }

    /// Mask logits `[M, HW]`.
    pub fn masks<'t>(&self, p: &Binding<'t>, elements: Var<'t>, bev: Var<'t>) -> Result<Var<'t>> {
        spatial_mask(self.mask_proj.forward(p, elements)?, bev)
    }
}

/// `sigmoid(u)` mapped affinely onto `[x_min, x_max] x [y_min, y_max]`.
pub fn to_range<'t>(u: Var<'t>, range: &Range) -> Result<Var<'t>> {
    if u.shape().last() != Some(&2) {
        return Err(TensorError::InvalidArgument { op: "to_range", reason: "expects [.., 2]".into() });
    }
    let tape = u.tape();
    let size = tape.constant(Tensor::new(vec![2], vec![range.width(), range.height()])?);
    let lo = tape.constant(Tensor::new(vec![2], vec![range.x_min, range.y_min])?);
    u.sigmoid()?.mul_row(size)?.add_row(lo)
}

/// Row-wise class probabilities of `[M, 4]` logits.
pub fn class_probs(logits: &Tensor) -> Tensor {
    let mut data = logits.data().to_vec();
    softmax_rows(&mut data, NUM_CLASSES);
    Tensor::new(logits.shape().to_vec(), data).expect("shape preserved")
}

/// Emits every slot whose probability of its own group's category reaches
/// `threshold`, carrying the slot's keypoints.
pub fn emit(scene_id: &str, logits: &Tensor, keypoints: &Tensor, slots: &Slots, threshold: f64) -> VectorMap {
    let probs = class_probs(logits);
    let mut elements = Vec::new();
    for g in &slots.groups {
        for e in 0..g.elements {
            let m = g.elem_offset + e;
            let category = g.category;
            let confidence = probs.get(&[m, category.index()]);
            if confidence < threshold {
                continue;
            }
            let first = g.point_offset + e * g.points;
            let points = (first..first + g.points)
                .map(|r| [keypoints.get(&[r, 0]), keypoints.get(&[r, 1])])
                .collect();
            elements.push(MapElement { id: m as u32, category, confidence, points });
        }
    }
    VectorMap::new(scene_id, elements)
}

//! Camera/LiDAR BEV fusion: cross-modal attention, per-modality refinement,
//! learned disparity flow that warps the camera grid onto the LiDAR grid,
//! and a final fusion convolution.

use rand::Rng;

use crate::grid::identity_coords;
use crate::nn::{ConvBlock, Linear};
use crate::tensor::{attention, Binding, ParamSet, Result, Tensor, TensorError, Var};

/// Index of each modality's parameters.
pub const CAM: usize = 0;
pub const LIDAR: usize = 1;

#[derive(Clone, Debug)]
pub struct ModalityParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub refine: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Sgc {
    pub channels: usize,
    pub modality: [ModalityParams; 2],
    pub flow_blocks: Vec<ConvBlock>,
    pub flow_head: ConvBlock,
    pub fuse: ConvBlock,
}

/// Output of the fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct Fused<'t> {
    /// `[C, H, W]`.
    pub grid: Var<'t>,
    /// `[2, H, W]` (dh, dw) in cells; absent for the concatenation baseline.
    pub flow: Option<Var<'t>>,
}

fn check_geometry(a: &Var<'_>, b: &Var<'_>, op: &'static str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sa != sb {
        return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// `[C, H, W] -> [HW, C]`.
pub fn flatten_cells(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// `[HW, C] -> [C, H, W]`.
pub fn unflatten_cells(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let c = x.shape()[1];
    x.transpose()?.reshape(&[c, h, w])
}

/// `softmax(q k^T / sqrt(d)) v` between the two modalities' cell sequences.
pub fn cross_modal_attend<'t>(q_a: Var<'t>, k_b: Var<'t>, v_b: Var<'t>) -> Result<Var<'t>> {
    if q_a.shape()[0] != k_b.shape()[0] {
        return Err(TensorError::ShapeMismatch { op: "cross_modal_attend", lhs: q_a.shape(), rhs: k_b.shape() });
    }
    attention(q_a, k_b, v_b, None)
}

/// Samples `x` at `(h + dh, w + dw)` with zero padding.
pub fn warp<'t>(x: Var<'t>, flow: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if flow.shape() != [2, s[1], s[2]] {
        return Err(TensorError::ShapeMismatch { op: "warp", lhs: s, rhs: flow.shape() });
    }
    let base = x.tape().constant(identity_coords(s[1], s[2]));
    x.bilinear_sample(flow.add(base)?)
}

impl Sgc {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, channels: usize, flow_blocks: usize, norm: bool, rng: &mut R) -> Self {
        let c = channels;
        let modality = ["cam", "lidar"].map(|m| ModalityParams {
            q: Linear::new(ps, &format!("sgc.{m}.q"), c, c, rng),
            k: Linear::new(ps, &format!("sgc.{m}.k"), c, c, rng),
            v: Linear::new(ps, &format!("sgc.{m}.v"), c, c, rng),
            refine: ConvBlock::new(ps, &format!("sgc.{m}.refine"), 2 * c, c, norm, rng),
        });
        let flow_blocks = (0..flow_blocks)
            .map(|i| ConvBlock::new(ps, &format!("sgc.flow.{i}"), if i == 0 { 2 * c } else { c }, c, norm, rng))
            .collect::<Vec<_>>();
        let head_in = if flow_blocks.is_empty() { 2 * c } else { c };
        let flow_head = ConvBlock::head(ps, "sgc.flow.head", head_in, 2, 1e-3, rng);
        let fuse = ConvBlock::new(ps, "sgc.fuse", 2 * c, c, norm, rng);
        Self { channels, modality, flow_blocks, flow_head, fuse }
    }

    /// Per-cell affine Q, K, V of one modality, each `[HW, C]`.
    pub fn project_qkv<'t>(&self, p: &Binding<'t>, m: usize, b: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        if b.shape().len() != 3 || b.shape()[0] != self.channels {
            return Err(TensorError::ShapeMismatch { op: "project_qkv", lhs: b.shape(), rhs: vec![self.channels] });
        }
        let x = flatten_cells(b)?;
        let mp = &self.modality[m];
        Ok((mp.q.forward(p, x)?, mp.k.forward(p, x)?, mp.v.forward(p, x)?))
    }

    /// Conv block over `[V; C]` reshaped back onto the grid.
    pub fn refine_modality<'t>(&self, p: &Binding<'t>, m: usize, v: Var<'t>, c: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let x = unflatten_cells(v, h, w)?.concat_channels(unflatten_cells(c, h, w)?)?;
        self.modality[m].refine.forward(p, x)
    }

    pub fn predict_flow<'t>(&self, p: &Binding<'t>, cam: Var<'t>, lidar: Var<'t>) -> Result<Var<'t>> {
        check_geometry(&cam, &lidar, "predict_flow")?;
        let mut x = cam.concat_channels(lidar)?;
        for b in &self.flow_blocks {
            x = b.forward(p, x)?;
        }
        self.flow_head.forward(p, x)
    }

    pub fn fuse<'t>(&self, p: &Binding<'t>, lidar: Var<'t>, cam_aligned: Var<'t>) -> Result<Var<'t>> {
        check_geometry(&lidar, &cam_aligned, "fuse")?;
        self.fuse.forward(p, lidar.concat_channels(cam_aligned)?)
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, cam: Var<'t>, lidar: Var<'t>) -> Result<Fused<'t>> {
        check_geometry(&cam, &lidar, "sgc")?;
        let s = cam.shape();
        let (h, w) = (s[1], s[2]);
        let (q_cam, k_cam, v_cam) = self.project_qkv(p, CAM, cam)?;
        let (q_lidar, k_lidar, v_lidar) = self.project_qkv(p, LIDAR, lidar)?;
        let c_cam = cross_modal_attend(q_cam, k_lidar, v_lidar)?;
        let c_lidar = cross_modal_attend(q_lidar, k_cam, v_cam)?;
        let cam_r = self.refine_modality(p, CAM, v_cam, c_cam, h, w)?;
        let lidar_r = self.refine_modality(p, LIDAR, v_lidar, c_lidar, h, w)?;
        let flow = self.predict_flow(p, cam_r, lidar_r)?;
        let aligned = warp(cam_r, flow)?;
        Ok(Fused { grid: self.fuse(p, lidar_r, aligned)?, flow: Some(flow) })
    }
}

/// The `sgc = off` baseline: one conv block over the concatenated grids.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub conv: ConvBlock,
}

impl ConcatFusion {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, channels: usize, norm: bool, rng: &mut R) -> Self {
        Self { conv: ConvBlock::new(ps, "concat.fuse", 2 * channels, channels, norm, rng) }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, cam: Var<'t>, lidar: Var<'t>) -> Result<Fused<'t>> {
        check_geometry(&cam, &lidar, "concat fusion")?;
        Ok(Fused { grid: self.conv.forward(p, lidar.concat_channels(cam)?)?, flow: None })
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Sgc(Sgc),
    Concat(ConcatFusion),
}

impl Fusion {
    pub fn forward<'t>(&self, p: &Binding<'t>, cam: Var<'t>, lidar: Var<'t>) -> Result<Fused<'t>> {
        match self {
            Fusion::Sgc(s) => s.forward(p, cam, lidar),
            Fusion::Concat(c) => c.forward(p, cam, lidar),
        }
    }
}

/// Endpoint error `mean |f - g|_2` over cells, with its gradient.
pub fn endpoint_error(flow: &Tensor, gt: &Tensor) -> (f64, Tensor) {
    let hw = flow.numel() / 2;
    let (f, g) = (flow.data(), gt.data());
    let mut grad = Tensor::zeros(flow.shape());
    let mut total = 0.0;
    for i in 0..hw {
        let (dy, dx) = (f[i] - g[i], f[hw + i] - g[hw + i]);
        let n = dy.hypot(dx);
        total += n;
        if n > 0.0 {
            grad.data_mut()[i] = dy / (n * hw as f64);
            grad.data_mut()[hw + i] = dx / (n * hw as f64);
        }
    }
    (total / hw as f64, grad)
}

//! Query decoder coupling point and element descriptors against fused BEV
//! features: Point2Point, Element2Element and Point2Element interactions.

use rand::Rng;

use crate::config::ModelConfig;
use crate::map::{Category, PerCategory};
use crate::nn::{AttnBlock, Linear, Mlp};
use crate::tensor::{attention, Binding, ParamId, ParamSet, Result, Tensor, TensorError, Var};

/// Static partition of element slots and their keypoints by category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Group {
    pub category: Category,
    /// Element slots M_g.
    pub elements: usize,
    /// Keypoints per element N_g.
    pub points: usize,
    /// First row of this group in the `[M, C]` element tensor.
    pub elem_offset: usize,
    /// First row of this group in the `[P, C]` point tensor.
    pub point_offset: usize,
}

impl Group {
    pub fn point_rows(&self) -> usize {
        self.elements * self.points
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slots {
    pub groups: [Group; 3],
    pub elements: usize,
    pub points: usize,
}

impl Slots {
    pub fn new(caps: &PerCategory<usize>, points: &PerCategory<usize>) -> Self {
        let (mut e, mut p) = (0, 0);
        let groups = Category::ALL.map(|c| {
            let g = Group { category: c, elements: caps[c], points: points[c], elem_offset: e, point_offset: p };
            e += caps[c];
            p += caps[c] * points[c];
            g
        });
        Self { groups, elements: e, points: p }
    }

    pub fn from_config(m: &ModelConfig) -> Self {
        Self::new(&m.caps, &m.points)
    }

    pub fn group(&self, c: Category) -> &Group {
        &self.groups[c.index()]
    }

    /// Group owning element slot `m`.
    pub fn group_of(&self, m: usize) -> &Group {
        self.groups
            .iter()
            .find(|g| m >= g.elem_offset && m < g.elem_offset + g.elements)
            .expect("slot index in range")
    }

    /// For every point row, the index of its element slot.
    pub fn point_owner(&self) -> Vec<usize> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.point_rows()).map(move |r| g.elem_offset + r / g.points))
            .collect()
    }
}

/// Per-cell BEV positional features `[HW, 2 + 4F]`: normalised x, y and
/// their sines/cosines at `F` octave frequencies.
pub fn positional_features(h: usize, w: usize, freqs: usize) -> Tensor {
    let width = 2 + 4 * freqs;
    let mut t = Tensor::zeros(&[h * w, width]);
    for r in 0..h {
        for c in 0..w {
            let y = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
            let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
            let row = &mut t.data_mut()[(r * w + c) * width..][..width];
            row[0] = x;
            row[1] = y;
            for f in 0..freqs {
                let k = std::f64::consts::FRAC_PI_2 * (1u64 << f) as f64;
                row[2 + 4 * f..6 + 4 * f].copy_from_slice(&[(k * x).sin(), (k * x).cos(), (k * y).sin(), (k * y).cos()]);
            }
        }
    }
    t
}

/// `M(k, cell) = sum_c f(k, c) B(c, cell)` for `f[k, C]`, `b[C, H, W]`; gives `[k, HW]`.
pub fn spatial_mask<'t>(f: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let s = b.shape();
    if s.len() != 3 || f.shape().len() != 2 || f.shape()[1] != s[0] {
        return Err(TensorError::ShapeMismatch { op: "spatial_mask", lhs: f.shape(), rhs: s });
    }
    f.matmul(b.reshape(&[s[0], s[1] * s[2]])?)
}

/// Learnable queries and position embeddings.
#[derive(Clone, Debug)]
pub struct QueryBank {
    /// `[P, C]`, groups stacked in category order, element-major.
    pub point_queries: ParamId,
    /// `[M, C]`.
    pub element_queries: ParamId,
    /// `[N_g, C]` per group.
    pub point_pos: [ParamId; 3],
    /// `[M, C]`.
    pub element_pos: ParamId,
}

impl QueryBank {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, slots: &Slots, c: usize, std: f64, rng: &mut R) -> Self {
        Self {
            point_queries: ps.add("queries.points", Tensor::randn(&[slots.points, c], std, rng)),
            element_queries: ps.add("queries.elements", Tensor::randn(&[slots.elements, c], std, rng)),
            point_pos: slots.groups.map(|g| ps.add(format!("queries.point_pos.{}", g.category.short()), Tensor::randn(&[g.points, c], std, rng))),
            element_pos: ps.add("queries.element_pos", Tensor::randn(&[slots.elements, c], std, rng)),
        }
    }

    /// Point position embeddings tiled to `[P, C]`.
    pub fn tiled_point_pos<'t>(&self, p: &Binding<'t>, slots: &Slots) -> Result<Var<'t>> {
        let parts = slots
            .groups
            .iter()
            .map(|g| {
                let idx: Vec<usize> = (0..g.point_rows()).map(|r| r % g.points).collect();
                p.var(self.point_pos[g.category.index()]).gather_rows(&idx)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts)
    }
}

/// Evolving descriptors: points `[P, C]`, elements `[M, C]`.
#[derive(Clone, Copy, Debug)]
pub struct DescriptorState<'t> {
    pub points: Var<'t>,
    pub elements: Var<'t>,
}

/// Shared per-forward inputs of every layer.
#[derive(Clone, Copy, Debug)]
pub struct Context<'t> {
    /// Fused grid `[C, H, W]`.
    pub bev: Var<'t>,
    /// Attention memory `[HW, C]`: flattened cells plus positional projection.
    pub memory: Var<'t>,
    pub point_pos: Var<'t>,
    pub element_pos: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct PecLayer {
    /// Element-aware MLP per group, `N_g C -> C`.
    pub element_aware: [Mlp; 3],
    pub p_cross: AttnBlock,
    pub p_self: AttnBlock,
    pub p_ffn: Mlp,
    /// Global-aware MLP, `M C -> C`.
    pub global_aware: Mlp,
    pub e_cross: AttnBlock,
    pub e_self: AttnBlock,
    pub e_ffn: Mlp,
    pub p2e_point_q: Linear,
    pub p2e_point_k: Linear,
    pub p2e_elem_q: Linear,
    pub p2e_elem_k: Linear,
}

fn group_points<'t>(points: Var<'t>, g: &Group, c: usize) -> Result<Var<'t>> {
    points.narrow(g.point_offset, g.point_rows())?.reshape(&[g.elements, g.points, c])
}

impl PecLayer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, slots: &Slots, c: usize, rng: &mut R) -> Self {
        Self {
            element_aware: slots.groups.map(|g| Mlp::new(ps, &format!("{name}.ea.{}", g.category.short()), g.points * c, c, c, rng)),
            p_cross: AttnBlock::new(ps, &format!("{name}.p_cross"), c, rng),
            p_self: AttnBlock::new(ps, &format!("{name}.p_self"), c, rng),
            p_ffn: Mlp::new(ps, &format!("{name}.p_ffn"), c, 2 * c, c, rng),
            global_aware: Mlp::new(ps, &format!("{name}.ga"), slots.elements * c, c, c, rng),
            e_cross: AttnBlock::new(ps, &format!("{name}.e_cross"), c, rng),
            e_self: AttnBlock::new(ps, &format!("{name}.e_self"), c, rng),
            e_ffn: Mlp::new(ps, &format!("{name}.e_ffn"), c, 2 * c, c, rng),
            p2e_point_q: Linear::new(ps, &format!("{name}.p2e.point_q"), c, c, rng),
            p2e_point_k: Linear::new(ps, &format!("{name}.p2e.point_k"), c, c, rng),
            p2e_elem_q: Linear::new(ps, &format!("{name}.p2e.elem_q"), c, c, rng),
            p2e_elem_k: Linear::new(ps, &format!("{name}.p2e.elem_k"), c, c, rng),
        }
    }

    /// Element-aware feature `[M_g, C]` of every element in group `g`.
    pub fn element_aware_feature<'t>(&self, p: &Binding<'t>, g: &Group, points: Var<'t>) -> Result<Var<'t>> {
        let c = points.shape()[1];
        let x = points.narrow(g.point_offset, g.point_rows())?.reshape(&[g.elements, g.points * c])?;
        self.element_aware[g.category.index()].forward(p, x)
    }

    /// Per-element point masks broadcast to every point row, `[P, HW]`.
    pub fn point_mask_bias<'t>(&self, p: &Binding<'t>, slots: &Slots, points: Var<'t>, bev: Var<'t>) -> Result<Var<'t>> {
        let parts = slots
            .groups
            .iter()
            .map(|g| {
                let mask = spatial_mask(self.element_aware_feature(p, g, points)?, bev)?;
                let idx: Vec<usize> = (0..g.point_rows()).map(|r| r / g.points).collect();
                mask.gather_rows(&idx)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts)
    }

    pub fn point2point<'t>(&self, p: &Binding<'t>, slots: &Slots, ctx: &Context<'t>, d: Var<'t>) -> Result<Var<'t>> {
        let c = d.shape()[1];
        let bias = self.point_mask_bias(p, slots, d, ctx.bev)?;
        let d = d.add(self.p_cross.forward(p, d.add(ctx.point_pos)?, ctx.memory, Some(bias))?)?;
        let x = d.add(ctx.point_pos)?;
        let parts = slots
            .groups
            .iter()
            .map(|g| {
                let xg = group_points(x, g, c)?;
                self.p_self.forward(p, xg, xg, None)?.reshape(&[g.point_rows(), c])
            })
            .collect::<Result<Vec<_>>>()?;
        let d = d.add(Var::concat(&parts)?)?;
        d.add(self.p_ffn.forward(p, d)?)
    }

    pub fn element2element<'t>(&self, p: &Binding<'t>, ctx: &Context<'t>, e: Var<'t>) -> Result<Var<'t>> {
        let s = e.shape();
        let global = self.global_aware.forward(p, e.reshape(&[1, s[0] * s[1]])?)?;
        let bias = spatial_mask(global, ctx.bev)?;
        let e = e.add(self.e_cross.forward(p, e.add(ctx.element_pos)?, ctx.memory, Some(bias))?)?;
        let x = e.add(ctx.element_pos)?;
        let e = e.add(self.e_self.forward(p, x, x, None)?)?;
        e.add(self.e_ffn.forward(p, e)?)
    }

    /// Simultaneous update: element to its points and points to their element,
    /// both read from the incoming state.
    pub fn point2element<'t>(&self, p: &Binding<'t>, slots: &Slots, state: DescriptorState<'t>) -> Result<DescriptorState<'t>> {
        let c = state.points.shape()[1];
        let mut pts = Vec::with_capacity(3);
        let mut els = Vec::with_capacity(3);
        for g in &slots.groups {
            let dg = group_points(state.points, g, c)?;
            let eg = state.elements.narrow(g.elem_offset, g.elements)?.reshape(&[g.elements, 1, c])?;
            let to_points = attention(self.p2e_point_q.forward(p, dg)?, self.p2e_elem_k.forward(p, eg)?, eg, None)?;
            let to_element = attention(self.p2e_elem_q.forward(p, eg)?, self.p2e_point_k.forward(p, dg)?, dg, None)?;
            pts.push(dg.add(to_points)?.reshape(&[g.point_rows(), c])?);
            els.push(eg.add(to_element)?.reshape(&[g.elements, c])?);
        }
        Ok(DescriptorState { points: Var::concat(&pts)?, elements: Var::concat(&els)? })
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, slots: &Slots, ctx: &Context<'t>, state: DescriptorState<'t>) -> Result<DescriptorState<'t>> {
        let points = self.point2point(p, slots, ctx, state.points)?;
        let elements = self.element2element(p, ctx, state.elements)?;
        self.point2element(p, slots, DescriptorState { points, elements })
    }

    /// Zeroes every residual branch so the layer is the identity except for
    /// the parameter-free Point2Element values.
    pub fn zero_residuals(&self, ps: &mut ParamSet) {
        for a in [&self.p_cross, &self.p_self, &self.e_cross, &self.e_self] {
            a.zero_output(ps);
        }
        self.p_ffn.l2.zero(ps);
        self.e_ffn.l2.zero(ps);
    }
}

/// Shared pieces of both decoder variants.
#[derive(Clone, Debug)]
pub struct DecoderBase {
    pub slots: Slots,
    pub channels: usize,
    pub bank: QueryBank,
    pub pos_proj: Linear,
    pub pos_features: Tensor,
}

impl DecoderBase {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, m: &ModelConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let slots = Slots::from_config(m);
        let bank = QueryBank::new(ps, &slots, m.channels, m.query_std, rng);
        let pos_features = positional_features(h, w, m.pos_freqs);
        let pos_proj = Linear::new(ps, "decoder.pos_proj", pos_features.shape()[1], m.channels, rng);
        Self { slots, channels: m.channels, bank, pos_proj, pos_features }
    }

    pub fn context<'t>(&self, p: &Binding<'t>, bev: Var<'t>) -> Result<Context<'t>> {
        let s = bev.shape();
        if s.len() != 3 || s[0] != self.channels || s[1] * s[2] != self.pos_features.shape()[0] {
            return Err(TensorError::ShapeMismatch { op: "decoder", lhs: s, rhs: vec![self.channels, self.pos_features.shape()[0]] });
        }
        let pos = self.pos_proj.forward(p, bev.tape().constant(self.pos_features.clone()))?;
        let memory = crate::sgc::flatten_cells(bev)?.add(pos)?;
        Ok(Context {
            bev,
            memory,
            point_pos: self.bank.tiled_point_pos(p, &self.slots)?,
            element_pos: p.var(self.bank.element_pos),
        })
    }

    pub fn initial_state<'t>(&self, p: &Binding<'t>) -> DescriptorState<'t> {
        DescriptorState { points: p.var(self.bank.point_queries), elements: p.var(self.bank.element_queries) }
    }
}

#[derive(Clone, Debug)]
pub struct Pec {
    pub base: DecoderBase,
    pub layers: Vec<PecLayer>,
}

impl Pec {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, m: &ModelConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let base = DecoderBase::new(ps, m, h, w, rng);
        let layers = (0..m.layers).map(|l| PecLayer::new(ps, &format!("pec.{l}"), &base.slots, m.channels, rng)).collect();
        Self { base, layers }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, bev: Var<'t>) -> Result<DescriptorState<'t>> {
        let ctx = self.base.context(p, bev)?;
        let mut state = self.base.initial_state(p);
        for layer in &self.layers {
            state = layer.forward(p, &self.base.slots, &ctx, state)?;
        }
        Ok(state)
    }
}

/// The `pec = off` baseline: one cross-attention from the point queries to
/// the BEV cells plus a feed-forward block; each element descriptor is its
/// query plus the mean of its points.
#[derive(Clone, Debug)]
pub struct SingleCross {
    pub base: DecoderBase,
    pub cross: AttnBlock,
    pub ffn: Mlp,
}

impl SingleCross {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, m: &ModelConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let base = DecoderBase::new(ps, m, h, w, rng);
        let c = m.channels;
        Self {
            base,
            cross: AttnBlock::new(ps, "single.cross", c, rng),
            ffn: Mlp::new(ps, "single.ffn", c, 2 * c, c, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, bev: Var<'t>) -> Result<DescriptorState<'t>> {
        let ctx = self.base.context(p, bev)?;
        let init = self.base.initial_state(p);
        let c = self.base.channels;
        let d = init.points.add(self.cross.forward(p, init.points.add(ctx.point_pos)?, ctx.memory, None)?)?;
        let d = d.add(self.ffn.forward(p, d)?)?;
        let means = self
            .base
            .slots
            .groups
            .iter()
            .map(|g| group_points(d, g, c)?.mean_axis(1))
            .collect::<Result<Vec<_>>>()?;
        Ok(DescriptorState { points: d, elements: init.elements.add(Var::concat(&means)?)? })
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Pec(Pec),
    Single(SingleCross),
}

impl Decoder {
    pub fn forward<'t>(&self, p: &Binding<'t>, bev: Var<'t>) -> Result<DescriptorState<'t>> {
        match self {
            Decoder::Pec(d) => d.forward(p, bev),
            Decoder::Single(d) => d.forward(p, bev),
        }
    }

    pub fn base(&self) -> &DecoderBase {
        match self {
            Decoder::Pec(d) => &d.base,
            Decoder::Single(d) => &d.base,
        }
    }
}

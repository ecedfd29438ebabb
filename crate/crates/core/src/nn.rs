//! Parameterised layers built on the tensor tape.

use rand::Rng;

use crate::tensor::{attention, Binding, ParamId, ParamSet, Result, Tensor, Var};

/// Affine map over the last axis: `x[.., i] -> x W + b`, `W: [i, o]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.w))?.add_row(p.var(self.b))
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero(&self, ps: &mut ParamSet) {
        ps.get_mut(self.w).data_mut().fill(0.0);
        ps.get_mut(self.b).data_mut().fill(0.0);
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{name}.0"), in_dim, hidden, rng),
            l2: Linear::new(ps, &format!("{name}.1"), hidden, out_dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.l1.forward(p, x)?.relu()?;
        self.l2.forward(p, h)
    }

    pub fn zero(&self, ps: &mut ParamSet) {
        self.l1.zero(ps);
        self.l2.zero(ps);
    }
}

/// Single-head attention with input and output projections:
/// `o(softmax(q(x) k(m)^T / sqrt(d) + bias) v(m))`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, mem: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let a = attention(self.q.forward(p, x)?, self.k.forward(p, mem)?, self.v.forward(p, mem)?, bias)?;
        self.o.forward(p, a)
    }

    /// Zeroes the output projection so the block contributes nothing.
    pub fn zero_output(&self, ps: &mut ParamSet) {
        self.o.zero(ps);
    }
}

/// 3x3 convolution (stride 1, zero padding 1), optional channel
/// standardisation, then ReLU unless built as a linear head.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub norm: bool,
    pub activation: bool,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, norm: bool, rng: &mut R) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[c_out, c_in, 3, 3], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out, norm, activation: true }
    }

    /// Convolution with no activation (e.g. a regression head).
    pub fn head<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, std: f64, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[c_out, c_in, 3, 3], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out, norm: false, activation: false }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x.conv3x3(p.var(self.w), p.var(self.b))?;
        if self.norm {
            y = y.channel_norm(1e-5)?;
        }
        if self.activation {
            y = y.relu()?;
        }
        Ok(y)
    }

    pub fn zero(&self, ps: &mut ParamSet) {
        ps.get_mut(self.w).data_mut().fill(0.0);
        ps.get_mut(self.b).data_mut().fill(0.0);
    }
}

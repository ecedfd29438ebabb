use super::kernels::{self, gemm, MatRef};
use super::tape::{Node, Var};
use super::{Result, Tensor, TensorError};

/// Recorded operation with whatever forward state its backward rule needs.
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        p: usize,
        q: usize,
        r: usize,
        a_batch: Vec<usize>,
        b_batch: Vec<usize>,
    },
    Transpose { a: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Scale { a: usize, s: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    Concat { parts: Vec<(usize, usize)> },
    Narrow { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    MeanAxis { a: usize, outer: usize, axis_len: usize, inner: usize },
    Conv3x3 { x: usize, w: usize, b: usize, cols: Vec<f64>, c_in: usize, h: usize, wd: usize },
    ChannelNorm { a: usize, inv_std: Vec<f64> },
    Bilinear { x: usize, coords: usize },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<(usize, BiasLayout)>,
        probs: Vec<f64>,
        dims: AttnDims,
    },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceWithLogits { logits: usize, targets: Vec<f64> },
    Mse { a: usize, target: Vec<f64> },
    ScalarFn { inputs: Vec<usize>, grads: Vec<Tensor> },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    batch: usize,
    s: usize,
    t: usize,
    d: usize,
    c: usize,
    scale: f64,
}

impl AttnDims {
    pub(crate) fn keys(&self) -> usize {
        self.t
    }
}

/// How a bias tensor broadcasts onto `[batch, s, t]` logits.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BiasLayout {
    per_batch: bool,
    per_row: bool,
}

impl BiasLayout {
    fn offset(&self, b: usize, i: usize, dims: &AttnDims) -> usize {
        let rows = if self.per_row { dims.s } else { 1 };
        let bb = if self.per_batch { b } else { 0 };
        let ii = if self.per_row { i } else { 0 };
        (bb * rows + ii) * dims.t
    }
}

impl Op {
    pub fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            AddRow { a, row } | MulRow { a, row } => vec![*a, *row],
            Transpose { a }
            | Reshape { a }
            | Scale { a, .. }
            | AddScalar { a }
            | Relu { a }
            | Sigmoid { a }
            | Softmax { a }
            | Narrow { a, .. }
            | GatherRows { a, .. }
            | Sum { a }
            | Mean { a }
            | MeanAxis { a, .. }
            | ChannelNorm { a, .. }
            | Mse { a, .. } => vec![*a],
            Concat { parts } => parts.iter().map(|&(id, _)| id).collect(),
            Conv3x3 { x, w, b, .. } => vec![*x, *w, *b],
            Bilinear { x, coords } => vec![*x, *coords],
            Attention { q, k, v, bias, .. } => {
                let mut p = vec![*q, *k, *v];
                if let Some((b, _)) = bias {
                    p.push(*b);
                }
                p
            }
            CrossEntropy { logits, .. } | BceWithLogits { logits, .. } => vec![*logits],
            ScalarFn { inputs, .. } => inputs.clone(),
        }
    }

    /// Emits `(parent, dL/dparent)` contributions given `g = dL/dout`.
    pub fn backward(&self, nodes: &[Node], out: &Tensor, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
        let val = |id: usize| -> &Tensor { &nodes[id].value };
        let needs = |id: usize| nodes[id].requires_grad;
        let like = |id: usize, data: Vec<f64>| Tensor::from_parts(nodes[id].value.shape().to_vec(), data);
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, p, q, r, a_batch, b_batch } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q, r) = (*p, *q, *r);
                let mut ga = needs(*a).then(|| vec![0.0; av.numel()]);
                let mut gb = needs(*b).then(|| vec![0.0; bv.numel()]);
                for (z, (&ia, &ib)) in a_batch.iter().zip(b_batch).enumerate() {
                    let gz = MatRef::new(&g.data()[z * p * r..], p, r);
                    if let Some(ga) = ga.as_mut() {
                        let bm = MatRef::new(&bv.data()[ib * q * r..], q, r);
                        gemm(gz, bm.t(), &mut ga[ia * p * q..], 1.0);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let am = MatRef::new(&av.data()[ia * p * q..], p, q);
                        gemm(am.t(), gz, &mut gb[ib * q * r..], 1.0);
                    }
                }
                if let Some(ga) = ga {
                    emit(*a, like(*a, ga));
                }
                if let Some(gb) = gb {
                    emit(*b, like(*b, gb));
                }
            }
            Op::Transpose { a } => emit(*a, g.transpose_last2()),
            Op::Reshape { a } => emit(*a, like(*a, g.data().to_vec())),
            Op::Add { a, b } => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub { a, b } => {
                emit(*a, g.clone());
                if needs(*b) {
                    emit(*b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    emit(*a, like(*a, zip_map(g.data(), bv.data(), |x, y| x * y)));
                }
                if needs(*b) {
                    emit(*b, like(*b, zip_map(g.data(), av.data(), |x, y| x * y)));
                }
            }
            Op::AddRow { a, row } => {
                emit(*a, g.clone());
                if needs(*row) {
                    let n = val(*row).numel();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    emit(*row, like(*row, gr));
                }
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (val(*a), val(*row));
                let n = rv.numel();
                if needs(*a) {
                    let mut ga = g.data().to_vec();
                    for chunk in ga.chunks_mut(n) {
                        for (v, r) in chunk.iter_mut().zip(rv.data()) {
                            *v *= r;
                        }
                    }
                    emit(*a, like(*a, ga));
                }
                if needs(*row) {
                    let mut gr = vec![0.0; n];
                    for (gc, ac) in g.data().chunks(n).zip(av.data().chunks(n)) {
                        for ((acc, gv), x) in gr.iter_mut().zip(gc).zip(ac) {
                            *acc += gv * x;
                        }
                    }
                    emit(*row, like(*row, gr));
                }
            }
            Op::Scale { a, s } => emit(*a, g.map(|v| v * s)),
            Op::AddScalar { a } => emit(*a, g.clone()),
            Op::Relu { a } => {
                let av = val(*a);
                emit(*a, like(*a, zip_map(g.data(), av.data(), |gv, x| if x > 0.0 { gv } else { 0.0 })));
            }
            Op::Sigmoid { a } => {
                emit(*a, like(*a, zip_map(g.data(), out.data(), |gv, y| gv * y * (1.0 - y))));
            }
            Op::Softmax { a } => {
                let width = *out.shape().last().unwrap();
                let mut d = g.data().to_vec();
                kernels::softmax_rows_backward(out.data(), &mut d, width);
                emit(*a, like(*a, d));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &(id, len) in parts {
                    if needs(id) {
                        emit(id, like(id, g.data()[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, start } => {
                let mut ga = vec![0.0; val(*a).numel()];
                ga[*start..*start + g.numel()].copy_from_slice(g.data());
                emit(*a, like(*a, ga));
            }
            Op::GatherRows { a, idx } => {
                let av = val(*a);
                let row = av.numel() / av.shape()[0];
                let mut ga = vec![0.0; av.numel()];
                for (i, &src) in idx.iter().enumerate() {
                    for (acc, v) in ga[src * row..(src + 1) * row].iter_mut().zip(&g.data()[i * row..(i + 1) * row]) {
                        *acc += v;
                    }
                }
                emit(*a, like(*a, ga));
            }
            Op::Sum { a } => {
                let gv = g.item();
                emit(*a, like(*a, vec![gv; val(*a).numel()]));
            }
            Op::Mean { a } => {
                let n = val(*a).numel();
                let gv = g.item() / n as f64;
                emit(*a, like(*a, vec![gv; n]));
            }
            Op::MeanAxis { a, outer, axis_len, inner } => {
                let (outer, len, inner) = (*outer, *axis_len, *inner);
                let mut ga = vec![0.0; outer * len * inner];
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[(o * len + k) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                emit(*a, like(*a, ga));
            }
            Op::Conv3x3 { x, w, b, cols, c_in, h, wd } => {
                let c_out = val(*w).shape()[0];
                let hw = h * wd;
                let gm = MatRef::new(g.data(), c_out, hw);
                if needs(*w) {
                    let mut gw = vec![0.0; c_out * c_in * 9];
                    gemm(gm, MatRef::new(cols, c_in * 9, hw).t(), &mut gw, 0.0);
                    emit(*w, like(*w, gw));
                }
                if needs(*b) {
                    let gb = g.data().chunks(hw).map(|r| r.iter().sum()).collect();
                    emit(*b, like(*b, gb));
                }
                if needs(*x) {
                    let wm = MatRef::new(val(*w).data(), c_out, c_in * 9);
                    let mut gcols = vec![0.0; c_in * 9 * hw];
                    gemm(wm.t(), gm, &mut gcols, 0.0);
                    emit(*x, like(*x, kernels::col2im3(&gcols, *c_in, *h, *wd)));
                }
            }
            Op::ChannelNorm { a, inv_std } => {
                let c = inv_std.len();
                let n = out.numel() / c;
                let mut ga = vec![0.0; out.numel()];
                for ci in 0..c {
                    let y = &out.data()[ci * n..(ci + 1) * n];
                    let gy = &g.data()[ci * n..(ci + 1) * n];
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        ga[ci * n + j] = inv_std[ci] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                emit(*a, like(*a, ga));
            }
            Op::Bilinear { x, coords } => {
                let xv = val(*x);
                let cv = val(*coords);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (ho, wo) = (cv.shape()[1], cv.shape()[2]);
                let (gx, gc) = kernels::bilinear_backward(
                    xv.data(),
                    c,
                    h,
                    w,
                    cv.data(),
                    ho,
                    wo,
                    g.data(),
                    needs(*x),
                    needs(*coords),
                );
                if let Some(gx) = gx {
                    emit(*x, like(*x, gx));
                }
                if let Some(gc) = gc {
                    emit(*coords, like(*coords, gc));
                }
            }
            Op::Attention { q, k, v, bias, probs, dims } => {
                attention_backward(nodes, *q, *k, *v, *bias, probs, dims, g, emit);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let k = val(*logits).shape()[1];
                let wsum: f64 = weights.iter().sum();
                let scale = g.item() / wsum;
                let mut gl = probs.clone();
                for (i, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut gl[i * k..(i + 1) * k];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= wt * scale);
                }
                emit(*logits, like(*logits, gl));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                let scale = g.item() / lv.numel() as f64;
                let gl = zip_map(lv.data(), targets, |x, t| (sigmoid(x) - t) * scale);
                emit(*logits, like(*logits, gl));
            }
            Op::Mse { a, target } => {
                let av = val(*a);
                let scale = 2.0 * g.item() / av.numel() as f64;
                emit(*a, like(*a, zip_map(av.data(), target, |x, t| (x - t) * scale)));
            }
            Op::ScalarFn { inputs, grads } => {
                let gv = g.item();
                for (&id, local) in inputs.iter().zip(grads) {
                    if needs(id) {
                        emit(id, local.map(|v| v * gv));
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    q: usize,
    k: usize,
    v: usize,
    bias: Option<(usize, BiasLayout)>,
    probs: &[f64],
    dims: &AttnDims,
    g: &Tensor,
    emit: &mut dyn FnMut(usize, Tensor),
) {
    let AttnDims { batch, s, t, d, c, scale } = *dims;
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let mut gq = nodes[q].requires_grad.then(|| vec![0.0; qv.numel()]);
    let mut gk = nodes[k].requires_grad.then(|| vec![0.0; kv.numel()]);
    let mut gv = nodes[v].requires_grad.then(|| vec![0.0; vv.numel()]);
    let mut gbias = bias
        .filter(|(id, _)| nodes[*id].requires_grad)
        .map(|(id, layout)| (id, layout, vec![0.0; nodes[id].value.numel()]));
    let mut ds = vec![0.0; s * t];
    for b in 0..batch {
        let p = &probs[b * s * t..(b + 1) * s * t];
        let go = MatRef::new(&g.data()[b * s * c..], s, c);
        if let Some(gv) = gv.as_mut() {
            gemm(MatRef::new(p, s, t).t(), go, &mut gv[b * t * c..], 1.0);
        }
        gemm(go, MatRef::new(&vv.data()[b * t * c..], t, c).t(), &mut ds, 0.0);
        kernels::softmax_rows_backward(p, &mut ds, t);
        if let Some((_, layout, gb)) = gbias.as_mut() {
            for i in 0..s {
                let off = layout.offset(b, i, dims);
                for (acc, v) in gb[off..off + t].iter_mut().zip(&ds[i * t..(i + 1) * t]) {
                    *acc += v;
                }
            }
        }
        ds.iter_mut().for_each(|x| *x *= scale);
        if let Some(gq) = gq.as_mut() {
            gemm(MatRef::new(&ds, s, t), MatRef::new(&kv.data()[b * t * d..], t, d), &mut gq[b * s * d..], 1.0);
        }
        if let Some(gk) = gk.as_mut() {
            gemm(MatRef::new(&ds, s, t).t(), MatRef::new(&qv.data()[b * s * d..], s, d), &mut gk[b * t * d..], 1.0);
        }
    }
    let like = |id: usize, data: Vec<f64>| Tensor::from_parts(nodes[id].value.shape().to_vec(), data);
    if let Some(gq) = gq {
        emit(q, like(q, gq));
    }
    if let Some(gk) = gk {
        emit(k, like(k, gk));
    }
    if let Some(gv) = gv {
        emit(v, like(v, gv));
    }
    if let Some((id, _, gb)) = gbias {
        emit(id, like(id, gb));
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "variables belong to different tapes");
}

/// Broadcasts batch prefixes; returns the output batch shape and, for each
/// output batch entry, the flat batch index into `a` and `b`.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        shape.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        });
    }
    let total: usize = shape.iter().product();
    let (mut ia, mut ib) = (Vec::with_capacity(total), Vec::with_capacity(total));
    for z in 0..total {
        let mut rem = z;
        let (mut oa, mut ob, mut sa, mut sb) = (0, 0, 1, 1);
        for ax in (0..nd).rev() {
            let i = rem % shape[ax];
            rem /= shape[ax];
            if pa[ax] != 1 {
                oa += i * sa;
            }
            if pb[ax] != 1 {
                ob += i * sb;
            }
            sa *= pa[ax];
            sb *= pb[ax];
        }
        ia.push(oa);
        ib.push(ob);
    }
    Some((shape, ia, ib))
}

impl<'t> Var<'t> {
    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`; batch
    /// extents must match or be 1.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (mut shape, a_batch, b_batch) =
            broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| mismatch("matmul", sa, sb))?;
        let mut out = vec![0.0; a_batch.len() * p * r];
        for (z, (&ia, &ib)) in a_batch.iter().zip(&b_batch).enumerate() {
            gemm(
                MatRef::new(&av.data()[ia * p * q..], p, q),
                MatRef::new(&bv.data()[ib * q * r..], q, r),
                &mut out[z * p * r..],
                0.0,
            );
        }
        shape.extend([p, r]);
        self.tape.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul { a: self.id, b: other.id, p, q, r, a_batch, b_batch },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(TensorError::InvalidArgument { op: "transpose", reason: "needs rank >= 2".into() });
        }
        self.tape.push("transpose", v.transpose_last2(), Op::Transpose { a: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape { a: self.id })
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Var<'t>)> {
        same_tape(&self, &other);
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        Ok((Tensor::from_parts(av.shape().to_vec(), zip_map(av.data(), bv.data(), f)), other))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, o) = self.elementwise(other, "add", |a, b| a + b)?;
        self.tape.push("add", v, Op::Add { a: self.id, b: o.id })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, o) = self.elementwise(other, "sub", |a, b| a - b)?;
        self.tape.push("sub", v, Op::Sub { a: self.id, b: o.id })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, o) = self.elementwise(other, "mul", |a, b| a * b)?;
        self.tape.push("mul", v, Op::Mul { a: self.id, b: o.id })
    }

    fn row_op(self, row: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_tape(&self, &row);
        let (av, rv) = (self.value(), row.value());
        let n = rv.numel();
        if rv.ndim() != 1 || av.shape().last() != Some(&n) {
            return Err(mismatch(name, av.shape(), rv.shape()));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(rv.data()) {
                *x = f(*x, *r);
            }
        }
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_op(row, "add_row", |a, b| a + b)?;
        self.tape.push("add_row", v, Op::AddRow { a: self.id, row: row.id })
    }

    /// Multiplies every row of a `[.., n]` tensor elementwise by a `[n]` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_op(row, "mul_row", |a, b| a * b)?;
        self.tape.push("mul_row", v, Op::MulRow { a: self.id, row: row.id })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * s);
        self.tape.push("scale", v, Op::Scale { a: self.id, s })
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + s);
        self.tape.push("add_scalar", v, Op::AddScalar { a: self.id })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push("relu", v, Op::Relu { a: self.id })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.value().map(sigmoid);
        self.tape.push("sigmoid", v, Op::Sigmoid { a: self.id })
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let width = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        kernels::softmax_rows(&mut data, width);
        self.tape.push("softmax", Tensor::from_parts(v.shape().to_vec(), data), Op::Softmax { a: self.id })
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            same_tape(first, p);
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(mismatch("concat", &first.shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            ids.push((p.id, v.numel()));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        first.tape.push("concat", Tensor::from_parts(shape, data), Op::Concat { parts: ids })
    }

    /// Channel concatenation of `[c1, ..]` and `[c2, ..]`.
    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        Var::concat(&[self, other])
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let lead = v.shape()[0];
        if len == 0 || start + len > lead {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} outside extent {lead}", start + len),
            });
        }
        let row = v.numel() / lead;
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * row..(start + len) * row].to_vec();
        self.tape.push("narrow", Tensor::from_parts(shape, data), Op::Narrow { a: self.id, start: start * row })
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let lead = v.shape()[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= lead) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("indices must be non-empty and < {lead}"),
            });
        }
        let row = v.numel() / lead;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        self.tape.push(
            "gather_rows",
            Tensor::from_parts(shape, data),
            Op::GatherRows { a: self.id, idx: idx.to_vec() },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let m = v.sum() / v.numel() as f64;
        self.tape.push("mean", Tensor::scalar(m), Op::Mean { a: self.id })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument { op: "mean_axis", reason: format!("axis {axis} out of range") });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.tape.push(
            "mean_axis",
            Tensor::from_parts(new_shape, out),
            Op::MeanAxis { a: self.id, outer, axis_len: len, inner },
        )
    }

    /// Spatial average of a `[c, h, w]` grid, giving `[c]`.
    pub fn mean_pool(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument { op: "mean_pool", reason: "expects [c, h, w]".into() });
        }
        self.reshape(&[s[0], s[1] * s[2]])?.mean_axis(1)
    }

    /// 3x3 convolution, stride 1, zero padding 1: `[c_in, h, w] -> [c_out, h, w]`.
    pub fn conv3x3(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &weight);
        same_tape(&self, &bias);
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(mismatch("conv3x3", xs, ws));
        }
        if bv.shape() != [ws[0]] {
            return Err(mismatch("conv3x3", ws, bv.shape()));
        }
        let (c_in, h, wd, c_out) = (xs[0], xs[1], xs[2], ws[0]);
        let hw = h * wd;
        let cols = kernels::im2col3(xv.data(), c_in, h, wd);
        let mut out = vec![0.0; c_out * hw];
        for (co, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(bv.data()[co]);
        }
        gemm(MatRef::new(wv.data(), c_out, c_in * 9), MatRef::new(&cols, c_in * 9, hw), &mut out, 1.0);
        self.tape.push(
            "conv3x3",
            Tensor::from_parts(vec![c_out, h, wd], out),
            Op::Conv3x3 { x: self.id, w: weight.id, b: bias.id, cols, c_in, h, wd },
        )
    }

    /// Per-channel standardisation of a `[c, ..]` tensor over its remaining axes.
    pub fn channel_norm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.shape()[0];
        let n = v.numel() / c;
        let mut out = vec![0.0; v.numel()];
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let x = &v.data()[ci * n..(ci + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[ci * n + j] = (x[j] - mean) * is;
            }
            inv_std.push(is);
        }
        self.tape.push(
            "channel_norm",
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::ChannelNorm { a: self.id, inv_std },
        )
    }

    /// Bilinear sampling of a `[c, h, w]` grid at `coords[2, ho, wo]` holding
    /// absolute (row, column) positions in cell units; outside cells read as zero.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &coords);
        let (xv, cv) = (self.value(), coords.value());
        let (xs, cs) = (xv.shape(), cv.shape());
        if xs.len() != 3 || cs.len() != 3 || cs[0] != 2 {
            return Err(mismatch("bilinear_sample", xs, cs));
        }
        if !cv.is_finite() {
            return Err(TensorError::NonFinite { op: "bilinear_sample" });
        }
        let out = kernels::bilinear_gather(xv.data(), xs[0], xs[1], xs[2], cv.data(), cs[1], cs[2]);
        self.tape.push(
            "bilinear_sample",
            Tensor::from_parts(vec![xs[0], cs[1], cs[2]], out),
            Op::Bilinear { x: self.id, coords: coords.id },
        )
    }

    /// Weighted mean cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] || targets.iter().any(|&t| t >= s[1]) {
            return Err(TensorError::InvalidArgument { op: "cross_entropy", reason: "targets/weights do not match logits".into() });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(TensorError::InvalidArgument { op: "cross_entropy", reason: "weights must sum to a positive value".into() });
        }
        let k = s[1];
        let mut probs = v.data().to_vec();
        if !kernels::softmax_rows(&mut probs, k) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &v.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t]);
        }
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss / wsum),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    /// Mean binary cross-entropy on logits against `{0, 1}` (or soft) targets.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", v.shape(), targets.shape()));
        }
        let loss = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / v.numel() as f64;
        self.tape.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits: self.id, targets: targets.data().to_vec() },
        )
    }

    pub fn mse(self, target: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != target.shape() {
            return Err(mismatch("mse", v.shape(), target.shape()));
        }
        let loss = v.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.numel() as f64;
        self.tape.push("mse", Tensor::scalar(loss), Op::Mse { a: self.id, target: target.data().to_vec() })
    }

    /// Records a scalar function whose value and local gradients were computed
    /// outside the tape (e.g. losses with a discrete matching step).
    pub fn scalar_fn(inputs: &[Var<'t>], value: f64, grads: Vec<Tensor>) -> Result<Var<'t>> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "scalar_fn",
            reason: "no inputs".into(),
        })?;
        if grads.len() != inputs.len() {
            return Err(TensorError::InvalidArgument { op: "scalar_fn", reason: "one gradient per input required".into() });
        }
        for (v, g) in inputs.iter().zip(&grads) {
            same_tape(first, v);
            if v.shape() != g.shape() {
                return Err(mismatch("scalar_fn", &v.shape(), g.shape()));
            }
        }
        first.tape.push(
            "scalar_fn",
            Tensor::scalar(value),
            Op::ScalarFn { inputs: inputs.iter().map(|v| v.id).collect(), grads },
        )
    }
}

/// `softmax(q k^T / sqrt(d) + bias) v`, batched over an optional leading axis.
///
/// Shapes: `q[b?, s, d]`, `k[b?, t, d]`, `v[b?, t, c]`; `bias` may be `[s, t]`,
/// `[1, t]`, `[b, s, t]` or `[b, 1, t]` and may contain `-inf` to mask keys.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    same_tape(&q, &k);
    same_tape(&q, &v);
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
    let rank = qs.len();
    if !(2..=3).contains(&rank) || ks.len() != rank || vs.len() != rank {
        return Err(mismatch("attention", qs, ks));
    }
    let batch = if rank == 3 { qs[0] } else { 1 };
    let (s, d) = (qs[rank - 2], qs[rank - 1]);
    let (t, d2) = (ks[rank - 2], ks[rank - 1]);
    let (t2, c) = (vs[rank - 2], vs[rank - 1]);
    if d != d2 || (rank == 3 && (ks[0] != batch || vs[0] != batch)) {
        return Err(mismatch("attention", qs, ks));
    }
    if t != t2 {
        return Err(mismatch("attention", ks, vs));
    }
    let dims = AttnDims { batch, s, t, d, c, scale: 1.0 / (d as f64).sqrt() };
    let bias_info = match bias {
        None => None,
        Some(b) => {
            same_tape(&q, &b);
            let bv = b.value();
            let bs = bv.shape();
            let layout = match bs {
                [r, tt] if *tt == t && (*r == s || *r == 1) => BiasLayout { per_batch: false, per_row: *r == s },
                [bb, r, tt] if *bb == batch && *tt == t && (*r == s || *r == 1) => {
                    BiasLayout { per_batch: true, per_row: *r == s }
                }
                _ => return Err(mismatch("attention bias", &[batch, s, t], bs)),
            };
            if bv.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(TensorError::NonFinite { op: "attention bias" });
            }
            Some((b, layout, bv))
        }
    };
    let mut probs = vec![0.0; batch * s * t];
    let mut out = vec![0.0; batch * s * c];
    for b in 0..batch {
        let p = &mut probs[b * s * t..(b + 1) * s * t];
        gemm(MatRef::new(&qv.data()[b * s * d..], s, d), MatRef::new(&kv.data()[b * t * d..], t, d).t(), p, 0.0);
        p.iter_mut().for_each(|x| *x *= dims.scale);
        if let Some((_, layout, bv)) = &bias_info {
            for i in 0..s {
                let off = layout.offset(b, i, &dims);
                for (x, bb) in p[i * t..(i + 1) * t].iter_mut().zip(&bv.data()[off..off + t]) {
                    *x += bb;
                }
            }
        }
        if !kernels::softmax_rows(p, t) {
            return Err(TensorError::NonFinite { op: "attention" });
        }
        gemm(MatRef::new(p, s, t), MatRef::new(&vv.data()[b * t * c..], t, c), &mut out[b * s * c..], 0.0);
    }
    let mut shape = if rank == 3 { vec![batch] } else { vec![] };
    shape.extend([s, c]);
    let bias = bias_info.map(|(b, layout, _)| (b.id, layout));
    q.tape.push(
        "attention",
        Tensor::from_parts(shape, out),
        Op::Attention { q: q.id, k: k.id, v: v.id, bias, probs, dims },
    )
}

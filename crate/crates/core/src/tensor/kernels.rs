//! Raw numeric kernels shared by forward and backward passes.

/// Strided view of a row-major matrix block inside a larger buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Same buffer read as the transposed matrix.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows as isize - 1) as usize * self.row_stride as usize
            + (self.cols as isize - 1) as usize * self.col_stride as usize
    }
}

/// `out = beta * out + a * b` where `out` is a dense row-major `[a.rows, b.cols]` block.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_offset() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: bounds of both operand views and the output block were checked above,
    // and the output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically stable softmax over consecutive rows of length `width`.
///
/// `-inf` entries are allowed (masked positions); a row with no finite entry
/// is reported as an error by returning `false`.
pub fn softmax_rows(data: &mut [f64], width: usize) -> bool {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return false;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    true
}

/// Softmax backward for rows: `dx = p * (dp - <dp, p>)`, written into `dp`.
pub(crate) fn softmax_rows_backward(probs: &[f64], dp: &mut [f64], width: usize) {
    for (p, g) in probs.chunks(width).zip(dp.chunks_mut(width)) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi = pi * (*gi - dot);
        }
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods: `x[c, h, w]` -> `cols[c * 9, h * w]`.
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[xo] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: folds column gradients back onto the input grid.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Integer corners and weights of a bilinear sample at `(py, px)`.
/// Corners outside `[0, h) x [0, w)` are reported as `None` (zero padding).
#[inline]
fn bilinear_taps(py: f64, px: f64, h: usize, w: usize) -> ([(Option<usize>, f64); 4], f64, f64) {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let idx = |yy: f64, xx: f64| -> Option<usize> {
        if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    (
        [
            (idx(y0, x0), (1.0 - fy) * (1.0 - fx)),
            (idx(y0, x0 + 1.0), (1.0 - fy) * fx),
            (idx(y0 + 1.0, x0), fy * (1.0 - fx)),
            (idx(y0 + 1.0, x0 + 1.0), fy * fx),
        ],
        fy,
        fx,
    )
}

/// Bilinear sampling of `x[c, h, w]` at `coords[2, ho, wo]` (row, column positions
/// in cell units). Zero-weight taps are skipped, so integer positions are an exact gather.
pub fn bilinear_gather(x: &[f64], c: usize, h: usize, w: usize, coords: &[f64], ho: usize, wo: usize) -> Vec<f64> {
    let n_out = ho * wo;
    let mut out = vec![0.0; c * n_out];
    let (ys, xs) = coords.split_at(n_out);
    for o in 0..n_out {
        let (taps, _, _) = bilinear_taps(ys[o], xs[o], h, w);
        for (tap, wt) in taps {
            let Some(src) = tap else { continue };
            if wt == 0.0 {
                continue;
            }
            for ci in 0..c {
                out[ci * n_out + o] += wt * x[ci * h * w + src];
            }
        }
    }
    out
}

/// Gradients of [`bilinear_gather`] w.r.t. the grid and the sampling coordinates.
pub(crate) fn bilinear_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    ho: usize,
    wo: usize,
    grad_out: &[f64],
    want_x: bool,
    want_coords: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n_out = ho * wo;
    let mut gx = want_x.then(|| vec![0.0; c * h * w]);
    let mut gc = want_coords.then(|| vec![0.0; 2 * n_out]);
    let (ys, xs) = coords.split_at(n_out);
    for o in 0..n_out {
        let (taps, fy, fx) = bilinear_taps(ys[o], xs[o], h, w);
        if let Some(gx) = gx.as_mut() {
            for (tap, wt) in taps {
                let Some(src) = tap else { continue };
                if wt == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    gx[ci * h * w + src] += wt * grad_out[ci * n_out + o];
                }
            }
        }
        if let Some(gc) = gc.as_mut() {
            let val = |tap: Option<usize>, ci: usize| tap.map_or(0.0, |s| x[ci * h * w + s]);
            let (mut dy, mut dx) = (0.0, 0.0);
            for ci in 0..c {
                let g = grad_out[ci * n_out + o];
                if g == 0.0 {
                    continue;
                }
                let v00 = val(taps[0].0, ci);
                let v01 = val(taps[1].0, ci);
                let v10 = val(taps[2].0, ci);
                let v11 = val(taps[3].0, ci);
                dy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                dx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            }
            gc[o] += dy;
            gc[n_out + o] += dx;
        }
    }
    (gx, gc)
}

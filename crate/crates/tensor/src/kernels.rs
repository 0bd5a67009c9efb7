//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! All buffers are row-major. Convolutions use NCHW activations and
//! `[C_out, C_in, kh, kw]` weights.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds the whole batch into a `[C_in*kh*kw, B*Ho*Wo]` column matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = ho * wo;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.k() * ncols];
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[b * l + oy * wo..b * l + (oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = ho * wo;
    let ncols = g.cols();
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let base = (b * g.c_in + c) * g.h * g.w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[b * l + oy * wo..b * l + (oy + 1) * wo];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[base + iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation; returns `[B, C_out, Ho, Wo]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let l = g.out_h() * g.out_w();
    let ncols = g.cols();
    let cols = im2col(g, x);
    let mut tmp = vec![T::zero(); g.c_out * ncols];
    T::gemm(g.c_out, g.k(), ncols, T::one(), w, g.k(), 1, &cols, ncols, 1, T::zero(), &mut tmp, ncols, 1);
    let mut y = vec![T::zero(); g.batch * g.c_out * l];
    for co in 0..g.c_out {
        let bv = bias.map_or(T::zero(), |b| b[co]);
        for b in 0..g.batch {
            let src = &tmp[co * ncols + b * l..co * ncols + (b + 1) * l];
            let dst = &mut y[(b * g.c_out + co) * l..(b * g.c_out + co + 1) * l];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]. Each requested buffer is accumulated into.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let l = g.out_h() * g.out_w();
    let ncols = g.cols();
    // dy [B, Co, L] -> [Co, B*L]
    let mut dout = vec![T::zero(); g.c_out * ncols];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            dout[co * ncols + b * l..co * ncols + (b + 1) * l]
                .copy_from_slice(&dy[(b * g.c_out + co) * l..(b * g.c_out + co + 1) * l]);
        }
    }
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dout[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols = im2col(g, x);
        // dW [Co, K] += dout [Co, N] . cols^T [N, K]
        T::gemm(g.c_out, ncols, g.k(), T::one(), &dout, ncols, 1, &cols, 1, ncols, T::one(), dw, g.k(), 1);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); g.k() * ncols];
        // dcols [K, N] = W^T [K, Co] . dout [Co, N]
        T::gemm(g.k(), g.c_out, ncols, T::one(), w, 1, g.k(), &dout, ncols, 1, T::zero(), &mut dcols, ncols, 1);
        col2im(g, &dcols, dx);
    }
}

/// Numerically stable in-place row softmax.
pub fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `softmax(Q K^T * scale) V` per batch. Returns `(output, probabilities)`.
pub fn attention_forward<T: Real>(
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut probs = vec![T::zero(); b * lq * lk];
    let mut out = vec![T::zero(); b * lq * dv];
    for i in 0..b {
        let qi = &q[i * lq * d..(i + 1) * lq * d];
        let ki = &k[i * lk * d..(i + 1) * lk * d];
        let vi = &v[i * lk * dv..(i + 1) * lk * dv];
        let pi = &mut probs[i * lq * lk..(i + 1) * lq * lk];
        T::gemm(lq, d, lk, scale, qi, d, 1, ki, 1, d, T::zero(), pi, lk, 1);
        softmax_rows(pi, lk);
        let oi = &mut out[i * lq * dv..(i + 1) * lq * dv];
        T::gemm(lq, lk, dv, T::one(), pi, lk, 1, vi, dv, 1, T::zero(), oi, dv, 1);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dvv: Option<&mut [T]>,
) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut ds = vec![T::zero(); lq * lk];
    for i in 0..b {
        let qi = &q[i * lq * d..(i + 1) * lq * d];
        let ki = &k[i * lk * d..(i + 1) * lk * d];
        let vi = &v[i * lk * dv..(i + 1) * lk * dv];
        let pi = &probs[i * lq * lk..(i + 1) * lq * lk];
        let doi = &dout[i * lq * dv..(i + 1) * lq * dv];
        if let Some(dvv) = dvv.as_deref_mut() {
            // dV [Lk, dv] += P^T [Lk, Lq] . dO [Lq, dv]
            T::gemm(lk, lq, dv, T::one(), pi, 1, lk, doi, dv, 1, T::one(), &mut dvv[i * lk * dv..(i + 1) * lk * dv], dv, 1);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP [Lq, Lk] = dO . V^T
        T::gemm(lq, dv, lk, T::one(), doi, dv, 1, vi, 1, dv, T::zero(), &mut ds, lk, 1);
        for r in 0..lq {
            let prow = &pi[r * lk..(r + 1) * lk];
            let drow = &mut ds[r * lk..(r + 1) * lk];
            let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
            for (g, &p) in drow.iter_mut().zip(prow) {
                *g = p * (*g - dot);
            }
        }
        if let Some(dq) = dq.as_deref_mut() {
            T::gemm(lq, lk, d, scale, &ds, lk, 1, ki, d, 1, T::one(), &mut dq[i * lq * d..(i + 1) * lq * d], d, 1);
        }
        if let Some(dk) = dk.as_deref_mut() {
            T::gemm(lk, lq, d, scale, &ds, 1, lk, qi, d, 1, T::one(), &mut dk[i * lk * d..(i + 1) * lk * d], d, 1);
        }
    }
}

/// Checked entry point for plain (non-recorded) attention over raw buffers:
/// `q: [b, lq, d]`, `k: [b, lk, d]`, `v: [b, lk, d]`.
pub fn scaled_dot_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
) -> crate::Result<Vec<T>> {
    if lk == 0 {
        return Err(crate::TensorError::EmptyKeySequence);
    }
    if q.len() != b * lq * d || k.len() != b * lk * d || v.len() != b * lk * d {
        return Err(crate::error::shape_err(
            "scaled_dot_attention",
            "buffer length",
            format!("q {}, k {}, v {} for b={b} lq={lq} lk={lk} d={d}", q.len(), k.len(), v.len()),
        ));
    }
    Ok(attention_forward(b, lq, lk, d, d, q, k, v).0)
}

//! Wengert-list autodiff: every op appends a node holding its value and the
//! ids of its inputs; [`Tape::backward`] walks the list in reverse.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One InfoNCE term over a logit matrix: row `row` is the anchor, column
/// `positive` its positive, `negatives` the competing columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NceTerm {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    PadReplicate { x: Var, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, fan_in: usize, fan_out: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddChannel { x: Var, e: Var, spatial: usize },
    ChannelMean { x: Var, spatial: usize },
    ChannelStd { x: Var, spatial: usize },
    Concat { xs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Narrow { x: Var, outer: usize, inner: usize, full: usize, start: usize, len: usize },
    IndexSelect { x: Var, idx: Vec<usize>, row: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, dims: [usize; 5] },
    L2Normalize { x: Var, norms: Vec<T>, dim: usize },
    RowNorm { x: Var, dim: usize },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    InfoNce { logits: Var, cols: usize, terms: Vec<NceTerm> },
    Upsample2x { x: Var },
    DepthToSpace { x: Var, r: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output index -> input index table for a permutation.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a graph input; gradients flow to it iff the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded node has a valid shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- layers -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d", "input rank", format!("expected [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(shape_err("conv2d", "weight rank", format!("expected [Co,Ci,kh,kw], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(shape_err(
                "conv2d",
                "input channels",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride", "stride must be positive"));
        }
        if xs[2] + 2 * pad < ws[2] {
            return Err(shape_err("conv2d", "height", format!("padded height {} < kernel {}", xs[2] + 2 * pad, ws[2])));
        }
        if xs[3] + 2 * pad < ws[3] {
            return Err(shape_err("conv2d", "width", format!("padded width {} < kernel {}", xs[3] + 2 * pad, ws[3])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    "bias length",
                    format!("expected [{}], got {:?}", ws[0], self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Pads H and W by repeating the border pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("pad_replicate", "input rank", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x);
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for bc in 0..s[0] * s[1] {
            for oy in 0..ho {
                let iy = oy.saturating_sub(pad).min(h - 1);
                for ox in 0..wo {
                    let ix = ox.saturating_sub(pad).min(w - 1);
                    out[bc * ho * wo + oy * wo + ox] = src[bc * h * w + iy * w + ix];
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], ho, wo], out, Op::PadReplicate { x, pad }, &[x]))
    }

    /// Affine map over the last axis: `y = x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(shape_err("linear", "weight rank", format!("expected [out,in], got {ws:?}")));
        }
        let fan_in = *xs.last().unwrap_or(&0);
        if ws[1] != fan_in {
            return Err(shape_err(
                "linear",
                "inner dimension",
                format!("input last dim {fan_in} vs weight in-features {}", ws[1]),
            ));
        }
        let fan_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err("linear", "bias length", format!("expected [{fan_out}], got {:?}", self.shape(b))));
            }
        }
        let rows = numel(&xs) / fan_in;
        let mut y = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(rows, fan_in, fan_out, T::one(), self.value(x), fan_in, 1, self.value(w), 1, fan_in, T::one(), &mut y, fan_out, 1);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = fan_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, y, Op::Linear { x, w, b, rows, fan_in, fan_out }, &inputs))
    }

    /// `[.., M, K] x [.., K, N]` with equal leading (batch) dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", "batch dims", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(shape_err("matmul", "inner dimension", format!("{k} vs {}", sb[r - 2])));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.value(a)[i * m * k..],
                k,
                1,
                &self.value(b)[i * k * n..],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n,
                1,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    // ---- elementwise --------------------------------------------------

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        // NaN propagates so divergence stays visible downstream.
        let y = self.value(x).iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        self.push(self.shape(x).to_vec(), y, Op::Relu { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, "operand shapes", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p - q).collect();
        Ok(self.push(self.shape(a).to_vec(), y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let y = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), y, Op::Scale { x, s }, &[x])
    }

    /// Adds a per-(batch, channel) vector `e: [B, C]` over every spatial
    /// position of `x: [B, C, ...]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() < 2 || es != xs[..2] {
            return Err(shape_err("add_channel", "batch/channel", format!("{xs:?} vs {es:?}")));
        }
        let spatial = numel(&xs[2..]);
        let ev = self.value(e);
        let y = self
            .value(x)
            .chunks(spatial)
            .zip(ev)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v + c))
            .collect();
        Ok(self.push(xs, y, Op::AddChannel { x, e, spatial }, &[x, e]))
    }

    // ---- statistics ---------------------------------------------------

    fn stats_input(&self, op: &'static str, x: Var) -> Result<(Vec<usize>, usize)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err(op, "input rank", format!("expected [B,C,...], got {xs:?}")));
        }
        Ok((xs.clone(), numel(&xs[2..])))
    }

    /// Spatial mean per channel: `[B, C, ...] -> [B, C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (xs, spatial) = self.stats_input("channel_mean", x)?;
        let n = T::of(spatial as f64);
        let y = self.value(x).chunks(spatial).map(|c| c.iter().copied().sum::<T>() / n).collect();
        Ok(self.push(xs[..2].to_vec(), y, Op::ChannelMean { x, spatial }, &[x]))
    }

    /// Population standard deviation per channel, `sqrt(var + 1e-5)`.
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let (xs, spatial) = self.stats_input("channel_std", x)?;
        let n = T::of(spatial as f64);
        let eps = T::of(STD_EPS);
        let y = self
            .value(x)
            .chunks(spatial)
            .map(|c| {
                let m = c.iter().copied().sum::<T>() / n;
                let var = c.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
                (var + eps).sqrt()
            })
            .collect();
        Ok(self.push(xs[..2].to_vec(), y, Op::ChannelStd { x, spatial }, &[x]))
    }

    // ---- shape ops ----------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", "axis", format!("axis {axis} out of range for {base:?}")));
        }
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(shape_err("concat", "non-concat dims", format!("{base:?} vs {s:?}")));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let lens: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(v)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), outer, inner, lens }, xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err("narrow", "range", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let full = s[axis];
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, outer, inner, full, start, len }, &[x]))
    }

    /// Gathers slices along axis 0.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(shape_err("index_select", "indices", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err("index_select", "axis 0", format!("index {bad} >= {}", s[0])));
        }
        let row = numel(&s[1..]);
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(shape, out, Op::IndexSelect { x, idx: idx.to_vec(), row }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(shape_err("reshape", "element count", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", "axes", format!("{perm:?} is not a permutation for {s:?}")));
        }
        let map = permute_index(&s, perm);
        let src = self.value(x);
        let out = map.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", "input rank", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x);
        let mut out = vec![T::zero(); s[0] * s[1] * 4 * h * w];
        for bc in 0..s[0] * s[1] {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    out[bc * 4 * h * w + oy * 2 * w + ox] = src[bc * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2x { x }, &[x]))
    }

    /// `[B, C*r*r, H, W] -> [B, C, H*r, W*r]`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r * r) {
            return Err(shape_err("depth_to_space", "channels", format!("{s:?} with block {r}")));
        }
        let c = s[1] / (r * r);
        let (h, w) = (s[2], s[3]);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..s[0] {
            for ci in 0..c {
                for y in 0..h * r {
                    for xx in 0..w * r {
                        let sc = ci * r * r + (y % r) * r + xx % r;
                        out[((b * c + ci) * h * r + y) * w * r + xx] = src[((b * s[1] + sc) * h + y / r) * w + xx / r];
                    }
                }
            }
        }
        Ok(self.push(vec![s[0], c, h * r, w * r], out, Op::DepthToSpace { x, r }, &[x]))
    }

    // ---- attention ----------------------------------------------------

    /// `softmax(Q K^T / sqrt(d)) V` with `Q: [B, Lq, d]`, `K: [B, Lk, d]`,
    /// `V: [B, Lk, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_err("attention", "rank", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        if ks[1] == 0 {
            return Err(TensorError::EmptyKeySequence);
        }
        if qs[0] != ks[0] || ks[0] != vs[0] {
            return Err(shape_err("attention", "batch", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        if qs[2] != ks[2] {
            return Err(shape_err("attention", "head dim", format!("query d={} vs key d={}", qs[2], ks[2])));
        }
        if ks[1] != vs[1] {
            return Err(shape_err("attention", "key length", format!("{} keys vs {} values", ks[1], vs[1])));
        }
        let dims = [qs[0], qs[1], ks[1], qs[2], vs[2]];
        let (out, probs) = kernels::attention_forward(dims[0], dims[1], dims[2], dims[3], dims[4], self.value(q), self.value(k), self.value(v));
        Ok(self.push(vec![qs[0], qs[1], vs[2]], out, Op::Attention { q, k, v, probs, dims }, &[q, k, v]))
    }

    // ---- normalisation & losses --------------------------------------

    /// Normalises every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let dim = *s.last().unwrap_or(&1);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(src.len() / dim);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(dim) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            // NaN rows pass through so callers can report divergence.
            if n <= T::of(1e-12) {
                return Err(TensorError::DegenerateEmbedding);
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        Ok(self.push(s, out, Op::L2Normalize { x, norms, dim }, &[x]))
    }

    /// L2 norm along the last axis; the subgradient at 0 is 0.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let dim = *s.last().unwrap_or(&1);
        let out = self.value(x).chunks(dim).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        self.push(shape, out, Op::RowNorm { x, dim }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / n;
        Ok(self.push(vec![1], vec![s], Op::Mse { a, b }, &[a, b]))
    }

    /// Mean InfoNCE loss over `terms`, each evaluated on one row of a
    /// `[R, C]` logit matrix with max-subtraction.
    pub fn info_nce(&mut self, logits: Var, terms: Vec<NceTerm>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(shape_err("info_nce", "logit rank", format!("{s:?}")));
        }
        if terms.is_empty() {
            return Err(TensorError::Invalid("info_nce: no terms".into()));
        }
        let cols = s[1];
        for t in &terms {
            if t.negatives.is_empty() {
                return Err(TensorError::Invalid("info_nce: empty negatives".into()));
            }
            if t.row >= s[0] || t.positive >= cols || t.negatives.iter().any(|&c| c >= cols) {
                return Err(shape_err("info_nce", "term index", format!("{t:?} on {s:?}")));
            }
        }
        let l = self.value(logits);
        let mut total = T::zero();
        for t in &terms {
            let row = &l[t.row * cols..(t.row + 1) * cols];
            total += nce_term(row, t);
        }
        let v = total / T::of(terms.len() as f64);
        Ok(self.push(vec![1], vec![v], Op::InfoNce { logits, cols, terms }, &[logits]))
    }

    // ---- reverse pass -------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", "loss", format!("expected a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (wx, ww) = (self.wants(*x), self.wants(*w));
                let wb = b.is_some_and(|b| self.wants(b));
                let mut dx = wx.then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); self.value(*x).len()]));
                let mut dw = ww.then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); self.value(*w).len()]));
                let mut db = if wb {
                    let b = b.expect("checked");
                    Some(grads[b.0].take().unwrap_or_else(|| vec![T::zero(); self.value(b).len()]))
                } else {
                    None
                };
                kernels::conv2d_backward(geom, self.value(*x), self.value(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::PadReplicate { x, pad } => {
                if !self.wants(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                let dx = buf(grads, *x, s.iter().product());
                for bc in 0..s[0] * s[1] {
                    for oy in 0..ho {
                        let iy = oy.saturating_sub(*pad).min(h - 1);
                        for ox in 0..wo {
                            let ix = ox.saturating_sub(*pad).min(w - 1);
                            dx[bc * h * w + iy * w + ix] += g[bc * ho * wo + oy * wo + ox];
                        }
                    }
                }
            }
            Op::Linear { x, w, b, rows, fan_in, fan_out } => {
                let (rows, fi, fo) = (*rows, *fan_in, *fan_out);
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let dx = buf(grads, *x, rows * fi);
                    T::gemm(rows, fo, fi, T::one(), g, fo, 1, wv, fi, 1, T::one(), dx, fi, 1);
                }
                if self.wants(*w) {
                    let xv = self.value(*x);
                    let dw = buf(grads, *w, fo * fi);
                    T::gemm(fo, rows, fi, T::one(), g, 1, fo, xv, fi, 1, T::one(), dw, fi, 1);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = buf(grads, *b, fo);
                        for row in g.chunks(fo) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = buf(grads, *a, batch * m * k);
                    for i in 0..*batch {
                        T::gemm(m, n, k, T::one(), &g[i * m * n..], n, 1, &bv[i * k * n..], 1, n, T::one(), &mut da[i * m * k..], k, 1);
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = buf(grads, *b, batch * k * n);
                    for i in 0..*batch {
                        T::gemm(k, m, n, T::one(), &av[i * m * k..], 1, k, &g[i * m * n..], n, 1, T::one(), &mut db[i * k * n..], n, 1);
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = buf(grads, *x, xv.len());
                    for ((d, &v), &gg) in dx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    let da = buf(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(*b) {
                    let db = buf(grads, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = buf(grads, *a, g.len());
                    for ((d, &v), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += v * o;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = buf(grads, *b, g.len());
                    for ((d, &v), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += v * o;
                    }
                }
            }
            Op::Scale { x, s } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::AddChannel { x, e, spatial } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(*e) {
                    let de = buf(grads, *e, g.len() / spatial);
                    for (d, row) in de.iter_mut().zip(g.chunks(*spatial)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::ChannelMean { x, spatial } => {
                if self.wants(*x) {
                    let n = T::of(*spatial as f64);
                    let dx = buf(grads, *x, g.len() * spatial);
                    for (row, &gg) in dx.chunks_mut(*spatial).zip(g) {
                        row.iter_mut().for_each(|d| *d += gg / n);
                    }
                }
            }
            Op::ChannelStd { x, spatial } => {
                if self.wants(*x) {
                    let n = T::of(*spatial as f64);
                    let xv = self.value(*x);
                    let dx = buf(grads, *x, xv.len());
                    for ((drow, xrow), (&gg, &sd)) in dx.chunks_mut(*spatial).zip(xv.chunks(*spatial)).zip(g.iter().zip(&node.value)) {
                        let m = xrow.iter().copied().sum::<T>() / n;
                        for (d, &v) in drow.iter_mut().zip(xrow) {
                            *d += gg * (v - m) / (n * sd);
                        }
                    }
                }
            }
            Op::Concat { xs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut off = 0;
                for (&v, &l) in xs.iter().zip(lens) {
                    if self.wants(v) {
                        let dv = buf(grads, v, outer * l * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + l) * inner];
                            dv[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += l;
                }
            }
            Op::Narrow { x, outer, inner, full, start, len } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, outer * full * inner);
                    for o in 0..*outer {
                        let dst = &mut dx[(o * full + start) * inner..(o * full + start + len) * inner];
                        dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::IndexSelect { x, idx, row } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let dx = buf(grads, *x, n);
                    for (k, &i) in idx.iter().enumerate() {
                        dx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let map = permute_index(self.shape(*x), perm);
                    let dx = buf(grads, *x, g.len());
                    for (&src, &v) in map.iter().zip(g) {
                        dx[src] += v;
                    }
                }
            }
            Op::Upsample2x { x } => {
                if self.wants(*x) {
                    let s = self.shape(*x).to_vec();
                    let (h, w) = (s[2], s[3]);
                    let dx = buf(grads, *x, numel(&s));
                    for bc in 0..s[0] * s[1] {
                        for oy in 0..2 * h {
                            for ox in 0..2 * w {
                                dx[bc * h * w + (oy / 2) * w + ox / 2] += g[bc * 4 * h * w + oy * 2 * w + ox];
                            }
                        }
                    }
                }
            }
            Op::DepthToSpace { x, r } => {
                if self.wants(*x) {
                    let s = self.shape(*x).to_vec();
                    let r = *r;
                    let c = s[1] / (r * r);
                    let (h, w) = (s[2], s[3]);
                    let dx = buf(grads, *x, numel(&s));
                    for b in 0..s[0] {
                        for ci in 0..c {
                            for y in 0..h * r {
                                for xx in 0..w * r {
                                    let sc = ci * r * r + (y % r) * r + xx % r;
                                    dx[((b * s[1] + sc) * h + y / r) * w + xx / r] += g[((b * c + ci) * h * r + y) * w * r + xx];
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs, dims } => {
                let [b, lq, lk, d, dv] = *dims;
                let mut dq = self.wants(*q).then(|| grads[q.0].take().unwrap_or_else(|| vec![T::zero(); b * lq * d]));
                let mut dk = self.wants(*k).then(|| grads[k.0].take().unwrap_or_else(|| vec![T::zero(); b * lk * d]));
                let mut dvv = self.wants(*v).then(|| grads[v.0].take().unwrap_or_else(|| vec![T::zero(); b * lk * dv]));
                kernels::attention_backward(
                    b,
                    lq,
                    lk,
                    d,
                    dv,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dvv.as_deref_mut(),
                );
                if let Some(t) = dq {
                    grads[q.0] = Some(t);
                }
                if let Some(t) = dk {
                    grads[k.0] = Some(t);
                }
                if let Some(t) = dvv {
                    grads[v.0] = Some(t);
                }
            }
            Op::L2Normalize { x, norms, dim } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let dx = buf(grads, *x, y.len());
                    for (((drow, yrow), grow), &n) in dx.chunks_mut(*dim).zip(y.chunks(*dim)).zip(g.chunks(*dim)).zip(norms) {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((d, &yy), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += (gg - yy * dot) / n;
                        }
                    }
                }
            }
            Op::RowNorm { x, dim } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = buf(grads, *x, xv.len());
                    for (((drow, xrow), &gg), &n) in dx.chunks_mut(*dim).zip(xv.chunks(*dim)).zip(g).zip(&node.value) {
                        if n > T::zero() {
                            for (d, &v) in drow.iter_mut().zip(xrow) {
                                *d += gg * v / n;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let dx = buf(grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let s = g[0] / T::of(n as f64);
                    let dx = buf(grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mse { a, b } => {
                let n = self.value(*a).len();
                let s = T::of(2.0) * g[0] / T::of(n as f64);
                let diff: Vec<T> = self.value(*a).iter().zip(self.value(*b)).map(|(&p, &q)| (p - q) * s).collect();
                if self.wants(*a) {
                    let da = buf(grads, *a, n);
                    da.iter_mut().zip(&diff).for_each(|(d, &v)| *d += v);
                }
                if self.wants(*b) {
                    let db = buf(grads, *b, n);
                    db.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::InfoNce { logits, cols, terms } => {
                if self.wants(*logits) {
                    let l = self.value(*logits);
                    let scale = g[0] / T::of(terms.len() as f64);
                    let mut local = vec![T::zero(); l.len()];
                    for t in terms {
                        let row = &l[t.row * cols..(t.row + 1) * cols];
                        let m = t.negatives.iter().fold(row[t.positive], |acc, &c| acc.max(row[c]));
                        let z: T = (row[t.positive] - m).exp() + t.negatives.iter().map(|&c| (row[c] - m).exp()).sum::<T>();
                        let drow = &mut local[t.row * cols..(t.row + 1) * cols];
                        drow[t.positive] += scale * ((row[t.positive] - m).exp() / z - T::one());
                        for &c in &t.negatives {
                            drow[c] += scale * (row[c] - m).exp() / z;
                        }
                    }
                    let dl = buf(grads, *logits, l.len());
                    dl.iter_mut().zip(&local).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

pub(crate) const STD_EPS: f64 = 1e-5;

fn nce_term<T: Real>(row: &[T], t: &NceTerm) -> T {
    let m = t.negatives.iter().fold(row[t.positive], |acc, &c| acc.max(row[c]));
    let z: T = (row[t.positive] - m).exp() + t.negatives.iter().map(|&c| (row[c] - m).exp()).sum::<T>();
    -(row[t.positive] - m) + z.ln()
}

//! Reverse-mode autodiff tape.
//!
//! Every operation records one node; nodes are replayed in reverse to
//! propagate gradients. Values are appended in topological order by
//! construction, so the reverse walk visits each node exactly once with its
//! output gradient already complete.

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

struct Value {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Log { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, eps: f64 },
    Conv2d { x: usize, kern: usize, bias: usize, stride: usize, pad: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    ConcatSeq { xs: Vec<usize> },
    SliceSeq { x: usize, start: usize },
    SelectRows { x: usize, idx: Vec<usize> },
    BroadcastBatch { x: usize },
    SeqPool { x: usize },
    SeqMax { x: usize },
    ExtractPatches { x: usize, patch: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::ConcatSeq { .. } => "concat_seq",
            Op::SliceSeq { .. } => "slice_seq",
            Op::SelectRows { .. } => "select_rows",
            Op::BroadcastBatch { .. } => "broadcast_batch",
            Op::SeqPool { .. } => "seq_pool",
            Op::SeqMax { .. } => "seq_max",
            Op::ExtractPatches { .. } => "extract_patches",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
        }
    }
}

/// Recorded computation graph plus value storage.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Value>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_COEF: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

use super::sigmoid as sigmoid_fwd;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value_count(&self) -> usize {
        self.vals.len()
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.vals[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.vals[id.0].shape
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.vals[id.0].data[0]
    }

    /// Gradient of the last `backward` loss w.r.t. this value, if tracked.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// First value containing a non-finite entry, as "op#index", if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, v) in self.vals.iter().enumerate() {
            if v.data.iter().any(|x| !x.is_finite()) {
                return Some(format!("{}#{}", self.ops[i].name(), i));
            }
        }
        None
    }

    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn leaf_parts(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Result<ValueId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, needs_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<ValueId> {
        self.leaf_parts(data, shape, false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> ValueId {
        self.vals.push(Value { data, shape, needs_grad });
        self.ops.push(op);
        ValueId(self.vals.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.vals[i].needs_grad)
    }

    // ── binary / unary arithmetic ─────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.vals[a.0].data, &self.vals[b.0].data, m, k, n, &mut out);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], needs, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            kernels::matmul_nn(
                &self.vals[a.0].data[i * m * k..(i + 1) * m * k],
                &self.vals[b.0].data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, vec![bt, m, n], needs, Op::Bmm { a: a.0, b: b.0 }))
    }

    fn binary_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.vals[a.0].shape, &self.vals[b.0].shape);
        if sa == sb {
            Ok(sa.clone())
        } else if self.vals[b.0].data.len() == 1 {
            Ok(sa.clone())
        } else if self.vals[a.0].data.len() == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
        }
    }

    fn binary_map(&mut self, a: ValueId, b: ValueId, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64, op: Op) -> ValueId {
        let n = shape.iter().product();
        let (da, db) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let av = if da.len() == 1 { da[0] } else { da[i] };
            let bv = if db.len() == 1 { db[0] } else { db[i] };
            out.push(f(av, bv));
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(out, shape, needs, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.binary_shape("add", a, b)?;
        Ok(self.binary_map(a, b, shape, |x, y| x + y, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.binary_shape("sub", a, b)?;
        Ok(self.binary_map(a, b, shape, |x, y| x - y, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.binary_shape("mul", a, b)?;
        Ok(self.binary_map(a, b, shape, |x, y| x * y, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Broadcast-add a bias over the last axis.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sx, sb) = (&self.vals[x.0].shape, &self.vals[bias.0].shape);
        let n = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sx.clone(), rhs: sb.clone() });
        }
        let bdata = &self.vals[bias.0].data;
        let out: Vec<f64> = self.vals[x.0]
            .data
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bdata).map(|(&v, &b)| v + b).collect::<Vec<_>>())
            .collect();
        let shape = sx.clone();
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(out, shape, needs, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let out: Vec<f64> = self.vals[x.0].data.iter().map(|&v| c * v).collect();
        let shape = self.vals[x.0].shape.clone();
        let needs = self.vals[x.0].needs_grad;
        self.push(out, shape, needs, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let out: Vec<f64> = self.vals[x.0].data.iter().map(|&v| v + c).collect();
        let shape = self.vals[x.0].shape.clone();
        let needs = self.vals[x.0].needs_grad;
        self.push(out, shape, needs, Op::AddScalar { x: x.0 })
    }

    fn unary_map(&mut self, x: ValueId, f: impl Fn(f64) -> f64, op: Op) -> ValueId {
        let out: Vec<f64> = self.vals[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.vals[x.0].shape.clone();
        let needs = self.vals[x.0].needs_grad;
        self.push(out, shape, needs, op)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.unary_map(x, sigmoid_fwd, Op::Sigmoid { x: x.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        self.unary_map(x, gelu_fwd, Op::Gelu { x: x.0 })
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        if let Some(&bad) = self.vals[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary_map(x, f64::ln, Op::Log { x: x.0 }))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo < hi) {
            return Err(Error::contract(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        Ok(self.unary_map(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi }))
    }

    // ── structured ops ────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`; rows sum to 1.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.vals[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.vals[x.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, shape, needs, Op::Softmax { x: x.0, axis }))
    }

    /// Per-token normalization over the last axis, then affine gain/shift.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, shift: ValueId, eps: f64) -> Result<ValueId> {
        let shape = self.vals[x.0].shape.clone();
        let d = *shape.last().unwrap();
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let s = &self.vals[id.0].shape;
            if s.len() != 1 || s[0] != d {
                return Err(Error::contract(format!(
                    "layer_norm {name} shape {s:?} does not match feature dim {d}"
                )));
            }
        }
        let g = &self.vals[gain.0].data;
        let b = &self.vals[shift.0].data;
        let mut out = Vec::with_capacity(self.vals[x.0].data.len());
        for row in self.vals[x.0].data.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let needs = self.needs(&[x.0, gain.0, shift.0]);
        Ok(self.push(out, shape, needs, Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, eps }))
    }

    /// 2-D cross-correlation. Output extent must be integral:
    /// (H + 2p - kh) and (W + 2p - kw) must be divisible by the stride.
    pub fn conv2d(&mut self, x: ValueId, kern: ValueId, bias: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        let sx = self.vals[x.0].shape.clone();
        let sk = self.vals[kern.0].shape.clone();
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let (h, w, kh, kw) = (sx[2], sx[3], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent is not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad}"
            )));
        }
        let sb = &self.vals[bias.0].shape;
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: sk, rhs: sb.clone() });
        }
        let d = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            h,
            w,
            out_ch: sk[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
        kernels::conv2d_forward(&self.vals[x.0].data, &self.vals[kern.0].data, &self.vals[bias.0].data, &d, &mut out);
        let shape = vec![d.batch, d.out_ch, d.out_h, d.out_w];
        let needs = self.needs(&[x.0, kern.0, bias.0]);
        Ok(self.push(out, shape, needs, Op::Conv2d { x: x.0, kern: kern.0, bias: bias.0, stride, pad }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if shape.iter().product::<usize>() != self.vals[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.vals[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.vals[x.0].data.clone();
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(data, shape, needs, Op::Reshape { x: x.0 }))
    }

    pub fn permute(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let shape = self.vals[x.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!(
                "permute axes {axes:?} is not a permutation of 0..{}",
                shape.len()
            )));
        }
        let (out, new_shape) = permute_data(&self.vals[x.0].data, &shape, axes);
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, new_shape, needs, Op::Permute { x: x.0, axes: axes.to_vec() }))
    }

    /// Concatenate [B, L_i, E] values along the sequence axis.
    pub fn concat_seq(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_seq of zero sequences"));
        }
        let first = self.vals[xs[0].0].shape.clone();
        if first.len() != 3 {
            return Err(Error::contract(format!("concat_seq expects [B,L,E], got {first:?}")));
        }
        let (b, e) = (first[0], first[2]);
        let mut total = 0;
        for &x in xs {
            let s = &self.vals[x.0].shape;
            if s.len() != 3 || s[0] != b || s[2] != e {
                return Err(Error::ShapeMismatch { op: "concat_seq", lhs: first, rhs: s.clone() });
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * e);
        for bi in 0..b {
            for &x in xs {
                let l = self.vals[x.0].shape[1];
                let src = &self.vals[x.0].data[bi * l * e..(bi + 1) * l * e];
                out.extend_from_slice(src);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, vec![b, total, e], needs, Op::ConcatSeq { xs: ids }))
    }

    /// Slice `len` tokens starting at `start` along the sequence axis.
    pub fn slice_seq(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let s = self.vals[x.0].shape.clone();
        if s.len() != 3 || start + len > s[1] || len == 0 {
            return Err(Error::contract(format!(
                "slice_seq [{start}, {start}+{len}) out of range for shape {s:?}"
            )));
        }
        let (b, t, e) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * len * e);
        for bi in 0..b {
            let base = (bi * t + start) * e;
            out.extend_from_slice(&self.vals[x.0].data[base..base + len * e]);
        }
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, vec![b, len, e], needs, Op::SliceSeq { x: x.0, start }))
    }

    /// Gather rows along axis 0.
    pub fn select_rows(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let s = self.vals[x.0].shape.clone();
        let rows = s[0];
        if idx.is_empty() {
            return Err(Error::contract("select_rows with empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("select_rows index {bad} out of range {rows}")));
        }
        let stride: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&self.vals[x.0].data[i * stride..(i + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, shape, needs, Op::SelectRows { x: x.0, idx: idx.to_vec() }))
    }

    /// Repeat a value along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: ValueId, batch: usize) -> Result<ValueId> {
        if batch == 0 {
            return Err(Error::contract("broadcast_batch with batch 0"));
        }
        let s = self.vals[x.0].shape.clone();
        let n = self.vals[x.0].data.len();
        let mut out = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            out.extend_from_slice(&self.vals[x.0].data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&s);
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, shape, needs, Op::BroadcastBatch { x: x.0 }))
    }

    /// Adaptive average pooling along the sequence axis: [B,L,E] -> [B,N,E].
    /// Output token i averages input tokens [floor(i*L/N), floor((i+1)*L/N)).
    pub fn seq_pool(&mut self, x: ValueId, target: usize) -> Result<ValueId> {
        let s = self.vals[x.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::contract(format!("seq_pool expects [B,L,E], got {s:?}")));
        }
        let (b, l, e) = (s[0], s[1], s[2]);
        if target == 0 || target > l {
            return Err(Error::contract(format!(
                "seq_pool target length {target} invalid for input length {l}"
            )));
        }
        let mut out = vec![0.0; b * target * e];
        let src = &self.vals[x.0].data;
        for bi in 0..b {
            for i in 0..target {
                let lo = i * l / target;
                let hi = (i + 1) * l / target;
                let width = (hi - lo) as f64;
                let dst = &mut out[(bi * target + i) * e..(bi * target + i + 1) * e];
                for t in lo..hi {
                    let row = &src[(bi * l + t) * e..(bi * l + t + 1) * e];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= width;
                }
            }
        }
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, vec![b, target, e], needs, Op::SeqPool { x: x.0 }))
    }

    /// Per-feature maximum over the sequence axis: [B,L,E] -> [B,1,E].
    pub fn seq_max(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.vals[x.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::contract(format!("seq_max expects [B,L,E], got {s:?}")));
        }
        let (b, l, e) = (s[0], s[1], s[2]);
        let src = &self.vals[x.0].data;
        let mut out = vec![f64::NEG_INFINITY; b * e];
        for bi in 0..b {
            for t in 0..l {
                let row = &src[(bi * l + t) * e..(bi * l + t + 1) * e];
                let dst = &mut out[bi * e..(bi + 1) * e];
                for (d, &v) in dst.iter_mut().zip(row) {
                    if v > *d {
                        *d = v;
                    }
                }
            }
        }
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, vec![b, 1, e], needs, Op::SeqMax { x: x.0 }))
    }

    /// Split [B,C,H,W] into non-overlapping PxP patches -> [B, N, P*P*C].
    /// Patches are enumerated row-major over the grid; each patch is
    /// flattened row-major as (py, px, c).
    pub fn extract_patches(&mut self, x: ValueId, patch: usize) -> Result<ValueId> {
        let s = self.vals[x.0].shape.clone();
        if s.len() != 4 {
            return Err(Error::contract(format!("extract_patches expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} does not divide image {h}x{w}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let f = patch * patch * c;
        let src = &self.vals[x.0].data;
        let mut out = vec![0.0; b * n * f];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let dst = &mut out[(bi * n + tok) * f..(bi * n + tok + 1) * f];
                    let mut fi = 0;
                    for py in 0..patch {
                        for px in 0..patch {
                            for ci in 0..c {
                                dst[fi] = src[((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px];
                                fi += 1;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.vals[x.0].needs_grad;
        Ok(self.push(out, vec![b, n, f], needs, Op::ExtractPatches { x: x.0, patch }))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.vals[x.0].data.iter().sum();
        let needs = self.vals[x.0].needs_grad;
        self.push(vec![s], vec![1], needs, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.vals[x.0].data.len() as f64;
        let s: f64 = self.vals[x.0].data.iter().sum();
        let needs = self.vals[x.0].needs_grad;
        self.push(vec![s / n], vec![1], needs, Op::MeanAll { x: x.0 })
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all tracked values
    /// become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.vals.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.vals[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape
            )));
        }
        self.grads = (0..self.vals.len()).map(|_| None).collect();
        if !self.vals[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.ops[i].clone();
            self.apply_backward(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc<F: FnOnce(&mut [f64])>(&mut self, id: usize, f: F) {
        if !self.vals[id].needs_grad {
            return;
        }
        let n = self.vals[id].data.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    /// Accumulate into a possibly-scalar operand of a broadcast binary op.
    fn acc_binary(&mut self, id: usize, out_len: usize, contrib: impl Fn(usize) -> f64) {
        if !self.vals[id].needs_grad {
            return;
        }
        if self.vals[id].data.len() == 1 && out_len != 1 {
            let mut s = 0.0;
            for i in 0..out_len {
                s += contrib(i);
            }
            self.acc(id, |buf| buf[0] += s);
        } else {
            self.acc(id, |buf| {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += contrib(i);
                }
            });
        }
    }

    fn apply_backward(&mut self, out: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.vals[a].shape[0], self.vals[a].shape[1]);
                let n = self.vals[b].shape[1];
                if self.vals[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, &self.vals[b].data, m, n, k, &mut da);
                    self.acc(a, |buf| add_assign(buf, &da));
                }
                if self.vals[b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(&self.vals[a].data, g, k, m, n, &mut db);
                    self.acc(b, |buf| add_assign(buf, &db));
                }
            }
            Op::Bmm { a, b } => {
                let (bt, m, k) = (self.vals[a].shape[0], self.vals[a].shape[1], self.vals[a].shape[2]);
                let n = self.vals[b].shape[2];
                if self.vals[a].needs_grad {
                    let mut da = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        kernels::matmul_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.vals[b].data[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.acc(a, |buf| add_assign(buf, &da));
                }
                if self.vals[b].needs_grad {
                    let mut db = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        kernels::matmul_tn(
                            &self.vals[a].data[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.acc(b, |buf| add_assign(buf, &db));
                }
            }
            Op::Add { a, b } => {
                self.acc_binary(a, g.len(), |i| g[i]);
                self.acc_binary(b, g.len(), |i| g[i]);
            }
            Op::Sub { a, b } => {
                self.acc_binary(a, g.len(), |i| g[i]);
                self.acc_binary(b, g.len(), |i| -g[i]);
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.vals[a].data.clone(), self.vals[b].data.clone());
                let pick = |d: &Vec<f64>, i: usize| if d.len() == 1 { d[0] } else { d[i] };
                self.acc_binary(a, g.len(), |i| g[i] * pick(&db, i));
                self.acc_binary(b, g.len(), |i| g[i] * pick(&da, i));
            }
            Op::AddBias { x, bias } => {
                self.acc(x, |buf| add_assign(buf, g));
                let n = self.vals[bias].data.len();
                self.acc(bias, |buf| {
                    for row in g.chunks_exact(n) {
                        for (b, &v) in buf.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                self.acc(x, |buf| {
                    for (b, &v) in buf.iter_mut().zip(g) {
                        *b += c * v;
                    }
                });
            }
            Op::AddScalar { x } => {
                self.acc(x, |buf| add_assign(buf, g));
            }
            Op::Sigmoid { x } => {
                let y = self.vals[out].data.clone();
                self.acc(x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = self.vals[x].data.clone();
                self.acc(x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Log { x } => {
                let xd = self.vals[x].data.clone();
                self.acc(x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / xd[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.vals[x].data.clone();
                self.acc(x, |buf| {
                    for i in 0..buf.len() {
                        if xd[i] >= lo && xd[i] <= hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.vals[out].data.clone();
                let (outer, n, inner) = axis_split(&self.vals[out].shape, axis);
                self.acc(x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let d = *self.vals[x].shape.last().unwrap();
                let xd = self.vals[x].data.clone();
                let gd = self.vals[gain].data.clone();
                let rows = xd.len() / d;
                // Recompute per-row statistics.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv = vec![0.0; rows];
                for (r, row) in xd.chunks_exact(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    inv[r] = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv[r];
                    }
                }
                self.acc(x, |buf| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            m1 += gy;
                            m2 += gy * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            buf[r * d + j] += (gy - m1 - xhat[r * d + j] * m2) * inv[r];
                        }
                    }
                });
                self.acc(gain, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(shift, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, kern, bias, stride, pad } => {
                let sx = &self.vals[x].shape;
                let sk = &self.vals[kern].shape;
                let so = &self.vals[out].shape;
                let d = ConvDims {
                    batch: sx[0],
                    in_ch: sx[1],
                    h: sx[2],
                    w: sx[3],
                    out_ch: sk[0],
                    kh: sk[2],
                    kw: sk[3],
                    stride,
                    pad,
                    out_h: so[2],
                    out_w: so[3],
                };
                let mut gx = if self.vals[x].needs_grad { vec![0.0; self.vals[x].data.len()] } else { vec![] };
                let mut gk = if self.vals[kern].needs_grad { vec![0.0; self.vals[kern].data.len()] } else { vec![] };
                let mut gb = if self.vals[bias].needs_grad { vec![0.0; self.vals[bias].data.len()] } else { vec![] };
                kernels::conv2d_backward(&self.vals[x].data, &self.vals[kern].data, g, &d, &mut gx, &mut gk, &mut gb);
                if !gx.is_empty() {
                    self.acc(x, |buf| add_assign(buf, &gx));
                }
                if !gk.is_empty() {
                    self.acc(kern, |buf| add_assign(buf, &gk));
                }
                if !gb.is_empty() {
                    self.acc(bias, |buf| add_assign(buf, &gb));
                }
            }
            Op::Reshape { x } => {
                self.acc(x, |buf| add_assign(buf, g));
            }
            Op::Permute { x, ref axes } => {
                // Gradient flows through the inverse permutation.
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (gx, _) = permute_data(g, &self.vals[out].shape, &inverse);
                self.acc(x, |buf| add_assign(buf, &gx));
            }
            Op::ConcatSeq { ref xs } => {
                let (b, e) = (self.vals[out].shape[0], self.vals[out].shape[2]);
                let total = self.vals[out].shape[1];
                let mut offset = 0;
                for &x in xs {
                    let l = self.vals[x].shape[1];
                    let start = offset;
                    self.acc(x, |buf| {
                        for bi in 0..b {
                            let src = &g[(bi * total + start) * e..(bi * total + start + l) * e];
                            add_assign(&mut buf[bi * l * e..(bi + 1) * l * e], src);
                        }
                    });
                    offset += l;
                }
            }
            Op::SliceSeq { x, start } => {
                let (b, len, e) = (self.vals[out].shape[0], self.vals[out].shape[1], self.vals[out].shape[2]);
                let t = self.vals[x].shape[1];
                self.acc(x, |buf| {
                    for bi in 0..b {
                        let dst = &mut buf[(bi * t + start) * e..(bi * t + start + len) * e];
                        add_assign(dst, &g[bi * len * e..(bi + 1) * len * e]);
                    }
                });
            }
            Op::SelectRows { x, ref idx } => {
                let stride: usize = self.vals[x].shape[1..].iter().product();
                self.acc(x, |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_assign(&mut buf[i * stride..(i + 1) * stride], &g[r * stride..(r + 1) * stride]);
                    }
                });
            }
            Op::BroadcastBatch { x } => {
                let n = self.vals[x].data.len();
                self.acc(x, |buf| {
                    for block in g.chunks_exact(n) {
                        add_assign(buf, block);
                    }
                });
            }
            Op::SeqPool { x } => {
                let (b, n, e) = (self.vals[out].shape[0], self.vals[out].shape[1], self.vals[out].shape[2]);
                let l = self.vals[x].shape[1];
                self.acc(x, |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            let lo = i * l / n;
                            let hi = (i + 1) * l / n;
                            let width = (hi - lo) as f64;
                            let src = &g[(bi * n + i) * e..(bi * n + i + 1) * e];
                            for t in lo..hi {
                                let dst = &mut buf[(bi * l + t) * e..(bi * l + t + 1) * e];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += v / width;
                                }
                            }
                        }
                    }
                });
            }
            Op::SeqMax { x } => {
                // Gradient routes to the first index attaining the maximum.
                let (b, e) = (self.vals[out].shape[0], self.vals[out].shape[2]);
                let l = self.vals[x].shape[1];
                let src = self.vals[x].data.clone();
                let top = self.vals[out].data.clone();
                self.acc(x, |buf| {
                    for bi in 0..b {
                        for f in 0..e {
                            let m = top[bi * e + f];
                            for t in 0..l {
                                if src[(bi * l + t) * e + f] == m {
                                    buf[(bi * l + t) * e + f] += g[bi * e + f];
                                    break;
                                }
                            }
                        }
                    }
                });
            }
            Op::ExtractPatches { x, patch } => {
                let sx = self.vals[x].shape.clone();
                let (_b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (gh, gw) = (h / patch, w / patch);
                let n = gh * gw;
                let f = patch * patch * c;
                self.acc(x, |buf| {
                    let batches = sx[0];
                    for bi in 0..batches {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let tok = gy * gw + gx;
                                let src = &g[(bi * n + tok) * f..(bi * n + tok + 1) * f];
                                let mut fi = 0;
                                for py in 0..patch {
                                    for px in 0..patch {
                                        for ci in 0..c {
                                            buf[((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px] += src[fi];
                                            fi += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.acc(x, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let gv = g[0] / self.vals[x].data.len() as f64;
                self.acc(x, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ndim = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; ndim];
    for i in (0..ndim - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; ndim];
    for o in out.iter_mut() {
        let mut src = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * perm_strides[i];
        }
        *o = data[src];
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap().with_grad()
    }

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    // ── matmul ────────────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let y = t.matmul(i2, m).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_row() {
        let mut t = Tape::new();
        let p = t.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let m = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let y = t.matmul(p, m).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::from_seed(17);
        let a: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                want[i * 2 + j] = s;
            }
        }
        let mut t = Tape::new();
        let ai = t.constant(a, vec![3, 4]).unwrap();
        let bi = t.constant(b, vec![4, 2]).unwrap();
        let y = t.matmul(ai, bi).unwrap();
        for (got, want) in t.data(y).iter().zip(&want) {
            assert!(approx(*got, *want, 1e-12));
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associative_and_exact_up_to_8x8() {
        let mut rng = Rng::from_seed(23);
        for n in [2usize, 4, 8] {
            let mk = |rng: &mut Rng| -> Vec<f64> { (0..n * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect() };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mut t = Tape::new();
            let (ai, bi, ci) = (
                t.constant(a.clone(), vec![n, n]).unwrap(),
                t.constant(b.clone(), vec![n, n]).unwrap(),
                t.constant(c.clone(), vec![n, n]).unwrap(),
            );
            let ab_c = {
                let ab = t.matmul(ai, bi).unwrap();
                t.matmul(ab, ci).unwrap()
            };
            let a_bc = {
                let bc = t.matmul(bi, ci).unwrap();
                t.matmul(ai, bc).unwrap()
            };
            // Oracle: (AB)C by triple loops.
            let mut ab = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for p in 0..n {
                        ab[i * n + j] += a[i * n + p] * b[p * n + j];
                    }
                }
            }
            let mut abc = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for p in 0..n {
                        abc[i * n + j] += ab[i * n + p] * c[p * n + j];
                    }
                }
            }
            for i in 0..n * n {
                assert!(approx(t.data(ab_c)[i], abc[i], 1e-12));
                assert!(approx(t.data(ab_c)[i], t.data(a_bc)[i], 1e-12));
            }
        }
    }

    // ── elementwise ───────────────────────────────────────────────────

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0], vec![1]).unwrap();
        let y = t.gelu(x);
        assert_eq!(t.data(y)[0], 0.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0], vec![1]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.data(y)[0], 0.5);
    }

    #[test]
    fn gelu_matches_gaussian_cdf_quadrature() {
        // Oracle: gelu(x) = x * Phi(x) with Phi computed by Simpson
        // quadrature of the standard normal density on [-12, x].
        let phi = |x: f64| -> f64 {
            let lo = -12.0;
            let steps = 20_000;
            let h = (x - lo) / steps as f64;
            let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut s = pdf(lo) + pdf(x);
            for i in 1..steps {
                let t = lo + i as f64 * h;
                s += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mut t = Tape::new();
        let x = t.constant(vec![3.0], vec![1]).unwrap();
        let y = t.gelu(x);
        let exact = 3.0 * phi(3.0);
        assert!(approx(t.data(y)[0], exact, 1e-3), "{} vs {exact}", t.data(y)[0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, -0.5], vec![2]).unwrap();
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    // ── softmax ───────────────────────────────────────────────────────

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let y = t.softmax(a, 0).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);

        let b = t.constant(vec![1000.0, 1000.0], vec![2]).unwrap();
        let y = t.softmax(b, 0).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!(approx(t.data(y)[i], v.exp() / z, 1e-12));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::from_seed(5);
        let data: Vec<f64> = (0..24).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let shifted: Vec<f64> = data.iter().map(|v| v + 7.5).collect();
        let mut t = Tape::new();
        let x = t.constant(data, vec![2, 3, 4]).unwrap();
        let xs = t.constant(shifted, vec![2, 3, 4]).unwrap();
        let y = t.softmax(x, 2).unwrap();
        let ys = t.softmax(xs, 2).unwrap();
        for row in 0..6 {
            let s: f64 = t.data(y)[row * 4..(row + 1) * 4].iter().sum();
            assert!(approx(s, 1.0, 1e-12));
        }
        for i in 0..24 {
            assert!(approx(t.data(y)[i], t.data(ys)[i], 1e-12));
        }
    }

    // ── backward ──────────────────────────────────────────────────────

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let w = tensor(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.2]);
        let id = t.leaf(&w);
        let loss = t.sum_all(id);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(id).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sigmoid_at_zero_is_quarter() {
        let mut t = Tape::new();
        let w = tensor(vec![1], vec![0.0]);
        let id = t.leaf(&w);
        let y = t.sigmoid(id);
        t.backward(y).unwrap();
        assert!(approx(t.grad(id).unwrap()[0], 0.25, 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let w = tensor(vec![2], vec![1.0, 2.0]);
        let id = t.leaf(&w);
        assert!(matches!(t.backward(id), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let mut t = Tape::new();
        assert!(t.backward(ValueId(0)).is_err());
    }

    // Central finite differences for a scalar-valued graph builder.
    fn finite_diff_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[ValueId]) -> ValueId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            for ei in 0..t.data.len() {
                let eval = |delta: f64| -> f64 {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    perturbed[ti].data[ei] += delta;
                    let mut tape = Tape::new();
                    let ids: Vec<ValueId> = perturbed.iter().map(|t| tape.leaf(t)).collect();
                    let loss = build(&mut tape, &ids);
                    tape.scalar_value(loss)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[ti][ei];
                let scale = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() <= tol * scale,
                    "input {ti} elem {ei}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect())
            .unwrap()
            .with_grad()
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        let mut rng = Rng::from_seed(99);
        let tol = 1e-4;

        // matmul + add + mul + sub chain
        let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
        finite_diff_check(&[a, b], |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum_all(y2)
        }, tol);

        // sigmoid/gelu
        let x = rand_tensor(&mut rng, vec![2, 5], -2.0, 2.0);
        finite_diff_check(&[x], |t, ids| {
            let s = t.sigmoid(ids[0]);
            let g = t.gelu(s);
            t.sum_all(g)
        }, tol);

        // log on positive inputs, with clamp
        let x = rand_tensor(&mut rng, vec![6], 0.5, 2.5);
        finite_diff_check(&[x], |t, ids| {
            let c = t.clamp(ids[0], 0.1, 3.0).unwrap();
            let l = t.log(c).unwrap();
            t.mean_all(l)
        }, tol);

        // softmax
        let x = rand_tensor(&mut rng, vec![2, 4], -2.0, 2.0);
        finite_diff_check(&[x], |t, ids| {
            let s = t.softmax(ids[0], 1).unwrap();
            let w = t.constant((1..=8).map(|v| v as f64 / 4.0).collect(), vec![2, 4]).unwrap();
            let sw = t.mul(s, w).unwrap();
            t.sum_all(sw)
        }, tol);

        // layer_norm
        let x = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let gain = rand_tensor(&mut rng, vec![4], 0.5, 1.5);
        let shift = rand_tensor(&mut rng, vec![4], -0.5, 0.5);
        finite_diff_check(&[x, gain, shift], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum_all(y2)
        }, tol);

        // conv2d
        let x = rand_tensor(&mut rng, vec![1, 2, 5, 5], -2.0, 2.0);
        let k = rand_tensor(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
        finite_diff_check(&[x, k, bias], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.mean_all(y2)
        }, tol);

        // structural ops: patches, pooling, concat, slice, select, broadcast, permute
        let x = rand_tensor(&mut rng, vec![2, 1, 4, 4], -2.0, 2.0);
        let tok = rand_tensor(&mut rng, vec![1, 4], -1.0, 1.0);
        finite_diff_check(&[x, tok], |t, ids| {
            let p = t.extract_patches(ids[0], 2).unwrap(); // [2,4,4]
            let pooled = t.seq_pool(p, 2).unwrap(); // [2,2,4]
            let cls = t.broadcast_batch(ids[1], 2).unwrap(); // [2,1,4]
            let cat = t.concat_seq(&[cls, pooled]).unwrap(); // [2,3,4]
            let perm = t.permute(cat, &[1, 0, 2]).unwrap();
            let back = t.permute(perm, &[1, 0, 2]).unwrap();
            let sl = t.slice_seq(back, 0, 2).unwrap();
            let flat = t.reshape(sl, vec![4, 4]).unwrap();
            let sel = t.select_rows(flat, &[0, 3, 3]).unwrap();
            let s = t.sigmoid(sel);
            t.mean_all(s)
        }, tol);

        // seq_max
        let x = rand_tensor(&mut rng, vec![2, 5, 3], -2.0, 2.0);
        finite_diff_check(&[x], |t, ids| {
            let m = t.seq_max(ids[0]).unwrap();
            let s = t.sigmoid(m);
            t.sum_all(s)
        }, tol);

        // bmm + scale + add_bias + add_scalar
        let a = rand_tensor(&mut rng, vec![2, 3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, vec![2, 4, 2], -2.0, 2.0);
        let bias = rand_tensor(&mut rng, vec![2], -1.0, 1.0);
        finite_diff_check(&[a, b, bias], |t, ids| {
            let y = t.bmm(ids[0], ids[1]).unwrap();
            let y = t.add_bias(y, ids[2]).unwrap();
            let y = t.scale(y, 0.7);
            let y = t.add_scalar(y, 0.3);
            let g = t.gelu(y);
            t.sum_all(g)
        }, tol);

        // scalar broadcast in binary ops
        let a = rand_tensor(&mut rng, vec![5], -2.0, 2.0);
        let s = rand_tensor(&mut rng, vec![1], -1.0, 1.0);
        finite_diff_check(&[a, s], |t, ids| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            let z = t.sub(y, ids[1]).unwrap();
            let w = t.add(z, ids[1]).unwrap();
            t.sum_all(w)
        }, tol);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = Rng::from_seed(1234);
        let x = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
        let w = rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0);
        finite_diff_check(&[x, w], |t, ids| {
            let h = t.matmul(ids[0], ids[1]).unwrap();
            let a = t.gelu(h);
            let s = t.softmax(a, 1).unwrap();
            let c = t.clamp(s, 1e-7, 1.0 - 1e-7).unwrap();
            let l = t.log(c).unwrap();
            let n = t.scale(l, -1.0);
            t.mean_all(n)
        }, 1e-4);
    }

    #[test]
    fn seeded_graph_gradients_are_bit_identical() {
        let run = || -> Vec<f64> {
            let mut rng = Rng::from_seed(42);
            let x = rand_tensor(&mut rng, vec![4, 4], -2.0, 2.0);
            let w = rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
            let mut t = Tape::new();
            let xi = t.leaf(&x);
            let wi = t.leaf(&w);
            let y = t.matmul(xi, wi).unwrap();
            let s = t.softmax(y, 1).unwrap();
            let g = t.gelu(s);
            let loss = t.sum_all(g);
            t.backward(loss).unwrap();
            let mut out = t.grad(xi).unwrap().to_vec();
            out.extend_from_slice(t.grad(wi).unwrap());
            out
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, f64::NAN], vec![2]).unwrap();
        let _y = t.sigmoid(x);
        let name = t.first_non_finite().unwrap();
        assert!(name.starts_with("leaf#"), "{name}");
    }
}

//! Forward operations. Each constructor validates shapes, computes the
//! result eagerly, and appends a node to the tape.

use std::sync::Arc;

use super::{axis_split, Graph, Op, Result, Scalar, TensorError, TensorId};

pub(crate) fn gelu_forward<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh_act())
}

pub(crate) fn sigmoid_forward<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `softplus(x) = ln(1 + e^x)`, computed as `max(x, 0) + ln1p(e^{-|x|})`
/// so large magnitudes neither overflow nor lose the tail.
pub(crate) fn softplus_forward<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    let pos = if x > zero { x } else { zero };
    pos + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    fn unary_needs(&self, x: TensorId) -> bool {
        self.node(x).needs_grad
    }

    fn check_id(&self, id: TensorId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("tensor id {} not in graph", id.0),
            });
        }
        Ok(())
    }

    fn elementwise_pair(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        self.check_id(a, op)?;
        self.check_id(b, op)?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Matrix product of 2-D tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a, "matmul")?;
        self.check_id(b, "matmul")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("expects 2-D operands, got {sa:?} x {sb:?}"),
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions differ: {sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Arc::new(out), vec![m, n], needs, Op::Matmul { a, b }))
    }

    fn binary_map(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<TensorId> {
        self.elementwise_pair(a, b, op_name)?;
        let out: Vec<T> =
            self.data(a).iter().zip(self.data(b).iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Arc::new(out), shape, needs, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "subtract", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_map(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias over the last axis, positional table over the batch, ...).
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a, "add")?;
        self.check_id(b, "add")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("broadcast shape {sb:?} is not a suffix of {sa:?}"),
            });
        }
        let bl = self.numel(b);
        let mut out = self.data(a).to_vec();
        let bd = self.data(b).to_vec();
        for chunk in out.chunks_mut(bl) {
            for (o, &v) in chunk.iter_mut().zip(bd.iter()) {
                *o += v;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Arc::new(out), shape, needs, Op::AddBroadcast { a, b }))
    }

    /// Elementwise `mul * x + add` with scalar constants. `scale` and
    /// constant shifts are both this op.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        self.check_id(x, "scale")?;
        let (m, a) = (T::from_f64(mul), T::from_f64(add));
        let out: Vec<T> = self.data(x).iter().map(|&v| m * v + a).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), shape, needs, Op::Affine { x, mul, add }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.affine(x, factor, 0.0)
    }

    fn unary_map(
        &mut self,
        x: TensorId,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: Op,
    ) -> Result<TensorId> {
        self.check_id(x, op_name)?;
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), shape, needs, op))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "relu", |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "gelu", gelu_forward, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "sigmoid", sigmoid_forward, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary_map(x, "softplus", softplus_forward, Op::Softplus { x })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "transpose")?;
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("expects a 2-D tensor, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), vec![c, r], needs, Op::Transpose { x }))
    }

    /// Swap the last two axes of a rank-3 tensor: `[b,r,c] -> [b,c,r]`.
    pub fn transpose_batched(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "transpose")?;
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("batched transpose expects a 3-D tensor, got {s:?}"),
            });
        }
        let (b, r, c) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); b * r * c];
        for bi in 0..b {
            let base = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), vec![b, c, r], needs, Op::TransposeBatched { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check_id(x, "reshape")?;
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape(x)),
            });
        }
        let data = Arc::clone(&self.nodes[x.0].data);
        let needs = self.unary_needs(x);
        Ok(self.push(data, shape, needs, Op::Reshape { x }))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        for &id in inputs {
            self.check_id(id, "concat")?;
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == first.len()
                && s.iter().zip(first.iter()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} does not match {first:?} off axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let len = self.shape(id)[axis];
            let src = self.data(id);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let needs = inputs.iter().any(|&id| self.node(id).needs_grad);
        Ok(self.push(Arc::new(out), shape, needs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x, "slice")?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, axis_len, inner) = axis_split(&s, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * axis_len + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), shape, needs, Op::Slice { x, axis, start, len }))
    }

    /// Row gather from a table: `out[i, ..] = table[indices[i], ..]`.
    pub fn embedding_lookup(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        self.check_id(table, "embedding-lookup")?;
        let s = self.shape(table).to_vec();
        if s.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding-lookup",
                detail: format!("table must have rank >= 2, got {s:?}"),
            });
        }
        let rows = s[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embedding-lookup",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_len: usize = s[1..].iter().product();
        let src = self.data(table);
        let mut out = vec![T::zero(); indices.len() * row_len];
        for (i, &r) in indices.iter().enumerate() {
            out[i * row_len..(i + 1) * row_len]
                .copy_from_slice(&src[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let needs = self.unary_needs(table);
        Ok(self.push(
            Arc::new(out),
            shape,
            needs,
            Op::EmbeddingLookup { table, indices: Arc::new(indices.to_vec()) },
        ))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` all have
    /// shape `[frames * tokens, dim]`; attention is computed per frame
    /// and per head with scale `1/sqrt(dim/heads)`, heads concatenated
    /// back along the feature axis.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        frames: usize,
    ) -> Result<TensorId> {
        for id in [q, k, v] {
            self.check_id(id, "attention")?;
        }
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "q/k/v must share a 2-D shape: {:?} / {:?} / {:?}",
                    shape,
                    self.shape(k),
                    self.shape(v)
                ),
            });
        }
        let (rows, dim) = (shape[0], shape[1]);
        if frames == 0 || heads == 0 || rows % frames != 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                detail: format!("{rows} rows / {frames} frames, {dim} dim / {heads} heads"),
            });
        }
        let tokens = rows / frames;
        let dh = dim / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let qd = Arc::clone(&self.nodes[q.0].data);
        let kd = Arc::clone(&self.nodes[k.0].data);
        let vd = Arc::clone(&self.nodes[v.0].data);
        let mut out = vec![T::zero(); rows * dim];
        let mut scores = vec![T::zero(); tokens * tokens];
        for f in 0..frames {
            let base = f * tokens * dim;
            for h in 0..heads {
                let off = base + h * dh;
                // scores = scale * Q_h K_h^T
                T::gemm_strided(
                    tokens, dh, tokens,
                    scale,
                    &qd[off..], dim as isize, 1,
                    &kd[off..], 1, dim as isize,
                    T::zero(),
                    &mut scores,
                );
                softmax_rows_inplace(&mut scores, tokens);
                // out_h = probs V_h, written into the interleaved slab
                T::gemm_view(
                    tokens, tokens, dh,
                    T::one(),
                    &scores, tokens as isize, 1,
                    &vd[off..], dim as isize, 1,
                    T::zero(),
                    &mut out[off..],
                    dim as isize, 1,
                );
            }
        }
        let needs =
            self.node(q).needs_grad || self.node(k).needs_grad || self.node(v).needs_grad;
        Ok(self.push(Arc::new(out), shape, needs, Op::Attention { q, k, v, heads, frames }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "softmax")?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (row_out, row_in) in out.chunks_mut(d).zip(src.chunks(d)) {
            let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), shape, needs, Op::SoftmaxLast { x }))
    }

    /// Layer normalization over the last axis with learned `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.check_id(x, "layer-normalization")?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            self.check_id(id, "layer-normalization")?;
            if self.shape(id) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer-normalization",
                    detail: format!("{name} shape {:?} vs feature width {d}", self.shape(id)),
                });
            }
        }
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps_t = T::from_f64(eps);
        let src = Arc::clone(&self.nodes[x.0].data);
        let g = Arc::clone(&self.nodes[gamma.0].data);
        let b = Arc::clone(&self.nodes[beta.0].data);
        let mut out = vec![T::zero(); src.len()];
        for (row_out, row_in) in out.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row_in.iter().cloned().sum::<T>() * inv_d;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv_std = T::one() / (var + eps_t).sqrt();
            for i in 0..d {
                row_out[i] = (row_in[i] - mean) * inv_std * g[i] + b[i];
            }
        }
        let needs =
            self.node(x).needs_grad || self.node(gamma).needs_grad || self.node(beta).needs_grad;
        Ok(self.push(Arc::new(out), shape, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// 2-D convolution: `x [b,cin,h,w]`, `w [cout,cin,kh,kw]`,
    /// optional `bias [cout]`, square stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.check_id(x, "conv2d")?;
        self.check_id(w, "conv2d")?;
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expects 4-D input and weight, got {sx:?}, {sw:?}"),
            });
        }
        if sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs weight channels {}", sx[1], sw[1]),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride 0".into() });
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}"),
            });
        }
        if let Some(bid) = bias {
            self.check_id(bid, "conv2d")?;
            if self.shape(bid) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?} vs {cout} filters", self.shape(bid)),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let patch = oh * ow;
        let k = cin * kh * kw;

        // weight transposed once: [k, cout]
        let wsrc = self.data(w);
        let mut wt = vec![T::zero(); k * cout];
        for o in 0..cout {
            for j in 0..k {
                wt[j * cout + o] = wsrc[o * k + j];
            }
        }

        let xsrc = self.data(x);
        let bdata = bias.map(|bid| self.data(bid).to_vec());
        let mut out = vec![T::zero(); b * cout * patch];
        let mut col = vec![T::zero(); patch * k];
        let mut prod = vec![T::zero(); patch * cout];
        for bi in 0..b {
            im2col(&xsrc[bi * cin * h * wd..], cin, h, wd, kh, kw, stride, padding, &mut col);
            T::gemm(patch, k, cout, T::one(), &col, &wt, T::zero(), &mut prod);
            let dst = &mut out[bi * cout * patch..(bi + 1) * cout * patch];
            for p in 0..patch {
                for o in 0..cout {
                    dst[o * patch + p] = prod[p * cout + o];
                }
            }
            if let Some(ref bd) = bdata {
                for o in 0..cout {
                    let bv = bd[o];
                    for v in dst[o * patch..(o + 1) * patch].iter_mut() {
                        *v += bv;
                    }
                }
            }
        }
        let needs = self.node(x).needs_grad
            || self.node(w).needs_grad
            || bias.map(|bid| self.node(bid).needs_grad).unwrap_or(false);
        Ok(self.push(
            Arc::new(out),
            vec![b, cout, oh, ow],
            needs,
            Op::Conv2d { x, w, bias, stride, padding },
        ))
    }

    /// Nearest-neighbor 2x upsampling: `[b,c,h,w] -> [b,c,2h,2w]`.
    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "nearest-upsample2x")?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "nearest-upsample2x",
                detail: format!("expects a 4-D tensor, got {s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let sbase = plane * h * w;
            let dbase = plane * 4 * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let v = src[sbase + y * w + xx];
                    let d0 = dbase + (2 * y) * 2 * w + 2 * xx;
                    let d1 = dbase + (2 * y + 1) * 2 * w + 2 * xx;
                    out[d0] = v;
                    out[d0 + 1] = v;
                    out[d1] = v;
                    out[d1 + 1] = v;
                }
            }
        }
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(out), vec![b, c, 2 * h, 2 * w], needs, Op::Upsample2x { x }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "sum-reduce")?;
        let s: T = self.data(x).iter().cloned().sum();
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(vec![s]), vec![1], needs, Op::SumAll { x }))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "mean-reduce")?;
        let n = self.numel(x);
        let s: T = self.data(x).iter().cloned().sum();
        let m = s * T::from_f64(1.0 / n as f64);
        let needs = self.unary_needs(x);
        Ok(self.push(Arc::new(vec![m]), vec![1], needs, Op::MeanAll { x }))
    }
}

/// Row-wise softmax in place on a square `[n, n]` buffer.
pub(crate) fn softmax_rows_inplace<T: Scalar>(buf: &mut [T], n: usize) {
    for row in buf.chunks_mut(n) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Expand one image `[cin,h,w]` into patch rows `[oh*ow, cin*kh*kw]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    col: &mut [T],
) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    debug_assert_eq!(col.len(), oh * ow * cin * kh * kw);
    let k = cin * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k;
            let y0 = (oy * stride) as isize - padding as isize;
            let x0 = (ox * stride) as isize - padding as isize;
            let mut idx = row;
            for c in 0..cin {
                let cbase = c * h * w;
                for dy in 0..kh {
                    let y = y0 + dy as isize;
                    if y < 0 || y >= h as isize {
                        for _ in 0..kw {
                            col[idx] = T::zero();
                            idx += 1;
                        }
                        continue;
                    }
                    let rbase = cbase + y as usize * w;
                    for dx in 0..kw {
                        let xx = x0 + dx as isize;
                        col[idx] = if xx < 0 || xx >= w as isize {
                            T::zero()
                        } else {
                            x[rbase + xx as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add patch rows back onto an image. Inverse layout of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    x: &mut [T],
) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let k = cin * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k;
            let y0 = (oy * stride) as isize - padding as isize;
            let x0 = (ox * stride) as isize - padding as isize;
            let mut idx = row;
            for c in 0..cin {
                let cbase = c * h * w;
                for dy in 0..kh {
                    let y = y0 + dy as isize;
                    if y < 0 || y >= h as isize {
                        idx += kw;
                        continue;
                    }
                    let rbase = cbase + y as usize * w;
                    for dx in 0..kw {
                        let xx = x0 + dx as isize;
                        if xx >= 0 && xx < w as isize {
                            x[rbase + xx as usize] += col[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

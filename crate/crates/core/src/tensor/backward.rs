//! Reverse sweep. Each rule reads the upstream gradient of one node and
//! accumulates into its inputs; the tape order guarantees every node is
//! visited exactly once, after all of its consumers.

use super::ops::{col2im_add, im2col, sigmoid_forward};
use super::{axis_split, Graph, Op, Result, Scalar, TensorError, TensorId};

impl<T: Scalar> Graph<T> {
    /// Accumulate `dLoss/dNode` into every node reachable from `loss` that
    /// needs gradients. `loss` must be a scalar recorded on this tape.
    /// Gradients add across multiple uses of the same tensor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Detached { id: loss.0, len: self.nodes.len() });
        }
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        self.seed_grad(loss, T::one());
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.apply_rule(TensorId(i), &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    pub(crate) fn seed_grad(&mut self, id: TensorId, value: T) {
        let n = self.numel(id);
        self.nodes[id.0].grad = Some(vec![value; n]);
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [T] {
        let n = self.nodes[id.0].data.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&mut self, id: TensorId, values: &[T]) {
        if !self.wants(id) {
            return;
        }
        for (dst, &v) in self.grad_buf(id).iter_mut().zip(values.iter()) {
            *dst += v;
        }
    }

    fn accumulate_scaled(&mut self, id: TensorId, values: &[T], factor: T) {
        if !self.wants(id) {
            return;
        }
        for (dst, &v) in self.grad_buf(id).iter_mut().zip(values.iter()) {
            *dst += factor * v;
        }
    }

    fn apply_rule(&mut self, out: TensorId, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, n) = (self.shape(out)[0], self.shape(out)[1]);
                let k = self.shape(a)[1];
                if self.wants(a) {
                    // da += g · b^T
                    let bd = self.nodes[b.0].data.clone();
                    T::gemm_strided(
                        m, n, k,
                        T::one(),
                        g, n as isize, 1,
                        &bd, 1, n as isize,
                        T::one(),
                        self.grad_buf(a),
                    );
                }
                if self.wants(b) {
                    // db += a^T · g
                    let ad = self.nodes[a.0].data.clone();
                    T::gemm_strided(
                        k, m, n,
                        T::one(),
                        &ad, 1, k as isize,
                        g, n as isize, 1,
                        T::one(),
                        self.grad_buf(b),
                    );
                }
            }

            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }

            Op::AddBroadcast { a, b } => {
                self.accumulate(a, g);
                if self.wants(b) {
                    let bl = self.numel(b);
                    let buf = self.grad_buf(b);
                    for chunk in g.chunks(bl) {
                        for (dst, &v) in buf.iter_mut().zip(chunk.iter()) {
                            *dst += v;
                        }
                    }
                }
            }

            Op::Sub { a, b } => {
                self.accumulate(a, g);
                self.accumulate_scaled(b, g, -T::one());
            }

            Op::Mul { a, b } => {
                if self.wants(a) {
                    let bd = self.nodes[b.0].data.clone();
                    let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect();
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let ad = self.nodes[a.0].data.clone();
                    let db: Vec<T> = g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect();
                    self.accumulate(b, &db);
                }
            }

            Op::Div { a, b } => {
                let bd = self.nodes[b.0].data.clone();
                if self.wants(a) {
                    let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi / bi).collect();
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let ad = self.nodes[a.0].data.clone();
                    let db: Vec<T> = g
                        .iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(b, &db);
                }
            }

            Op::Affine { x, mul, .. } => {
                self.accumulate_scaled(x, g, T::from_f64(mul));
            }

            Op::Relu { x } => {
                let xd = self.nodes[x.0].data.clone();
                let factor = self.rule_factor("relu");
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi * factor } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Gelu { x } => {
                let xd = self.nodes[x.0].data.clone();
                let c = T::from_f64(0.7978845608028654);
                let k3 = T::from_f64(0.044715);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let factor = self.rule_factor("gelu");
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| {
                        let inner = c * (xi + k3 * xi * xi * xi);
                        let t = inner.tanh_act();
                        let sech2 = T::one() - t * t;
                        let dinner = c * (T::one() + three * k3 * xi * xi);
                        gi * factor * (half * (T::one() + t) + half * xi * sech2 * dinner)
                    })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Sigmoid { x } => {
                let od = self.nodes[out.0].data.clone();
                let factor = self.rule_factor("sigmoid");
                let dx: Vec<T> = g
                    .iter()
                    .zip(od.iter())
                    .map(|(&gi, &si)| gi * factor * si * (T::one() - si))
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Softplus { x } => {
                let xd = self.nodes[x.0].data.clone();
                let factor = self.rule_factor("softplus");
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| gi * factor * sigmoid_forward(xi))
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Transpose { x } => {
                if self.wants(x) {
                    let (r, c) = (self.shape(out)[0], self.shape(out)[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] = g[i * c + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }

            Op::TransposeBatched { x } => {
                if self.wants(x) {
                    let s = self.shape(out);
                    let (b, r, c) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); b * r * c];
                    for bi in 0..b {
                        let base = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                dx[base + j * r + i] = g[base + i * c + j];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }

            Op::Reshape { x } => {
                self.accumulate(x, g);
            }

            Op::Concat { ref inputs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let (outer, axis_total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0;
                for &id in inputs {
                    let len = self.shape(id)[axis];
                    if self.wants(id) {
                        let mut piece = vec![T::zero(); outer * len * inner];
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * len * inner;
                            piece[dst_base..dst_base + len * inner]
                                .copy_from_slice(&g[src_base..src_base + len * inner]);
                        }
                        self.accumulate(id, &piece);
                    }
                    offset += len;
                }
            }

            Op::Slice { x, axis, start, len } => {
                if self.wants(x) {
                    let in_shape = self.shape(x).to_vec();
                    let (outer, axis_len, inner) = axis_split(&in_shape, axis);
                    let buf = self.grad_buf(x);
                    for o in 0..outer {
                        let dst_base = (o * axis_len + start) * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            buf[dst_base + j] += g[src_base + j];
                        }
                    }
                }
            }

            Op::EmbeddingLookup { table, ref indices } => {
                if self.wants(table) {
                    let row_len: usize = self.shape(table)[1..].iter().product();
                    let idx = indices.clone();
                    let buf = self.grad_buf(table);
                    for (i, &r) in idx.iter().enumerate() {
                        let src = &g[i * row_len..(i + 1) * row_len];
                        for (dst, &v) in buf[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
            }

            Op::Attention { q, k, v, heads, frames } => {
                let shape = self.shape(out).to_vec();
                let (rows, dim) = (shape[0], shape[1]);
                let tokens = rows / frames;
                let dh = dim / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let qd = self.nodes[q.0].data.clone();
                let kd = self.nodes[k.0].data.clone();
                let vd = self.nodes[v.0].data.clone();
                let mut dq = vec![T::zero(); rows * dim];
                let mut dk = vec![T::zero(); rows * dim];
                let mut dv = vec![T::zero(); rows * dim];
                let mut probs = vec![T::zero(); tokens * tokens];
                let mut dprobs = vec![T::zero(); tokens * tokens];
                for f in 0..frames {
                    let base = f * tokens * dim;
                    for h in 0..heads {
                        let off = base + h * dh;
                        // recompute probs = softmax(scale Q_h K_h^T)
                        T::gemm_strided(
                            tokens, dh, tokens,
                            scale,
                            &qd[off..], dim as isize, 1,
                            &kd[off..], 1, dim as isize,
                            T::zero(),
                            &mut probs,
                        );
                        super::ops::softmax_rows_inplace(&mut probs, tokens);
                        // dV_h += probs^T dOut_h
                        T::gemm_view(
                            tokens, tokens, dh,
                            T::one(),
                            &probs, 1, tokens as isize,
                            &g[off..], dim as isize, 1,
                            T::one(),
                            &mut dv[off..],
                            dim as isize, 1,
                        );
                        // dprobs = dOut_h V_h^T
                        T::gemm_strided(
                            tokens, dh, tokens,
                            T::one(),
                            &g[off..], dim as isize, 1,
                            &vd[off..], 1, dim as isize,
                            T::zero(),
                            &mut dprobs,
                        );
                        // softmax backward per row, in place in dprobs
                        for (dp_row, p_row) in
                            dprobs.chunks_mut(tokens).zip(probs.chunks(tokens))
                        {
                            let dot: T = dp_row
                                .iter()
                                .zip(p_row.iter())
                                .map(|(&a, &b)| a * b)
                                .sum();
                            for (dp, &p) in dp_row.iter_mut().zip(p_row.iter()) {
                                *dp = p * (*dp - dot);
                            }
                        }
                        // dQ_h += scale * dscores K_h
                        T::gemm_view(
                            tokens, tokens, dh,
                            scale,
                            &dprobs, tokens as isize, 1,
                            &kd[off..], dim as isize, 1,
                            T::one(),
                            &mut dq[off..],
                            dim as isize, 1,
                        );
                        // dK_h += scale * dscores^T Q_h
                        T::gemm_view(
                            tokens, tokens, dh,
                            scale,
                            &dprobs, 1, tokens as isize,
                            &qd[off..], dim as isize, 1,
                            T::one(),
                            &mut dk[off..],
                            dim as isize, 1,
                        );
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }

            Op::SoftmaxLast { x } => {
                if self.wants(x) {
                    let d = *self.shape(out).last().unwrap();
                    let od = self.nodes[out.0].data.clone();
                    let mut dx = vec![T::zero(); od.len()];
                    for ((dx_row, s_row), g_row) in
                        dx.chunks_mut(d).zip(od.chunks(d)).zip(g.chunks(d))
                    {
                        let dot: T = g_row.iter().zip(s_row.iter()).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            dx_row[i] = s_row[i] * (g_row[i] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(out).last().unwrap();
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                let inv_d = T::from_f64(1.0 / d as f64);
                let eps_t = T::from_f64(eps);
                let d_t = T::from_f64(d as f64);
                let factor = self.rule_factor("layer-normalization");

                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                for (row, (x_row, g_row)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = x_row.iter().cloned().sum::<T>() * inv_d;
                    let var = x_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let inv_std = T::one() / (var + eps_t).sqrt();
                    for i in 0..d {
                        xhat[i] = (x_row[i] - mean) * inv_std;
                    }
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i in 0..d {
                        let dxhat = g_row[i] * gd[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[i];
                        dgamma[i] += g_row[i] * xhat[i];
                        dbeta[i] += g_row[i];
                    }
                    let base = row * d;
                    for i in 0..d {
                        let dxhat = g_row[i] * gd[i];
                        dx[base + i] = factor
                            * inv_std
                            * inv_d
                            * (d_t * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }

            Op::Conv2d { x, w, bias, stride, padding } => {
                let sx = self.shape(x).to_vec();
                let so = self.shape(out).to_vec();
                let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let sw = self.shape(w).to_vec();
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (so[2], so[3]);
                let patch = oh * ow;
                let k = cin * kh * kw;

                if let Some(bid) = bias {
                    if self.wants(bid) {
                        let mut db = vec![T::zero(); cout];
                        for bi in 0..b {
                            for o in 0..cout {
                                let base = (bi * cout + o) * patch;
                                db[o] += g[base..base + patch].iter().cloned().sum::<T>();
                            }
                        }
                        self.accumulate(bid, &db);
                    }
                }

                let want_x = self.wants(x);
                let want_w = self.wants(w);
                if !want_x && !want_w {
                    return;
                }
                let xd = self.nodes[x.0].data.clone();
                let wd_data = self.nodes[w.0].data.clone();
                let mut col = vec![T::zero(); patch * k];
                let mut dw = if want_w { vec![T::zero(); cout * k] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); b * cin * h * wd] } else { Vec::new() };
                let mut dcol = vec![T::zero(); patch * k];
                for bi in 0..b {
                    let gy = &g[bi * cout * patch..(bi + 1) * cout * patch];
                    if want_w {
                        im2col(&xd[bi * cin * h * wd..], cin, h, wd, kh, kw, stride, padding, &mut col);
                        // dW += dY_b [cout,patch] · col [patch,k]
                        T::gemm(cout, patch, k, T::one(), gy, &col, T::one(), &mut dw);
                    }
                    if want_x {
                        // dcol = dY_b^T [patch,cout] · W [cout,k]
                        T::gemm_strided(
                            patch, cout, k,
                            T::one(),
                            gy, 1, patch as isize,
                            &wd_data, k as isize, 1,
                            T::zero(),
                            &mut dcol,
                        );
                        col2im_add(
                            &dcol,
                            cin, h, wd, kh, kw, stride, padding,
                            &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        );
                    }
                }
                if want_w {
                    self.accumulate(w, &dw);
                }
                if want_x {
                    self.accumulate(x, &dx);
                }
            }

            Op::Upsample2x { x } => {
                if self.wants(x) {
                    let s = self.shape(x).to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); b * c * h * w];
                    for plane in 0..b * c {
                        let sbase = plane * 4 * h * w;
                        let dbase = plane * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let g0 = sbase + (2 * y) * 2 * w + 2 * xx;
                                let g1 = sbase + (2 * y + 1) * 2 * w + 2 * xx;
                                dx[dbase + y * w + xx] = g[g0] + g[g0 + 1] + g[g1] + g[g1 + 1];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }

            Op::SumAll { x } => {
                if self.wants(x) {
                    let gi = g[0];
                    let buf = self.grad_buf(x);
                    for dst in buf.iter_mut() {
                        *dst += gi;
                    }
                }
            }

            Op::MeanAll { x } => {
                if self.wants(x) {
                    let gi = g[0] * T::from_f64(1.0 / self.numel(x) as f64);
                    let buf = self.grad_buf(x);
                    for dst in buf.iter_mut() {
                        *dst += gi;
                    }
                }
            }
        }
    }

    /// 1.0 normally; a wrong constant when this op's backward rule is
    /// deliberately corrupted (negative control for gradcheck).
    fn rule_factor(&self, op: &str) -> T {
        if self.corrupted(op) {
            T::from_f64(1.5)
        } else {
            T::one()
        }
    }
}

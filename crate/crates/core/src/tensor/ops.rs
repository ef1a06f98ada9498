//! Forward definitions of every differentiable operation.
//!
//! Shapes are explicit: binary elementwise ops need identical shapes, and the
//! few broadcasting patterns the models need (`add_bias`, `scale_rows`,
//! `repeat`) are separate ops.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Op, Var};
use crate::tensor::tensor::numel;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Moves data laid out as `shape` into `shape` permuted by `axes`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // innermost output axis is walked as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        let mut o = offset;
        for _ in 0..run {
            out.push(data[o]);
            o += run_stride;
        }
        // odometer over the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    /// `s - x`, elementwise.
    pub fn rsub_scalar(&mut self, s: T, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, s)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// Forward identity; no gradient flows back through the result.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::StopGrad)
    }

    /// Hard threshold `1[x > 0]` whose backward rule is the identity
    /// (straight-through). Forward equals the hard mask exactly.
    pub fn ste_threshold(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Ste(x), |v| if v > T::zero() { T::one() } else { T::zero() })
    }

    /// `x[.., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::AddBias { x, b })
    }

    /// Scales row `r` of `x` viewed as `[R, C]` by `s[r]`, where `C` is the
    /// last dim of `x` and `s` holds `R` values.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        let rows = self.value(x).len() / c.max(1);
        if self.value(s).len() != rows {
            return Err(shape_err(
                "scale_rows",
                format!("{} scales for {rows} rows", self.value(s).len()),
            ));
        }
        let scale = self.value(s);
        let value = self
            .value(x)
            .chunks(c)
            .zip(scale)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::ScaleRows { x, s })
    }

    /// Explicit broadcast: repeats a size-1 axis `times` times.
    pub fn repeat(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || times == 0 {
            return Err(shape_err("repeat", format!("axis {axis} of {shape:?} x{times}")));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..times {
                value.extend_from_slice(block);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = times;
        self.push(out_shape, value, Op::Repeat { x, outer, times, inner })
    }

    /// Batched matrix product over the last two axes. `ta`/`tb` transpose the
    /// stored operand; leading axes must agree (or `b` may be 2-D and shared
    /// only when `a` is 2-D too).
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (inner {ka} != {kb})")));
        }
        let k = ka;
        let batch: usize = sa[..r - 2].iter().product();
        let mut value = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                &mut value[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.matmul_macs += (batch * m * k * n) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(shape, value, Op::MatMul { a, b, batch, m, k, n, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let value = permute_data(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.push(out_shape, value, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|v| self.shape(*v).to_vec())
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut inners = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
            inners.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = first[..axis].iter().product();
        let mut value = Vec::with_capacity(outer * inners.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&inners) {
                value.extend_from_slice(&self.value(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(shape, value, Op::Concat { inputs: inputs.to_vec(), outer, inners })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err("slice", format!("[{start}..{}] of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, value, Op::Slice { x, outer, full, start, len, inner })
    }

    /// Selects entries of the first axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index.iter().any(|&i| i >= shape[0]) || index.is_empty() {
            return Err(shape_err("gather_rows", format!("index out of range for {shape:?}")));
        }
        let w: usize = shape[1..].iter().product();
        let src = self.value(x);
        let mut value = Vec::with_capacity(index.len() * w);
        for &i in index {
            value.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        self.push(out_shape, value, Op::GatherRows { x, index: index.to_vec() })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += v.f64();
            }
            let inv = 1.0 / total;
            for v in row.iter_mut() {
                *v = T::of(v.f64() * inv);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Softmax(x))
    }

    /// Layer normalization over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", format!("affine params for width {c}")));
        }
        let (xs, gs, bs) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xs.len() / c;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = T::of((v.f64() - mean) * r);
                xhat.push(h);
                value.push(h * gs[j] + bs[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![T::of(total)], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let total: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![T::of(total / n as f64)], Op::Mean(x))
    }

    /// Non-overlapping `k × k` average pooling of a `[C, H, W]` tensor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || k == 0 || !shape[1].is_multiple_of(k) || !shape[2].is_multiple_of(k) {
            return Err(shape_err("avg_pool2d", format!("window {k} for {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x);
        let inv = 1.0 / (k * k) as f64;
        let mut value = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for di in 0..k {
                        let base = ch * h * w + (i * k + di) * w + j * k;
                        acc += src[base..base + k].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    value.push(T::of(acc * inv));
                }
            }
        }
        self.push(vec![c, oh, ow], value, Op::AvgPool2d { x, k })
    }

    /// Separable 2-D correlation of a `[C, H, W]` tensor with the outer
    /// product `kernel ⊗ kernel`, "valid" extent (no padding).
    pub fn filter2d(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let kl = kernel.len();
        if shape.len() != 3 || kl == 0 || shape[1] < kl || shape[2] < kl {
            return Err(shape_err("filter2d", format!("kernel {kl} for {shape:?}")));
        }
        let value = filter2d_forward(self.value(x), shape[0], shape[1], shape[2], kernel);
        let out_shape = vec![shape[0], shape[1] - kl + 1, shape[2] - kl + 1];
        self.push(out_shape, value, Op::Filter2d { x, kernel: kernel.to_vec() })
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(shape_err("bce_with_logits", "target count"));
        }
        let value = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = self.shape(logits).to_vec();
        self.push(shape, value, Op::BceWithLogits { logits, targets: targets.to_vec() })
    }
}

pub(crate) fn filter2d_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: &[T]) -> Vec<T> {
    let kl = k.len();
    let (oh, ow) = (h - kl + 1, w - kl + 1);
    let kf: Vec<f64> = k.iter().map(|v| v.f64()).collect();
    let mut tmp = vec![0.0f64; h * ow];
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            let row = &plane[r * w..(r + 1) * w];
            for j in 0..ow {
                tmp[r * ow + j] = kf.iter().zip(&row[j..j + kl]).map(|(a, b)| a * b.f64()).sum();
            }
        }
        for i in 0..oh {
            for j in 0..ow {
                let acc: f64 = (0..kl).map(|t| kf[t] * tmp[(i + t) * ow + j]).sum();
                out.push(T::of(acc));
            }
        }
    }
    out
}

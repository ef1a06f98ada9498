//! Backward rules, one arm per recorded op.

use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Op};
use crate::tensor::ops::{inverse_axes, permute_data, sigmoid};

impl<T: Scalar> Graph<T> {
    pub(crate) fn propagate(&self, i: usize, g: &[T], local: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(local, *a, g.to_vec());
                self.accumulate(local, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(local, *a, g.to_vec());
                self.accumulate(local, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(local, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(local, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(local, *a, g.iter().zip(bv).map(|(&d, &y)| d / y).collect());
                }
                if self.requires_grad(*b) {
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect();
                    self.accumulate(local, *b, db);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::Ste(x) => {
                self.accumulate(local, *x, g.to_vec());
            }
            Op::MulScalar(x, s) => {
                self.accumulate(local, *x, g.iter().map(|&d| d * *s).collect());
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let dx = g.iter().zip(self.value(*x)).map(|(&d, &v)| d * two * v).collect();
                self.accumulate(local, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                self.accumulate(local, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&d, &v)| {
                        let s = sigmoid(v);
                        d * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(local, *x, dx);
            }
            Op::AddBias { x, b } => {
                let c = self.shape(*b)[0];
                self.accumulate(local, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let mut db = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v.f64());
                    }
                    self.accumulate(local, *b, db.into_iter().map(T::of).collect());
                }
            }
            Op::ScaleRows { x, s } => {
                let c = *self.shape(*x).last().expect("rank >= 1");
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.requires_grad(*x) {
                    let dx = g
                        .chunks(c)
                        .zip(sv)
                        .flat_map(|(row, &k)| row.iter().map(move |&d| d * k))
                        .collect();
                    self.accumulate(local, *x, dx);
                }
                if self.requires_grad(*s) {
                    let ds = g
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(gr, xr)| T::of(gr.iter().zip(xr).map(|(a, b)| a.f64() * b.f64()).sum()))
                        .collect();
                    self.accumulate(local, *s, ds);
                }
            }
            Op::Repeat { x, outer, times, inner } => {
                let mut dx = vec![T::zero(); outer * inner];
                for o in 0..*outer {
                    let acc = &mut dx[o * inner..(o + 1) * inner];
                    for t in 0..*times {
                        let base = (o * times + t) * inner;
                        acc.iter_mut().zip(&g[base..base + inner]).for_each(|(a, &v)| *a += v);
                    }
                }
                self.accumulate(local, *x, dx);
            }
            Op::MatMul { a, b, batch, m, k, n, ta, tb } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        let dst = &mut da[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // dA (k×m) = op(B) · dCᵀ
                            T::gemm(k, n, m, bs, *tb, gs, true, dst, false);
                        } else {
                            // dA (m×k) = dC · op(B)ᵀ
                            T::gemm(m, n, k, gs, false, bs, !*tb, dst, false);
                        }
                    }
                    self.accumulate(local, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..*batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let as_ = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // dB (n×k) = dCᵀ · op(A)
                            T::gemm(n, m, k, gs, true, as_, *ta, dst, false);
                        } else {
                            // dB (k×n) = op(A)ᵀ · dC
                            T::gemm(k, m, n, as_, !*ta, gs, false, dst, false);
                        }
                    }
                    self.accumulate(local, *b, db);
                }
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                    let dot = T::of(dot);
                    dx.extend(gr.iter().zip(yr).map(|(&d, &y)| y * (d - dot)));
                }
                self.accumulate(local, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = *node.shape.last().expect("rank >= 1");
                let gs = self.value(*gain);
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &r) in g.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gs).map(|(a, b)| a.f64() * b.f64()).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, h)| a * h.f64()).sum::<f64>() / c as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| T::of(r * (d - mean_dh - h.f64() * mean_dhh))),
                        );
                    }
                    self.accumulate(local, *x, dx);
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j].f64() * hr[j].f64();
                            db[j] += gr[j].f64();
                        }
                    }
                    self.accumulate(local, *gain, dg.into_iter().map(T::of).collect());
                    self.accumulate(local, *bias, db.into_iter().map(T::of).collect());
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(local, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = T::of(g[0].f64() / n as f64);
                self.accumulate(local, *x, vec![d; n]);
            }
            Op::Permute { x, axes } => {
                let dx = permute_data(g, &node.shape, &inverse_axes(axes));
                self.accumulate(local, *x, dx);
            }
            Op::Concat { inputs, outer, inners } => {
                let row: usize = inners.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(inners) {
                    if self.requires_grad(v) {
                        let mut dv = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            let base = o * row + offset;
                            dv.extend_from_slice(&g[base..base + w]);
                        }
                        self.accumulate(local, v, dv);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, outer, full, start, len, inner } => {
                let mut dx = vec![T::zero(); outer * full * inner];
                for o in 0..*outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(local, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let xs = self.value(*x).len();
                let w = g.len() / index.len();
                let mut dx = vec![T::zero(); xs];
                for (j, &i) in index.iter().enumerate() {
                    dx[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g[j * w..(j + 1) * w])
                        .for_each(|(a, &v)| *a += v);
                }
                self.accumulate(local, *x, dx);
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::of(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            dx[ch * h * w + r * w + col] = g[ch * oh * ow + (r / k) * ow + col / k] * inv;
                        }
                    }
                }
                self.accumulate(local, *x, dx);
            }
            Op::Filter2d { x, kernel } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let kl = kernel.len();
                let (oh, ow) = (h - kl + 1, w - kl + 1);
                let kf: Vec<f64> = kernel.iter().map(|v| v.f64()).collect();
                let mut dx = vec![T::zero(); c * h * w];
                let mut dtmp = vec![0.0f64; h * ow];
                for ch in 0..c {
                    dtmp.iter_mut().for_each(|v| *v = 0.0);
                    let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    for i in 0..oh {
                        for t in 0..kl {
                            let row = &mut dtmp[(i + t) * ow..(i + t + 1) * ow];
                            for j in 0..ow {
                                row[j] += kf[t] * gp[i * ow + j].f64();
                            }
                        }
                    }
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for r in 0..h {
                        let mut acc = vec![0.0f64; w];
                        for j in 0..ow {
                            let d = dtmp[r * ow + j];
                            for t in 0..kl {
                                acc[j + t] += kf[t] * d;
                            }
                        }
                        plane[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(acc)
                            .for_each(|(p, a)| *p = T::of(a));
                    }
                }
                self.accumulate(local, *x, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let dx = g
                    .iter()
                    .zip(self.value(*logits).iter().zip(targets))
                    .map(|(&d, (&x, &y))| d * (sigmoid(x) - y))
                    .collect();
                self.accumulate(local, *logits, dx);
            }
        }
    }
}

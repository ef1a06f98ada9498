//! Transformer building blocks shared by the pruner and the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Anything that owns named learnable tensors.
pub trait Module<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Copies gradients recorded in `g` into the owned tensors.
    fn collect_grads(&mut self, g: &Graph<T>) -> Result<()> {
        for (_, t) in self.named_params_mut() {
            g.write_grad(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.intermediate == 0 {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Learnable scalars in one layer (closed form).
    pub fn param_count(&self) -> usize {
        let (d, i) = (self.hidden, self.intermediate);
        // two norms, q/k/v with bias, o without, gate/up/down
        4 * d + 3 * (d * d + d) + d * d + 3 * d * i
    }
}

/// Pre-norm decoder layer: full self-attention, then a SiLU-gated MLP.
#[derive(Debug, Clone)]
pub struct DecoderLayer<T> {
    pub cfg: LayerConfig,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    /// `depth` is the number of stacked layers; residual projections are
    /// scaled by `1/sqrt(2·depth)`.
    pub fn new<R: Rng + ?Sized>(cfg: LayerConfig, depth: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, i) = (cfg.hidden, cfg.intermediate);
        let in_std = (1.0 / d as f64).sqrt();
        let res_scale = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        let w = |shape: &[usize], std: f64, rng: &mut R| Tensor::randn(shape, std, rng).requires_grad();
        let z = |n: usize| Tensor::zeros(&[n]).requires_grad();
        Ok(DecoderLayer {
            cfg,
            ln1_gain: Tensor::full(&[d], T::one()).requires_grad(),
            ln1_bias: z(d),
            wq: w(&[d, d], in_std, rng),
            bq: z(d),
            wk: w(&[d, d], in_std, rng),
            bk: z(d),
            wv: w(&[d, d], in_std, rng),
            bv: z(d),
            wo: w(&[d, d], in_std * res_scale, rng),
            ln2_gain: Tensor::full(&[d], T::one()).requires_grad(),
            ln2_bias: z(d),
            w_gate: w(&[d, i], in_std, rng),
            w_up: w(&[d, i], in_std, rng),
            w_down: w(&[i, d], (1.0 / i as f64).sqrt() * res_scale, rng),
        })
    }

    /// `x`: `[B, T, D]` → `[B, T, D]`. Every position attends to every other.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.hidden {
            return Err(Error::DimMismatch(format!(
                "decoder layer expects [B, T, {}], got {shape:?}",
                self.cfg.hidden
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let xf = g.reshape(x, &[b * t, d])?;

        let (g1, b1) = (g.param(&self.ln1_gain), g.param(&self.ln1_bias));
        let h = g.layer_norm(xf, g1, b1, LN_EPS)?;
        let split_heads = |g: &mut Graph<T>, w: &Tensor<T>, bias: &Tensor<T>| -> Result<Var> {
            let (wv, bv) = (g.param(w), g.param(bias));
            let p = g.matmul(h, wv)?;
            let p = g.add_bias(p, bv)?;
            let p = g.reshape(p, &[b, t, heads, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[b * heads, t, dh])
        };
        let q = split_heads(g, &self.wq, &self.bq)?;
        let k = split_heads(g, &self.wk, &self.bk)?;
        let v = split_heads(g, &self.wv, &self.bv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.mul_scalar(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let att = g.softmax(scores)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * t, d])?;
        let wo = g.param(&self.wo);
        let o = g.matmul(ctx, wo)?;
        let x1 = g.add(xf, o)?;

        let (g2, b2) = (g.param(&self.ln2_gain), g.param(&self.ln2_bias));
        let h2 = g.layer_norm(x1, g2, b2, LN_EPS)?;
        let (wg, wu, wd) = (g.param(&self.w_gate), g.param(&self.w_up), g.param(&self.w_down));
        let gate = g.matmul(h2, wg)?;
        let gate = g.silu(gate)?;
        let up = g.matmul(h2, wu)?;
        let m = g.mul(gate, up)?;
        let down = g.matmul(m, wd)?;
        let x2 = g.add(x1, down)?;
        g.reshape(x2, &[b, t, d])
    }
}

impl<T: Scalar> Module<T> for DecoderLayer<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("ln1.gain".into(), &self.ln1_gain),
            ("ln1.bias".into(), &self.ln1_bias),
            ("attn.wq".into(), &self.wq),
            ("attn.bq".into(), &self.bq),
            ("attn.wk".into(), &self.wk),
            ("attn.bk".into(), &self.bk),
            ("attn.wv".into(), &self.wv),
            ("attn.bv".into(), &self.bv),
            ("attn.wo".into(), &self.wo),
            ("ln2.gain".into(), &self.ln2_gain),
            ("ln2.bias".into(), &self.ln2_bias),
            ("mlp.w_gate".into(), &self.w_gate),
            ("mlp.w_up".into(), &self.w_up),
            ("mlp.w_down".into(), &self.w_down),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("ln1.gain".into(), &mut self.ln1_gain),
            ("ln1.bias".into(), &mut self.ln1_bias),
            ("attn.wq".into(), &mut self.wq),
            ("attn.bq".into(), &mut self.bq),
            ("attn.wk".into(), &mut self.wk),
            ("attn.bk".into(), &mut self.bk),
            ("attn.wv".into(), &mut self.wv),
            ("attn.bv".into(), &mut self.bv),
            ("attn.wo".into(), &mut self.wo),
            ("ln2.gain".into(), &mut self.ln2_gain),
            ("ln2.bias".into(), &mut self.ln2_bias),
            ("mlp.w_gate".into(), &mut self.w_gate),
            ("mlp.w_up".into(), &mut self.w_up),
            ("mlp.w_down".into(), &mut self.w_down),
        ]
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a T)>,
) -> impl Iterator<Item = (String, &'a T)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut T)>,
) -> impl Iterator<Item = (String, &'a mut T)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_count_matches_tensors() {
        let cfg = LayerConfig { hidden: 16, heads: 4, intermediate: 24 };
        let layer = DecoderLayer::<f32>::new(cfg, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(layer.param_count(), cfg.param_count());
    }

    #[test]
    fn heads_must_divide_hidden() {
        let cfg = LayerConfig { hidden: 10, heads: 4, intermediate: 8 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_keeps_shape() {
        let cfg = LayerConfig { hidden: 8, heads: 2, intermediate: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DecoderLayer::<f32>::new(cfg, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let input = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let x = g.param(&input);
        let y = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8]);
    }
}

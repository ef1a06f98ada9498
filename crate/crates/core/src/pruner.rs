//! The reconstruction-trained pruner: a learnable query token and the visual
//! tokens pass jointly through one full-attention decoder layer; the query's
//! output is multiplied elementwise into every token output and an affine
//! `D → 1` scorer turns the fused tokens into saliency scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::layers::{prefixed, prefixed_mut, DecoderLayer, LayerConfig, Module};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunerConfig {
    pub layer: LayerConfig,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            layer: LayerConfig {
                hidden: 64,
                heads: 4,
                intermediate: 256,
            },
        }
    }
}

/// Per-component learnable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub query: usize,
    pub layer: usize,
    pub scorer_weight: usize,
    pub scorer_bias: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.query + self.layer + self.scorer_weight + self.scorer_bias
    }
}

impl PrunerConfig {
    /// Closed-form parameter count; agrees with [`Module::param_count`].
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let d = self.layer.hidden;
        ParamBreakdown {
            query: d,
            layer: self.layer.param_count(),
            scorer_weight: d,
            scorer_bias: 1,
        }
    }
}

/// Saliency score per visual token (`N × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScores<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> SaliencyScores<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PrunerParams<T> {
    pub cfg: PrunerConfig,
    /// `[1, D]`
    pub query: Tensor<T>,
    pub layer: DecoderLayer<T>,
    /// `[D, 1]`
    pub scorer_weight: Tensor<T>,
    /// `[1]`
    pub scorer_bias: Tensor<T>,
}

/// Graph handles for the layer outputs.
#[derive(Debug, Clone, Copy)]
pub struct PrunerOutput {
    /// `[B, 1, D]`
    pub q_star: Var,
    /// `[B, N, D]`
    pub v_star: Var,
}

impl<T: Scalar> PrunerParams<T> {
    pub fn new<R: Rng + ?Sized>(cfg: PrunerConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.layer.hidden;
        let query = Tensor::randn(&[1, d], 0.02, rng).requires_grad();
        let layer = DecoderLayer::new(cfg.layer, 1, rng)?;
        let scorer_weight = Tensor::randn(&[d, 1], 0.02, rng).requires_grad();
        let scorer_bias = Tensor::zeros(&[1]).requires_grad();
        Ok(PrunerParams {
            cfg,
            query,
            layer,
            scorer_weight,
            scorer_bias,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cfg.layer.hidden
    }

    /// Runs the layer over `[Q, V + pos]`. `tokens` and `pos` are `[B, N, D]`.
    pub fn forward(&self, g: &mut Graph<T>, tokens: Var, pos: Var) -> Result<PrunerOutput> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden() || g.shape(pos) != shape.as_slice() {
            return Err(Error::DimMismatch(format!(
                "pruner expects tokens and pos [B, N, {}], got {shape:?} and {:?}",
                self.hidden(),
                g.shape(pos)
            )));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let v = g.add(tokens, pos)?;
        let q = g.param(&self.query);
        let q = g.reshape(q, &[1, 1, d])?;
        let q = if b > 1 { g.repeat(q, 0, b)? } else { q };
        let seq = g.concat(&[q, v], 1)?;
        let out = self.layer.forward(g, seq)?;
        let q_star = g.slice(out, 1, 0, 1)?;
        let v_star = g.slice(out, 1, 1, n)?;
        Ok(PrunerOutput { q_star, v_star })
    }

    /// `S = (V* ⊙ Q*) · W + b`, shape `[B, N, 1]`.
    pub fn score(&self, g: &mut Graph<T>, out: PrunerOutput) -> Result<Var> {
        let shape = g.shape(out.v_star).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if g.shape(out.q_star) != [b, 1, d] {
            return Err(Error::DimMismatch(format!(
                "query output {:?} vs tokens {shape:?}",
                g.shape(out.q_star)
            )));
        }
        let q = if n > 1 { g.repeat(out.q_star, 1, n)? } else { out.q_star };
        let fused = g.mul(out.v_star, q)?;
        let fused = g.reshape(fused, &[b * n, d])?;
        let w = g.param(&self.scorer_weight);
        let bias = g.param(&self.scorer_bias);
        let s = g.matmul(fused, w)?;
        let s = g.add_bias(s, bias)?;
        g.reshape(s, &[b, n, 1])
    }

    /// Forward plus scoring in one call.
    pub fn saliency(&self, g: &mut Graph<T>, tokens: Var, pos: Var) -> Result<Var> {
        let out = self.forward(g, tokens, pos)?;
        self.score(g, out)
    }

    /// Scores a single sequence outside of any training graph.
    pub fn score_sequence(&self, seq: &TokenSequence<T>) -> Result<SaliencyScores<T>> {
        if seq.hidden() != self.hidden() {
            return Err(Error::DimMismatch(format!(
                "token width {} vs pruner width {}",
                seq.hidden(),
                self.hidden()
            )));
        }
        let n = seq.len();
        let d = self.hidden();
        let mut g = Graph::new();
        let tokens = g.constant(&[1, n, d], seq.tokens.data().to_vec())?;
        let pos = g.constant(&[1, n, d], seq.pos_embed.data().to_vec())?;
        let s = self.saliency(&mut g, tokens, pos)?;
        Ok(SaliencyScores {
            values: g.value(s).to_vec(),
        })
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            query: self.query.numel(),
            layer: self.layer.param_count(),
            scorer_weight: self.scorer_weight.numel(),
            scorer_bias: self.scorer_bias.numel(),
        }
    }
}

impl<T: Scalar> Module<T> for PrunerParams<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("pruner.query".to_string(), &self.query)];
        out.extend(prefixed("pruner.layer", self.layer.named_params()));
        out.push(("pruner.scorer.weight".into(), &self.scorer_weight));
        out.push(("pruner.scorer.bias".into(), &self.scorer_bias));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("pruner.query".to_string(), &mut self.query)];
        out.extend(prefixed_mut("pruner.layer", self.layer.named_params_mut()));
        out.push(("pruner.scorer.weight".into(), &mut self.scorer_weight));
        out.push(("pruner.scorer.bias".into(), &mut self.scorer_bias));
        out
    }
}

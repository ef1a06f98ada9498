//! Analytic FLOPs for a transformer consuming pruned or unpruned visual
//! tokens, checked against an instrumented forward pass.
//!
//! Convention: one multiply-accumulate counts as 2 FLOPs; only matrix
//! products are counted (softmax, norms, activations, biases and residual
//! adds are excluded). Per layer over `T` tokens:
//!
//! ```text
//! projections  2 · 4 · T · d²      (q, k, v, o)
//! attention    2 · 2 · T² · d      (scores and weighted values)
//! mlp          2 · 3 · T · d · i   (gate, up, down)
//! ```

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{DecoderLayer, LayerConfig};
use crate::pruner::{PrunerConfig, PrunerParams};
use crate::tensor::{Graph, Tensor};

pub const CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs; matrix products only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    /// Output vocabulary; adds one logits projection for the last position.
    pub vocab: Option<usize>,
    pub visual: usize,
    pub text: usize,
}

impl ModelSpec {
    /// A 28-layer consumer at the desk width used throughout this crate.
    pub fn desk_consumer(visual: usize, text: usize) -> Self {
        ModelSpec {
            n_layers: 28,
            hidden: 64,
            intermediate: 256,
            heads: 4,
            vocab: None,
            visual,
            text,
        }
    }

    /// A 28-layer consumer at the 3B scale.
    pub fn consumer_3b(visual: usize, text: usize) -> Self {
        ModelSpec {
            n_layers: 28,
            hidden: 2048,
            intermediate: 11008,
            heads: 16,
            vocab: None,
            visual,
            text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return Err(Error::Config(format!("model spec has a zero dimension: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if self.vocab == Some(0) {
            return Err(Error::Config("vocab must be positive when given".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.visual + self.text
    }

    pub fn with_visual(self, visual: usize) -> Self {
        ModelSpec { visual, ..self }
    }
}

/// Matrix-product FLOPs of one layer over `t` tokens.
pub fn layer_flops(t: u64, d: u64, i: u64) -> u64 {
    2 * 4 * t * d * d + 2 * 2 * t * t * d + 2 * 3 * t * d * i
}

pub fn prefill_flops(spec: &ModelSpec) -> u64 {
    let (t, d, i) = (spec.seq_len() as u64, spec.hidden as u64, spec.intermediate as u64);
    let head = spec.vocab.map_or(0, |v| 2 * d * v as u64);
    spec.n_layers as u64 * layer_flops(t, d, i) + head
}

/// One decode step attending over `context` cached positions plus itself.
pub fn decode_step_flops(spec: &ModelSpec, context: usize) -> u64 {
    let (d, i, c) = (spec.hidden as u64, spec.intermediate as u64, context as u64 + 1);
    let per_layer = 2 * 4 * d * d + 2 * 2 * c * d + 2 * 3 * d * i;
    spec.n_layers as u64 * per_layer + spec.vocab.map_or(0, |v| 2 * d * v as u64)
}

/// One pruner layer over `1 + n` tokens plus the `D → 1` scorer.
pub fn pruner_overhead_flops(n: usize, pruner: &LayerConfig) -> u64 {
    let (d, i) = (pruner.hidden as u64, pruner.intermediate as u64);
    layer_flops(n as u64 + 1, d, i) + scorer_flops(n, pruner.hidden)
}

pub fn scorer_flops(n: usize, d: usize) -> u64 {
    2 * n as u64 * d as u64
}

/// Counts matrix-product FLOPs by running real layers on random input.
pub fn instrumented_prefill_flops(spec: &ModelSpec) -> Result<u64> {
    spec.validate()?;
    let cfg = LayerConfig {
        hidden: spec.hidden,
        heads: spec.heads,
        intermediate: spec.intermediate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f32>::new();
    let t = spec.seq_len();
    let input = Tensor::<f32>::randn(&[1, t, spec.hidden], 1.0, &mut rng);
    let mut x = g.param(&input);
    for _ in 0..spec.n_layers {
        let layer = DecoderLayer::<f32>::new(cfg, spec.n_layers, &mut rng)?;
        x = layer.forward(&mut g, x)?;
    }
    if let Some(v) = spec.vocab {
        let last = g.slice(x, 1, t - 1, 1)?;
        let last = g.reshape(last, &[1, spec.hidden])?;
        let head = Tensor::<f32>::zeros(&[spec.hidden, v]);
        let head = g.param(&head);
        g.matmul(last, head)?;
    }
    Ok(2 * g.matmul_macs())
}

/// Counts the pruner's matrix-product FLOPs on `n` random tokens.
pub fn instrumented_pruner_flops(n: usize, pruner: &LayerConfig) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = PrunerParams::<f32>::new(PrunerConfig { layer: *pruner }, &mut rng)?;
    let mut g = Graph::new();
    let tokens = Tensor::<f32>::randn(&[1, n, pruner.hidden], 1.0, &mut rng);
    let tokens = g.param(&tokens);
    let pos = g.constant(&[1, n, pruner.hidden], vec![0.0; n * pruner.hidden])?;
    params.saliency(&mut g, tokens, pos)?;
    Ok(2 * g.matmul_macs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub spec: ModelSpec,
    pub convention: &'static str,
    pub visual_unpruned: usize,
    pub visual_pruned: usize,
    pub flops_unpruned: u64,
    pub flops_pruned: u64,
    pub overhead: u64,
    /// `flops_unpruned / flops_pruned`
    pub ratio: f64,
    /// `flops_unpruned / (flops_pruned + overhead)`
    pub ratio_with_overhead: f64,
}

/// Compares prefill over `n` visual tokens with prefill over `m`, charging
/// the pruner (at its own width) to the pruned side.
pub fn bench(spec: &ModelSpec, n: usize, m: usize, pruner: &LayerConfig) -> Result<BenchReport> {
    spec.validate()?;
    if m > n {
        return Err(Error::Config(format!("retained {m} exceeds total {n}")));
    }
    let unpruned = prefill_flops(&spec.with_visual(n));
    let pruned = prefill_flops(&spec.with_visual(m));
    let overhead = pruner_overhead_flops(n, pruner);
    Ok(BenchReport {
        spec: spec.with_visual(n),
        convention: CONVENTION,
        visual_unpruned: n,
        visual_pruned: m,
        flops_unpruned: unpruned,
        flops_pruned: pruned,
        overhead,
        ratio: unpruned as f64 / pruned as f64,
        ratio_with_overhead: unpruned as f64 / (pruned + overhead) as f64,
    })
}

/// Wall-clock prefill of a small consumer built from real layers. Timings
/// describe this machine and these dims only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallClock {
    pub note: &'static str,
    pub spec: ModelSpec,
    pub reps: usize,
    pub unpruned_ms: f64,
    pub pruned_ms: f64,
    pub pruner_ms: f64,
}

pub fn wall_clock(spec: &ModelSpec, m: usize, pruner: &LayerConfig, reps: usize) -> Result<WallClock> {
    spec.validate()?;
    let reps = reps.max(1);
    let time = |s: &ModelSpec| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..reps {
            instrumented_prefill_flops(s)?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
    };
    let unpruned_ms = time(spec)?;
    let pruned_ms = time(&spec.with_visual(m))?;
    let start = Instant::now();
    for _ in 0..reps {
        instrumented_pruner_flops(spec.visual, pruner)?;
    }
    let pruner_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
    Ok(WallClock {
        note: "desk-scale CPU timings including parameter initialisation; not comparable to accelerator figures",
        spec: *spec,
        reps,
        unpruned_ms,
        pruned_ms,
        pruner_ms,
    })
}

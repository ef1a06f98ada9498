//! Reconstruction decoder: six full-attention decoder layers and an affine
//! head that predicts one RGB patch per token. Used only during training; a
//! single instance serves both the foreground and the background stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{prefixed, prefixed_mut, DecoderLayer, LayerConfig, Module, LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const DECODER_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layer: LayerConfig,
    pub image_size: usize,
    pub patch_size: usize,
}

impl DecoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn param_count(&self) -> usize {
        let d = self.layer.hidden;
        DECODER_DEPTH * self.layer.param_count() + 2 * d + d * self.patch_dim() + self.patch_dim()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer<T>>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    /// `[D, 3·p²]`
    pub head_weight: Tensor<T>,
    /// `[3·p²]`
    pub head_bias: Tensor<T>,
}

/// Rearranges per-token patches `[B, N, 3·p²]` into images `[B, H, W, 3]`.
pub fn unpatchify_graph<T: Scalar>(g: &mut Graph<T>, patches: Var, image_size: usize, patch: usize) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    let grid = image_size / patch;
    if shape.len() != 3 || shape[1] != grid * grid || shape[2] != 3 * patch * patch {
        return Err(Error::DimMismatch(format!(
            "cannot unpatchify {shape:?} into {image_size}x{image_size} with patch {patch}"
        )));
    }
    let b = shape[0];
    let x = g.reshape(patches, &[b, grid, grid, patch, patch, 3])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[b, image_size, image_size, 3])
}

impl<T: Scalar> DecoderParams<T> {
    pub fn new<R: Rng + ?Sized>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.patch_size == 0 || !cfg.image_size.is_multiple_of(cfg.patch_size) {
            return Err(Error::BadImageSize(format!(
                "image size {} vs patch {}",
                cfg.image_size, cfg.patch_size
            )));
        }
        let d = cfg.layer.hidden;
        let layers = (0..DECODER_DEPTH)
            .map(|_| DecoderLayer::new(cfg.layer, DECODER_DEPTH, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderParams {
            cfg,
            layers,
            norm_gain: Tensor::full(&[d], T::one()).requires_grad(),
            norm_bias: Tensor::zeros(&[d]).requires_grad(),
            head_weight: Tensor::randn(&[d, cfg.patch_dim()], 0.02, rng).requires_grad(),
            head_bias: Tensor::zeros(&[cfg.patch_dim()]).requires_grad(),
        })
    }

    /// `masked`, `pos`: `[B, N, D]` → predicted images `[B, H, W, 3]`.
    /// Positions are re-added so padded (zero) slots stay addressable.
    pub fn reconstruct(&self, g: &mut Graph<T>, masked: Var, pos: Var) -> Result<Var> {
        let shape = g.shape(masked).to_vec();
        let (n, d) = (self.cfg.num_tokens(), self.cfg.layer.hidden);
        if shape.len() != 3 || shape[1] != n || shape[2] != d || g.shape(pos) != shape.as_slice() {
            return Err(Error::DimMismatch(format!(
                "decoder expects [B, {n}, {d}] tokens and positions, got {shape:?} and {:?}",
                g.shape(pos)
            )));
        }
        let b = shape[0];
        let mut x = g.add(masked, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        let x = g.reshape(x, &[b * n, d])?;
        let (ng, nb) = (g.param(&self.norm_gain), g.param(&self.norm_bias));
        let x = g.layer_norm(x, ng, nb, LN_EPS)?;
        let (hw, hb) = (g.param(&self.head_weight), g.param(&self.head_bias));
        let p = g.matmul(x, hw)?;
        let p = g.add_bias(p, hb)?;
        let p = g.reshape(p, &[b, n, self.cfg.patch_dim()])?;
        unpatchify_graph(g, p, self.cfg.image_size, self.cfg.patch_size)
    }

    /// Both streams through the same parameters. The streams are stacked on
    /// the batch axis, which is equivalent to two separate passes because no
    /// op mixes batch entries.
    pub fn reconstruct_pair(&self, g: &mut Graph<T>, fore: Var, back: Var, pos: Var) -> Result<(Var, Var)> {
        if g.shape(fore) != g.shape(back) {
            return Err(Error::DimMismatch(format!(
                "stream shapes differ: {:?} vs {:?}",
                g.shape(fore),
                g.shape(back)
            )));
        }
        let b = g.shape(fore)[0];
        let both = g.concat(&[fore, back], 0)?;
        let pos2 = g.concat(&[pos, pos], 0)?;
        let out = self.reconstruct(g, both, pos2)?;
        let pred_fore = g.slice(out, 0, 0, b)?;
        let pred_back = g.slice(out, 0, b, b)?;
        Ok((pred_fore, pred_back))
    }
}

impl<T: Scalar> Module<T> for DecoderParams<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("decoder.layers.{i}"), layer.named_params()));
        }
        out.push(("decoder.norm.gain".into(), &self.norm_gain));
        out.push(("decoder.norm.bias".into(), &self.norm_bias));
        out.push(("decoder.head.weight".into(), &self.head_weight));
        out.push(("decoder.head.bias".into(), &self.head_bias));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("decoder.layers.{i}"), layer.named_params_mut()));
        }
        out.push(("decoder.norm.gain".into(), &mut self.norm_gain));
        out.push(("decoder.norm.bias".into(), &mut self.norm_bias));
        out.push(("decoder.head.weight".into(), &mut self.head_weight));
        out.push(("decoder.head.bias".into(), &mut self.head_bias));
        out
    }
}

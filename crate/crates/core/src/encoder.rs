//! Frozen patch encoder: a seeded, never-trained linear projection of image
//! patches plus 2-D sinusoidal position embeddings.
//!
//! Position embeddings are kept beside the tokens rather than summed into
//! them; the pruner and the decoder add them at their inputs, which keeps the
//! zero-padded slots of a masked sequence addressable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 96,
            patch_size: 8,
            hidden: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::BadImageSize(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "hidden dim {} must be a positive multiple of 4",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Visual tokens with their position embeddings and patch coordinates.
#[derive(Debug, Clone)]
pub struct TokenSequence<T> {
    /// `[N, D]`
    pub tokens: Tensor<T>,
    /// `[N, D]`
    pub pos_embed: Tensor<T>,
    /// `(row, col)` of each token's patch, row-major.
    pub grid_coords: Vec<(usize, usize)>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.grid_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_coords.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Rearranges an `H×W×3` image into `N` row-major patches, each flattened as
/// `(py, px, channel)`.
pub fn patchify<V: Copy>(image: &[V], image_size: usize, patch: usize) -> Vec<V> {
    let g = image_size / patch;
    let mut out = Vec::with_capacity(image.len());
    for gr in 0..g {
        for gc in 0..g {
            for py in 0..patch {
                let row = (gr * patch + py) * image_size;
                let start = (row + gc * patch) * 3;
                out.extend_from_slice(&image[start..start + patch * 3]);
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<V: Copy + Default>(patches: &[V], image_size: usize, patch: usize) -> Vec<V> {
    let g = image_size / patch;
    let mut out = vec![V::default(); patches.len()];
    let mut src = 0;
    for gr in 0..g {
        for gc in 0..g {
            for py in 0..patch {
                let row = (gr * patch + py) * image_size;
                let start = (row + gc * patch) * 3;
                out[start..start + patch * 3].copy_from_slice(&patches[src..src + patch * 3]);
                src += patch * 3;
            }
        }
    }
    out
}

/// MAE-style 2-D sin-cos embedding: the first half of the width encodes the
/// patch row, the second half the column.
pub fn sincos_pos_embed(grid: usize, hidden: usize) -> Vec<f64> {
    let quarter = hidden / 4;
    let mut out = Vec::with_capacity(grid * grid * hidden);
    let freq = |k: usize| 1.0 / 10000f64.powf(k as f64 / quarter as f64);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r, c] {
                let p = pos as f64;
                out.extend((0..quarter).map(|k| (p * freq(k)).sin()));
                out.extend((0..quarter).map(|k| (p * freq(k)).cos()));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    /// `[3·p², D]`, fixed
    pub projection: Tensor<T>,
    /// `[D]`, fixed
    pub bias: Tensor<T>,
    pos_embed: Tensor<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fan_in = cfg.patch_dim();
        let projection = Tensor::randn(&[fan_in, cfg.hidden], (1.0 / fan_in as f64).sqrt(), &mut rng);
        let bias = Tensor::randn(&[cfg.hidden], 0.02, &mut rng);
        let pe = sincos_pos_embed(cfg.grid(), cfg.hidden);
        let pos_embed = Tensor::new(
            &[cfg.num_tokens(), cfg.hidden],
            pe.into_iter().map(T::of).collect(),
        )?;
        Ok(Encoder {
            cfg,
            projection,
            bias,
            pos_embed,
        })
    }

    pub fn pos_embed(&self) -> &Tensor<T> {
        &self.pos_embed
    }

    pub fn grid_coords(&self) -> Vec<(usize, usize)> {
        let g = self.cfg.grid();
        (0..g * g).map(|i| (i / g, i % g)).collect()
    }

    fn check_image(&self, image: &[f32]) -> Result<()> {
        let want = self.cfg.image_size * self.cfg.image_size * 3;
        if image.len() != want {
            return Err(Error::BadImageSize(format!(
                "expected {}x{}x3 = {want} values, got {}",
                self.cfg.image_size,
                self.cfg.image_size,
                image.len()
            )));
        }
        Ok(())
    }

    /// Raw token matrix `[N, D]` (no position embedding).
    pub fn project(&self, image: &[f32]) -> Result<Vec<T>> {
        self.check_image(image)?;
        let (n, k, d) = (self.cfg.num_tokens(), self.cfg.patch_dim(), self.cfg.hidden);
        let patches: Vec<T> = patchify(image, self.cfg.image_size, self.cfg.patch_size)
            .into_iter()
            .map(|v| T::of(v as f64))
            .collect();
        let mut out: Vec<T> = (0..n).flat_map(|_| self.bias.data().iter().copied()).collect();
        T::gemm(n, k, d, &patches, false, self.projection.data(), false, &mut out, true);
        Ok(out)
    }

    /// Encodes an `H×W×3` image (row-major, values in `[0, 1]`).
    pub fn encode(&self, image: &[f32]) -> Result<TokenSequence<T>> {
        let tokens = self.project(image)?;
        Ok(TokenSequence {
            tokens: Tensor::new(&[self.cfg.num_tokens(), self.cfg.hidden], tokens)?,
            pos_embed: self.pos_embed.clone(),
            grid_coords: self.grid_coords(),
        })
    }
}

/// Token `i` is foreground iff the foreground share of its patch is at
/// least `theta_fg`.
pub fn token_foreground_truth(mask: &[u8], cfg: &EncoderConfig, theta_fg: f64) -> Result<Vec<bool>> {
    if !(theta_fg > 0.0 && theta_fg <= 1.0) {
        return Err(Error::Config(format!("theta_fg {theta_fg} outside (0, 1]")));
    }
    let s = cfg.image_size;
    if mask.len() != s * s {
        return Err(Error::BadMaskSize(format!(
            "expected {s}x{s} = {} values, got {}",
            s * s,
            mask.len()
        )));
    }
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let area = (p * p) as f64;
    let mut out = Vec::with_capacity(g * g);
    for gr in 0..g {
        for gc in 0..g {
            let mut count = 0usize;
            for py in 0..p {
                let row = (gr * p + py) * s + gc * p;
                count += mask[row..row + p].iter().filter(|&&m| m != 0).count();
            }
            out.push(count as f64 / area >= theta_fg);
        }
    }
    Ok(out)
}

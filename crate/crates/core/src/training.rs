//! Training loop for the pruner and the reconstruction decoder, the AdamW
//! optimizer, the cosine schedule and the checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "RPCK" | version u32 | entry count u32
//! per entry: name length u16 | name bytes | rank u8 | dims u32 × rank | f32 payload
//! ```
//!
//! Besides the parameters the table holds `meta.config` (the JSON config,
//! one byte per f32), `meta.step`, and the optimizer moments as
//! `opt.m.<name>` / `opt.v.<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ImageMaskPair;
use crate::encoder::{token_foreground_truth, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{LayerConfig, Module};
use crate::losses::{masked_targets, stream_loss, total_loss, LossConfig};
use crate::masking::{binarize, split};
use crate::pruner::{PrunerConfig, PrunerParams};
use crate::recon_decoder::{DecoderConfig, DecoderParams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Foreground and background streams, weighted by `alpha`.
    Full,
    /// Foreground stream only (`alpha = 1`).
    ForeOnly,
    /// Scores trained as per-token foreground logits under binary
    /// cross-entropy; no decoder.
    MaskPrediction,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "fore_only" => Ok(AblationMode::ForeOnly),
            "mask_prediction" => Ok(AblationMode::MaskPrediction),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, fore_only or mask_prediction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: AblationMode,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub pruner: PrunerConfig,
    /// Layer shape of the six decoder layers; width must equal the pruner's.
    pub decoder_layer: LayerConfig,
    /// Patch foreground share that labels a token as foreground in
    /// mask-prediction mode.
    pub theta_fg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            epochs: 10,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 0,
            mode: AblationMode::Full,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            pruner: PrunerConfig::default(),
            decoder_layer: PrunerConfig::default().layer,
            theta_fg: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be a finite non-negative number", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.pruner.layer.validate()?;
        self.decoder_layer.validate()?;
        if self.pruner.layer.hidden != self.encoder.hidden || self.decoder_layer.hidden != self.encoder.hidden {
            return Err(Error::DimMismatch(format!(
                "encoder width {}, pruner width {} and decoder width {} must agree",
                self.encoder.hidden, self.pruner.layer.hidden, self.decoder_layer.hidden
            )));
        }
        if !(self.theta_fg > 0.0 && self.theta_fg <= 1.0) {
            return Err(Error::Config(format!("theta_fg {} outside (0, 1]", self.theta_fg)));
        }
        Ok(())
    }

    /// Loss weights after applying the ablation mode.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            AblationMode::ForeOnly => LossConfig {
                alpha: 1.0,
                ..self.loss
            },
            _ => self.loss,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layer: self.decoder_layer,
            image_size: self.encoder.image_size,
            patch_size: self.encoder.patch_size,
        }
    }

    pub fn steps_per_epoch(&self, count: usize) -> usize {
        count.div_ceil(self.batch_size)
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every tensor that carries a gradient. Tensors
    /// without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: Vec<(String, &mut Tensor<T>)>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, p) in params {
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    detail: format!("state for {name} has {} entries, tensor has {n}", m.len()),
                });
            }
            let grad = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i].f64();
                let mi = ADAM_BETA1 * m[i].f64() + (1.0 - ADAM_BETA1) * g;
                let vi = ADAM_BETA2 * v[i].f64() + (1.0 - ADAM_BETA2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let step = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + self.weight_decay * w.f64();
                *w = T::of(w.f64() - lr * step);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_all: f64,
    pub l_fore: f64,
    pub l_back: f64,
    pub frac_pos: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_all: f64,
    pub l_fore: f64,
    pub l_back: f64,
    pub frac_pos: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_all: f64,
    pub l_fore: f64,
    pub l_back: f64,
    pub frac_pos: f64,
}

/// Encoded batch ready for the graph.
struct Batch<'a, T> {
    tokens: Vec<T>,
    pos: Vec<T>,
    pairs: Vec<&'a ImageMaskPair>,
}

/// Fore and back reconstructions, `[B, H, W, 3]` each.
pub type StreamPair<T> = (Vec<T>, Vec<T>);

/// Pruner, decoder, optimizer state and the frozen encoder.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub encoder: Encoder<T>,
    pub pruner: PrunerParams<T>,
    /// Absent in mask-prediction mode.
    pub decoder: Option<DecoderParams<T>>,
    pub opt: AdamW<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pruner = PrunerParams::new(cfg.pruner, &mut rng)?;
        let decoder = match cfg.mode {
            AblationMode::MaskPrediction => None,
            _ => Some(DecoderParams::new(cfg.decoder_config(), &mut rng)?),
        };
        let opt = AdamW::new(cfg.weight_decay);
        Ok(Trainer {
            cfg,
            encoder,
            pruner,
            decoder,
            opt,
            step: 0,
        })
    }

    fn learnable(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        learnable(&mut self.pruner, &mut self.decoder)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.pruner.named_params();
        if let Some(d) = self.decoder.as_ref() {
            out.extend(d.named_params());
        }
        out
    }

    fn make_batch<'a>(&self, pairs: Vec<&'a ImageMaskPair>, cached: Option<Vec<&[T]>>) -> Result<Batch<'a, T>> {
        let n = self.cfg.encoder.num_tokens();
        let d = self.cfg.encoder.hidden;
        let mut tokens = Vec::with_capacity(pairs.len() * n * d);
        match cached {
            Some(rows) => rows.into_iter().for_each(|r| tokens.extend_from_slice(r)),
            None => {
                for p in &pairs {
                    tokens.extend(self.encoder.project(&p.image)?);
                }
            }
        }
        let pe = self.encoder.pos_embed().data();
        let pos = (0..pairs.len()).flat_map(|_| pe.iter().copied()).collect();
        Ok(Batch { tokens, pos, pairs })
    }

    /// Forward pass and loss on one batch; returns the loss node and metrics.
    fn batch_loss(&self, g: &mut Graph<T>, batch: &Batch<'_, T>) -> Result<(Var, StepMetrics)> {
        let b = batch.pairs.len();
        let (n, d) = (self.cfg.encoder.num_tokens(), self.cfg.encoder.hidden);
        let tokens = g.constant(&[b, n, d], batch.tokens.clone())?;
        let pos = g.constant(&[b, n, d], batch.pos.clone())?;
        let scores = self.pruner.saliency(g, tokens, pos)?;
        let mask = binarize(g, scores)?;
        let frac_pos = mask.fraction_positive();

        let Some(decoder) = self.decoder.as_ref() else {
            let mut targets = Vec::with_capacity(b * n);
            for p in &batch.pairs {
                let truth = token_foreground_truth(&p.mask, &self.cfg.encoder, self.cfg.theta_fg)?;
                targets.extend(truth.into_iter().map(|t| if t { T::one() } else { T::zero() }));
            }
            let per_token = g.bce_with_logits(scores, &targets)?;
            let loss = g.mean(per_token)?;
            let l = g.value(loss)[0].f64();
            return Ok((
                loss,
                StepMetrics {
                    l_all: l,
                    l_fore: 0.0,
                    l_back: 0.0,
                    frac_pos,
                },
            ));
        };

        let (fore, back) = split(g, tokens, &mask)?;
        let (pred_fore, pred_back) = decoder.reconstruct_pair(g, fore, back, pos)?;
        let s = self.cfg.encoder.image_size;
        let mut gt_fore = Vec::with_capacity(b * s * s * 3);
        let mut gt_back = Vec::with_capacity(b * s * s * 3);
        for p in &batch.pairs {
            let (f, bk) = masked_targets(&p.image, &p.mask)?;
            gt_fore.extend(f.into_iter().map(|v| T::of(v as f64)));
            gt_back.extend(bk.into_iter().map(|v| T::of(v as f64)));
        }
        let gt_fore = g.constant(&[b, s, s, 3], gt_fore)?;
        let gt_back = g.constant(&[b, s, s, 3], gt_back)?;
        let loss_cfg = self.cfg.effective_loss();
        let l_fore = stream_loss(g, gt_fore, pred_fore, &loss_cfg)?;
        let l_back = stream_loss(g, gt_back, pred_back, &loss_cfg)?;
        let l_all = total_loss(g, l_fore, l_back, &loss_cfg)?;
        let metrics = StepMetrics {
            l_all: g.value(l_all)[0].f64(),
            l_fore: g.value(l_fore)[0].f64(),
            l_back: g.value(l_back)[0].f64(),
            frac_pos,
        };
        Ok((l_all, metrics))
    }

    fn step_on(&mut self, batch: &Batch<'_, T>, lr: f64) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let (loss, metrics) = self.batch_loss(&mut g, batch)?;
        if ![metrics.l_all, metrics.l_fore, metrics.l_back].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                l_fore: metrics.l_fore,
                l_back: metrics.l_back,
                frac_pos: metrics.frac_pos,
            });
        }
        g.backward(loss)?;
        let mut params = learnable(&mut self.pruner, &mut self.decoder);
        for (_, p) in params.iter_mut() {
            p.zero_grad();
            g.write_grad(p)?;
        }
        self.opt.update(params, lr)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Encode, score, mask, split, reconstruct, loss, backward and one
    /// optimizer update at learning rate `lr`.
    pub fn train_step(&mut self, pairs: &[ImageMaskPair], lr: f64) -> Result<StepMetrics> {
        let batch = self.make_batch(pairs.iter().collect(), None)?;
        self.step_on(&batch, lr)
    }

    /// Loss and metrics on a batch without updating anything.
    pub fn evaluate_loss(&self, pairs: &[ImageMaskPair]) -> Result<StepMetrics> {
        let batch = self.make_batch(pairs.iter().collect(), None)?;
        let mut g = Graph::new();
        Ok(self.batch_loss(&mut g, &batch)?.1)
    }

    /// Saliency scores for a batch of images, `B·N` values.
    pub fn scores(&self, images: &[&[f32]]) -> Result<Vec<T>> {
        let (n, d) = (self.cfg.encoder.num_tokens(), self.cfg.encoder.hidden);
        let b = images.len();
        let mut tokens = Vec::with_capacity(b * n * d);
        for img in images {
            tokens.extend(self.encoder.project(img)?);
        }
        let pe = self.encoder.pos_embed().data();
        let pos: Vec<T> = (0..b).flat_map(|_| pe.iter().copied()).collect();
        let mut g = Graph::new();
        let tokens = g.constant(&[b, n, d], tokens)?;
        let pos = g.constant(&[b, n, d], pos)?;
        let s = self.pruner.saliency(&mut g, tokens, pos)?;
        Ok(g.value(s).to_vec())
    }

    /// Scores plus the fore/back reconstructions (`[B, H, W, 3]` each) of the
    /// hard-masked streams. `None` reconstructions in mask-prediction mode.
    pub fn reconstruct(&self, images: &[&[f32]]) -> Result<(Vec<T>, Option<StreamPair<T>>)> {
        let (n, d) = (self.cfg.encoder.num_tokens(), self.cfg.encoder.hidden);
        let b = images.len();
        let mut tokens = Vec::with_capacity(b * n * d);
        for img in images {
            tokens.extend(self.encoder.project(img)?);
        }
        let pe = self.encoder.pos_embed().data();
        let pos: Vec<T> = (0..b).flat_map(|_| pe.iter().copied()).collect();
        let mut g = Graph::new();
        let tokens = g.constant(&[b, n, d], tokens)?;
        let pos = g.constant(&[b, n, d], pos)?;
        let s = self.pruner.saliency(&mut g, tokens, pos)?;
        let scores = g.value(s).to_vec();
        let Some(decoder) = self.decoder.as_ref() else {
            return Ok((scores, None));
        };
        let mask = binarize(&mut g, s)?;
        let (fore, back) = split(&mut g, tokens, &mask)?;
        let (pf, pb) = decoder.reconstruct_pair(&mut g, fore, back, pos)?;
        Ok((scores, Some((g.value(pf).to_vec(), g.value(pb).to_vec()))))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        let config = serde_json::to_string(&self.cfg)?;
        entries.push(CheckpointEntry {
            name: "meta.config".into(),
            dims: vec![config.len()],
            data: config.bytes().map(f32::from).collect(),
        });
        entries.push(CheckpointEntry {
            name: "meta.step".into(),
            dims: vec![2],
            data: split_u32(self.step as u64),
        });
        entries.push(CheckpointEntry {
            name: "meta.opt_t".into(),
            dims: vec![2],
            data: split_u32(self.opt.t),
        });
        for (name, t) in self.named_params() {
            entries.push(CheckpointEntry {
                name,
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.f64() as f32).collect(),
            });
        }
        for (name, (m, v)) in &self.opt.moments {
            for (kind, buf) in [("m", m), ("v", v)] {
                entries.push(CheckpointEntry {
                    name: format!("opt.{kind}.{name}"),
                    dims: vec![buf.len()],
                    data: buf.iter().map(|x| x.f64() as f32).collect(),
                });
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config()?;
        let mut trainer = Trainer::new(cfg)?;
        trainer.step = join_u32(&ckpt.get("meta.step")?.data) as usize;
        trainer.opt.t = join_u32(&ckpt.get("meta.opt_t")?.data);
        for (name, t) in trainer.learnable() {
            let e = ckpt.get(&name)?;
            if e.dims != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    detail: format!("{name}: stored {:?}, model {:?}", e.dims, t.shape()),
                });
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&e.data) {
                *dst = T::of(src as f64);
            }
        }
        for e in &ckpt.entries {
            if let Some(name) = e.name.strip_prefix("opt.m.") {
                let v = ckpt.get(&format!("opt.v.{name}"))?;
                let conv = |d: &[f32]| d.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
                trainer.opt.moments.insert(name.to_string(), (conv(&e.data), conv(&v.data)));
            }
        }
        Ok(trainer)
    }
}

fn learnable<'a, T: Scalar>(
    pruner: &'a mut PrunerParams<T>,
    decoder: &'a mut Option<DecoderParams<T>>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    let mut out = pruner.named_params_mut();
    if let Some(d) = decoder.as_mut() {
        out.extend(d.named_params_mut());
    }
    out
}

fn split_u32(v: u64) -> Vec<f32> {
    // two 16-bit halves, each exact in f32
    vec![(v >> 16) as u16 as f32, (v & 0xffff) as f32]
}

fn join_u32(d: &[f32]) -> u64 {
    ((d[0] as u64) << 16) | d[1] as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&CheckpointEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let e = self.get("meta.config")?;
        let bytes: Vec<u8> = e.data.iter().map(|&b| b as u8).collect();
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
                return Err(Error::Config(format!("entry {} cannot be encoded", e.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Config("checkpoint entry name is not UTF-8".into()))?;
            let rank = cur.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = cur
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(CheckpointEntry { name, dims, data });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub trainer: Trainer<T>,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl<T> TrainOutcome<T> {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs `epochs · ⌈count / batch⌉` steps over a seeded shuffle of `dataset`.
pub fn train<T: Scalar>(cfg: TrainConfig, dataset: &[ImageMaskPair]) -> Result<TrainOutcome<T>> {
    train_with(cfg, dataset, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    cfg: TrainConfig,
    dataset: &[ImageMaskPair],
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome<T>> {
    train_from(Trainer::new(cfg)?, dataset, on_epoch)
}

/// Runs the configured schedule starting from an existing trainer.
pub fn train_from<T: Scalar>(
    mut trainer: Trainer<T>,
    dataset: &[ImageMaskPair],
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let cfg = trainer.cfg.clone();
    let cache = dataset
        .iter()
        .map(|p| trainer.encoder.project(&p.image))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = cfg.steps_per_epoch(dataset.len());
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0fba_7c4e_5a11);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(trainer.step, total, cfg.lr);
            let pairs = chunk.iter().map(|&i| &dataset[i]).collect();
            let cached = chunk.iter().map(|&i| cache[i].as_slice()).collect();
            let batch = trainer.make_batch(pairs, Some(cached))?;
            let m = trainer.step_on(&batch, lr)?;
            for (acc, v) in sum.iter_mut().zip([m.l_all, m.l_fore, m.l_back, m.frac_pos]) {
                *acc += v;
            }
            log.push(LogRecord {
                epoch,
                step: trainer.step - 1,
                l_all: m.l_all,
                l_fore: m.l_fore,
                l_back: m.l_back,
                frac_pos: m.frac_pos,
                lr,
            });
        }
        let k = per_epoch as f64;
        let summary = EpochSummary {
            epoch,
            l_all: sum[0] / k,
            l_fore: sum[1] / k,
            l_back: sum[2] / k,
            frac_pos: sum[3] / k,
        };
        on_epoch(&summary);
        epochs.push(summary);
    }
    Ok(TrainOutcome { trainer, log, epochs })
}

//! Foreground-retention, separability and reconstruction metrics.
//!
//! Per-sample quantities (recall, precision, AUROC, PSNR, SSIM) are averaged
//! over samples; AUROC skips samples that lack one of the two classes and the
//! number of scored samples is reported.

use serde::Serialize;

use crate::datagen::ImageMaskPair;
use crate::encoder::token_foreground_truth;
use crate::error::{Error, Result};
use crate::losses::{ssim, LossConfig};
use crate::masking::fraction_positive;
use crate::masking::hard_mask;
use crate::prune_infer::{retained_count, top_k_indices};
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::training::{Checkpoint, Trainer};

pub const DEFAULT_RATIOS: [f64; 3] = [0.25, 0.5, 0.75];
pub const THETA_SWEEP: [f64; 3] = [0.05, 0.25, 0.5];
pub const HEADLINE_THETA: f64 = 0.25;
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn retention_metrics(kept: &[usize], gt_foreground: &[bool]) -> RetentionMetrics {
    let fg = gt_foreground.iter().filter(|&&b| b).count();
    let hit = kept.iter().filter(|&&i| gt_foreground[i]).count();
    let recall = if fg == 0 { 1.0 } else { hit as f64 / fg as f64 };
    let precision = if kept.is_empty() { 1.0 } else { hit as f64 / kept.len() as f64 };
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    RetentionMetrics { recall, precision, f1 }
}

/// Probability that a random foreground token outscores a random background
/// token, ties counting one half, by exact pairwise counting.
pub fn saliency_auroc<T: Scalar>(scores: &[T], gt_foreground: &[bool]) -> Result<f64> {
    if scores.len() != gt_foreground.len() {
        return Err(Error::DimMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            gt_foreground.len()
        )));
    }
    let (fg, bg): (Vec<_>, Vec<_>) = scores.iter().zip(gt_foreground).partition(|(_, &y)| y);
    if fg.is_empty() || bg.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut wins = 0.0f64;
    for (f, _) in &fg {
        for (b, _) in &bg {
            if f > b {
                wins += 1.0;
            } else if f == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (fg.len() * bg.len()) as f64)
}

pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    10.0 * (1.0 / mse).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub p: f64,
    pub m: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaReport {
    pub theta_fg: f64,
    pub auroc: f64,
    pub auroc_samples: usize,
    pub ratios: Vec<RatioReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyStats {
    pub mean_fore: f64,
    pub mean_back: f64,
    pub auroc: f64,
    pub fraction_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconStats {
    pub psnr_fore: f64,
    pub psnr_back: f64,
    pub ssim_fore: f64,
    pub ssim_back: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub theta_fg: f64,
    pub ratios: Vec<RatioReport>,
    pub saliency: SaliencyStats,
    /// Absent for checkpoints without a decoder.
    pub reconstruction: Option<ReconStats>,
    pub theta_sweep: Vec<ThetaReport>,
}

impl EvalReport {
    pub fn ratio(&self, p: f64) -> Option<&RatioReport> {
        self.ratios.iter().find(|r| (r.p - p).abs() < 1e-12)
    }
}

/// One CSV row per sample at the headline threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub index: usize,
    pub auroc: Option<f64>,
    pub fraction_positive: f64,
    pub recall: Vec<f64>,
    pub recon: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub rows: Vec<SampleRow>,
}

impl EvalOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,auroc,fraction_positive");
        for r in &self.report.ratios {
            out.push_str(&format!(",recall_p{}", r.p));
        }
        out.push_str(",psnr_fore,psnr_back,ssim_fore,ssim_back\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.index, fmt(row.auroc), row.fraction_positive));
            for r in &row.recall {
                out.push_str(&format!(",{r}"));
            }
            match row.recon {
                Some(v) => v.iter().for_each(|x| out.push_str(&format!(",{x}"))),
                None => out.push_str(",,,,"),
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn get(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

fn ssim_value(a: &[f64], b: &[f64], size: usize, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&[size, size, 3], a.to_vec())?;
    let b = g.constant(&[size, size, 3], b.to_vec())?;
    let s = ssim(&mut g, a, b, cfg)?;
    Ok(g.value(s)[0])
}

pub fn evaluate_model<T: Scalar>(trainer: &Trainer<T>, dataset: &[ImageMaskPair], ratios: &[f64]) -> Result<EvalOutput> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let enc = &trainer.cfg.encoder;
    let n = enc.num_tokens();
    let size = enc.image_size;
    let counts = ratios.iter().map(|&p| retained_count(n, p)).collect::<Result<Vec<_>>>()?;
    let loss_cfg = trainer.cfg.loss;

    let mut sweep: Vec<(Mean, Vec<[Mean; 3]>)> = THETA_SWEEP
        .iter()
        .map(|_| (Mean::default(), ratios.iter().map(|_| Default::default()).collect()))
        .collect();
    let headline = THETA_SWEEP.iter().position(|&t| t == HEADLINE_THETA).expect("headline in sweep");
    let (mut s_fore, mut s_back, mut frac) = (Mean::default(), Mean::default(), Mean::default());
    let mut recon: [Mean; 4] = Default::default();
    let mut rows = Vec::with_capacity(dataset.len());

    for (chunk_idx, chunk) in dataset.chunks(EVAL_BATCH).enumerate() {
        let images: Vec<&[f32]> = chunk.iter().map(|p| p.image.as_slice()).collect();
        let (scores, preds) = trainer.reconstruct(&images)?;
        for (j, pair) in chunk.iter().enumerate() {
            let index = chunk_idx * EVAL_BATCH + j;
            let s = &scores[j * n..(j + 1) * n];
            let fp = fraction_positive(&hard_mask(s));
            frac.add(fp);
            let kept: Vec<Vec<usize>> = counts.iter().map(|&m| top_k_indices(s, m)).collect();
            let mut row = SampleRow {
                index,
                auroc: None,
                fraction_positive: fp,
                recall: Vec::new(),
                recon: None,
            };
            for (ti, &theta) in THETA_SWEEP.iter().enumerate() {
                let gt = token_foreground_truth(&pair.mask, enc, theta)?;
                let auroc = match saliency_auroc(s, &gt) {
                    Ok(a) => Some(a),
                    Err(Error::SingleClass) => None,
                    Err(e) => return Err(e),
                };
                if let Some(a) = auroc {
                    sweep[ti].0.add(a);
                }
                for (ri, k) in kept.iter().enumerate() {
                    let r = retention_metrics(k, &gt);
                    sweep[ti].1[ri][0].add(r.recall);
                    sweep[ti].1[ri][1].add(r.precision);
                    sweep[ti].1[ri][2].add(r.f1);
                    if ti == headline {
                        row.recall.push(r.recall);
                    }
                }
                if ti == headline {
                    row.auroc = auroc;
                    for (v, &y) in s.iter().zip(&gt) {
                        if y {
                            s_fore.add(v.f64());
                        } else {
                            s_back.add(v.f64());
                        }
                    }
                }
            }
            if let Some((pf, pb)) = &preds {
                let len = size * size * 3;
                let pf: Vec<f64> = pf[j * len..(j + 1) * len].iter().map(|v| v.f64()).collect();
                let pb: Vec<f64> = pb[j * len..(j + 1) * len].iter().map(|v| v.f64()).collect();
                let gt_f: Vec<f64> = pair
                    .image
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if pair.mask[i / 3] != 0 { v as f64 } else { 0.0 })
                    .collect();
                let gt_b: Vec<f64> = pair
                    .image
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if pair.mask[i / 3] == 0 { v as f64 } else { 0.0 })
                    .collect();
                let vals = [
                    psnr(&pf, &gt_f),
                    psnr(&pb, &gt_b),
                    ssim_value(&pf, &gt_f, size, &loss_cfg)?,
                    ssim_value(&pb, &gt_b, size, &loss_cfg)?,
                ];
                for (m, v) in recon.iter_mut().zip(vals) {
                    m.add(v);
                }
                row.recon = Some(vals);
            }
            rows.push(row);
        }
    }

    let theta_sweep: Vec<ThetaReport> = THETA_SWEEP
        .iter()
        .zip(&sweep)
        .map(|(&theta, (auroc, per_ratio))| ThetaReport {
            theta_fg: theta,
            auroc: auroc.get(),
            auroc_samples: auroc.count,
            ratios: ratios
                .iter()
                .zip(&counts)
                .zip(per_ratio)
                .map(|((&p, &m), acc)| RatioReport {
                    p,
                    m,
                    recall: acc[0].get(),
                    precision: acc[1].get(),
                    f1: acc[2].get(),
                })
                .collect(),
        })
        .collect();
    let head = &theta_sweep[headline];
    let report = EvalReport {
        samples: dataset.len(),
        theta_fg: HEADLINE_THETA,
        ratios: head.ratios.clone(),
        saliency: SaliencyStats {
            mean_fore: s_fore.get(),
            mean_back: s_back.get(),
            auroc: head.auroc,
            fraction_positive: frac.get(),
        },
        reconstruction: preds_present(&rows).then(|| ReconStats {
            psnr_fore: recon[0].get(),
            psnr_back: recon[1].get(),
            ssim_fore: recon[2].get(),
            ssim_back: recon[3].get(),
        }),
        theta_sweep,
    };
    Ok(EvalOutput { report, rows })
}

fn preds_present(rows: &[SampleRow]) -> bool {
    rows.first().is_some_and(|r| r.recon.is_some())
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &[ImageMaskPair], ratios: &[f64]) -> Result<EvalOutput> {
    let trainer = Trainer::<f32>::from_checkpoint(checkpoint)?;
    evaluate_model(&trainer, dataset, ratios)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_hand_counts() {
        let fg = [true, true, false, false];
        let r = retention_metrics(&[1, 2], &fg);
        assert_eq!((r.recall, r.precision), (0.5, 0.5));
        let r = retention_metrics(&[0, 1], &fg);
        assert_eq!((r.recall, r.precision, r.f1), (1.0, 1.0, 1.0));
        let r = retention_metrics(&[2, 3], &fg);
        assert_eq!((r.recall, r.precision, r.f1), (0.0, 0.0, 0.0));
        let r = retention_metrics(&[], &[false, false]);
        assert_eq!((r.recall, r.precision), (1.0, 1.0));
    }

    #[test]
    fn auroc_extremes() {
        let y = [true, false, true, false];
        assert_eq!(saliency_auroc(&[2.0f32, 0.0, 3.0, 1.0], &y).unwrap(), 1.0);
        assert_eq!(saliency_auroc(&[0.3f32; 4], &y).unwrap(), 0.5);
        assert!(matches!(saliency_auroc(&[1.0f32, 2.0], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn auroc_matches_rank_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s: Vec<f64> = (0..20).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let mut y: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.4)).collect();
            y[0] = true;
            y[1] = false;
            // Mann-Whitney U with mid-ranks for ties
            let mut idx: Vec<usize> = (0..20).collect();
            idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap());
            let mut rank = [0.0; 20];
            let mut i = 0;
            while i < 20 {
                let mut j = i;
                while j + 1 < 20 && s[idx[j + 1]] == s[idx[i]] {
                    j += 1;
                }
                let mid = (i + j) as f64 / 2.0 + 1.0;
                for k in i..=j {
                    rank[idx[k]] = mid;
                }
                i = j + 1;
            }
            let n1 = y.iter().filter(|&&v| v).count() as f64;
            let n0 = 20.0 - n1;
            let r1: f64 = (0..20).filter(|&k| y[k]).map(|k| rank[k]).sum();
            let u = r1 - n1 * (n1 + 1.0) / 2.0;
            assert!((saliency_auroc(&s, &y).unwrap() - u / (n1 * n0)).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_of_known_error() {
        assert!((psnr(&[0.1, 0.1], &[0.0, 0.0]) - 20.0).abs() < 1e-9);
    }
}

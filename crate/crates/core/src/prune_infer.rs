//! Inference-time Top-K selection that keeps token order and positions.

use serde::Serialize;

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::pruner::SaliencyScores;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How many tokens to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Retain {
    /// Pruning ratio `p`; keeps `⌊N · (1 − p)⌋`.
    Ratio(f64),
    /// Raw count, clamped to `N`.
    Count(usize),
}

/// `M = ⌊N · (1 − p)⌋`. A tiny nudge keeps products that are integers in
/// exact arithmetic (such as `10 · (1 − 0.3)`) from flooring one below.
pub fn retained_count(n: usize, p: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("pruning ratio {p} outside [0, 1]")));
    }
    let m = (n as f64 * (1.0 - p) + 1e-9).floor() as usize;
    Ok(m.min(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSequence<T> {
    /// `[M, D]`
    pub tokens: Tensor<T>,
    /// `[M, D]`
    pub pos_embed: Tensor<T>,
    /// Strictly increasing original indices.
    pub kept_indices: Vec<usize>,
    /// Requested ratio; for a raw count, `1 − M / N`.
    pub ratio: f64,
    /// Length of the unpruned sequence.
    pub original_len: usize,
}

impl<T: Scalar> PrunedSequence<T> {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

/// Indices of the `m` highest scores, ties going to the lower index,
/// returned in ascending index order.
pub fn top_k_indices<T: Scalar>(scores: &[T], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..m.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

pub fn prune<T: Scalar>(seq: &TokenSequence<T>, scores: &SaliencyScores<T>, retain: Retain) -> Result<PrunedSequence<T>> {
    let n = seq.len();
    if scores.len() != n {
        return Err(Error::DimMismatch(format!("{} scores for {n} tokens", scores.len())));
    }
    let (m, ratio) = match retain {
        Retain::Ratio(p) => (retained_count(n, p)?, p),
        Retain::Count(k) => {
            let m = k.min(n);
            (m, if n == 0 { 0.0 } else { 1.0 - m as f64 / n as f64 })
        }
    };
    let kept = top_k_indices(&scores.values, m);
    let d = seq.hidden();
    let gather = |t: &Tensor<T>| {
        let data = kept.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Tensor::new(&[kept.len(), d], data)
    };
    Ok(PrunedSequence {
        tokens: gather(&seq.tokens)?,
        pos_embed: gather(&seq.pos_embed)?,
        kept_indices: kept,
        ratio,
        original_len: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Visual,
    Text,
}

/// The sequence a language model would consume: retained visual tokens
/// followed by text tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceLayout {
    pub visual: usize,
    pub text: usize,
    pub slots: Vec<SlotSource>,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.slots.len()
    }
}

pub fn downstream_layout(visual: usize, text_len: usize) -> SequenceLayout {
    let mut slots = vec![SlotSource::Visual; visual];
    slots.extend(std::iter::repeat_n(SlotSource::Text, text_len));
    SequenceLayout {
        visual,
        text: text_len,
        slots,
    }
}

pub fn downstream_stub<T: Scalar>(pruned: &PrunedSequence<T>, text_len: usize) -> SequenceLayout {
    downstream_layout(pruned.len(), text_len)
}

/// Inspection dump of one pruning decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneDump {
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub kept_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl PruneDump {
    pub fn new<T: Scalar>(pruned: &PrunedSequence<T>, scores: &SaliencyScores<T>) -> Self {
        PruneDump {
            n: pruned.original_len,
            m: pruned.len(),
            p: pruned.ratio,
            kept_indices: pruned.kept_indices.clone(),
            scores: scores.values.iter().map(|v| v.f64()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, d: usize) -> TokenSequence<f32> {
        TokenSequence {
            tokens: Tensor::from_fn(&[n, d], |i| i as f32),
            pos_embed: Tensor::from_fn(&[n, d], |i| -(i as f32)),
            grid_coords: (0..n).map(|i| (0, i)).collect(),
        }
    }

    #[test]
    fn retained_counts_for_large_grid() {
        assert_eq!(retained_count(3249, 0.25).unwrap(), 2436);
        assert_eq!(retained_count(3249, 0.5).unwrap(), 1624);
        assert_eq!(retained_count(3249, 0.75).unwrap(), 812);
        assert_eq!(retained_count(3249, 0.0).unwrap(), 3249);
        assert_eq!(retained_count(3249, 1.0).unwrap(), 0);
        assert_eq!(retained_count(10, 0.3).unwrap(), 7);
        assert!(retained_count(10, 1.5).is_err());
    }

    #[test]
    fn ties_and_order() {
        let s = SaliencyScores {
            values: vec![0.1f32, 0.9, 0.9, -1.0, 0.5],
        };
        let out = prune(&seq(5, 2), &s, Retain::Ratio(0.4)).unwrap();
        assert_eq!(out.kept_indices, vec![1, 2, 4]);
        assert_eq!(out.tokens.row(2), seq(5, 2).tokens.row(4));
        assert_eq!(out.pos_embed.row(0), seq(5, 2).pos_embed.row(1));
    }

    #[test]
    fn tie_at_cut_prefers_lower_index() {
        let s = SaliencyScores {
            values: vec![0.5f32, 0.5, 0.5, 0.5],
        };
        let out = prune(&seq(4, 1), &s, Retain::Count(2)).unwrap();
        assert_eq!(out.kept_indices, vec![0, 1]);
    }

    #[test]
    fn zero_ratio_is_identity_and_full_ratio_is_empty() {
        let s = SaliencyScores {
            values: vec![3.0f32, 1.0, 2.0],
        };
        let full = prune(&seq(3, 2), &s, Retain::Ratio(0.0)).unwrap();
        assert_eq!(full.kept_indices, vec![0, 1, 2]);
        assert_eq!(full.tokens, seq(3, 2).tokens);
        let empty = prune(&seq(3, 2), &s, Retain::Ratio(1.0)).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.tokens.shape(), &[0, 2]);
        assert_eq!(downstream_stub(&empty, 4).slots, vec![SlotSource::Text; 4]);
    }

    #[test]
    fn layout_puts_visual_first() {
        let l = downstream_layout(812, 64);
        assert_eq!(l.total(), 876);
        assert!(l.slots[..812].iter().all(|&s| s == SlotSource::Visual));
        assert_eq!(downstream_layout(3249, 64).total() - l.total(), 3249 - 812);
    }

    #[test]
    fn score_length_must_match() {
        let s = SaliencyScores { values: vec![1.0f32] };
        assert!(matches!(prune(&seq(3, 2), &s, Retain::Ratio(0.5)), Err(Error::DimMismatch(_))));
    }
}

//! Saliency thresholding, straight-through masking and the
//! foreground/background token split.
//!
//! The straight-through mask is `M̃ = S + stop_grad(M − S)`: its forward value
//! is the hard mask `M = 1[S > 0]` and its backward rule is the identity into
//! `S`. The printed form `M + stop_grad(1 − M)` would evaluate to all ones, so
//! it is not used. [`binarize`] records a dedicated op so the forward value is
//! exactly `M` rather than `S + (M − S)` after rounding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Hard mask and its straight-through surrogate.
#[derive(Debug, Clone)]
pub struct SaliencyMask {
    /// `M`, one 0/1 entry per token (batch-major).
    pub hard: Vec<u8>,
    /// `M̃`, same shape as the scores it came from.
    pub m_tilde: Var,
    /// The scores `S` the mask was derived from.
    pub scores: Var,
}

impl SaliencyMask {
    /// Mean of the hard mask (saliency-collapse diagnostic).
    pub fn fraction_positive(&self) -> f64 {
        fraction_positive(&self.hard)
    }
}

pub fn fraction_positive(hard: &[u8]) -> f64 {
    if hard.is_empty() {
        return 0.0;
    }
    hard.iter().map(|&m| m as f64).sum::<f64>() / hard.len() as f64
}

/// `M_i = 1` iff `S_i > 0`; zero maps to background.
pub fn hard_mask<T: Scalar>(scores: &[T]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > T::zero())).collect()
}

pub fn binarize<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Result<SaliencyMask> {
    let m_tilde = g.ste_threshold(scores)?;
    Ok(SaliencyMask {
        hard: hard_mask(g.value(scores)),
        m_tilde,
        scores,
    })
}

/// `M − S` at the current scores: the term the straight-through estimator
/// holds constant.
pub fn frozen_offset<T: Scalar>(scores: &[T]) -> Vec<T> {
    scores
        .iter()
        .map(|&s| if s > T::zero() { T::one() - s } else { -s })
        .collect()
}

/// Surrogate `S + c` with the stop-gradient term `c` supplied explicitly.
/// Evaluating it with `c = frozen_offset(S₀)` around `S₀` gives a smooth
/// function whose derivative is what the straight-through rule reports.
pub fn binarize_with_offset<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    offset: &[T],
) -> Result<SaliencyMask> {
    let shape = g.shape(scores).to_vec();
    let c = g.constant(&shape, offset.to_vec())?;
    let m_tilde = g.add(scores, c)?;
    Ok(SaliencyMask {
        hard: hard_mask(g.value(scores)),
        m_tilde,
        scores,
    })
}

/// `V_fore = M̃ ⊙ V`, `V_back = (1 − M̃) ⊙ V`, row-wise. `tokens` is
/// `[B, N, D]`; the mask holds `B·N` entries. Both outputs keep all `N`
/// positions; dropped rows are exact zeros.
pub fn split<T: Scalar>(g: &mut Graph<T>, tokens: Var, mask: &SaliencyMask) -> Result<(Var, Var)> {
    let shape = g.shape(tokens).to_vec();
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    if g.value(mask.m_tilde).len() != rows {
        return Err(Error::DimMismatch(format!(
            "mask has {} entries for {rows} token rows",
            g.value(mask.m_tilde).len()
        )));
    }
    let fore = g.scale_rows(tokens, mask.m_tilde)?;
    let inv = g.rsub_scalar(T::one(), mask.m_tilde)?;
    let back = g.scale_rows(tokens, inv)?;
    Ok((fore, back))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_threshold_at_zero() {
        assert_eq!(hard_mask(&[0.5f32, -0.2, 0.0]), vec![1, 0, 0]);
    }

    #[test]
    fn all_negative_scores_pad_everything_in_fore() {
        let mut g = Graph::<f32>::new();
        let s = g.variable(&[1, 3, 1], vec![-1.0, -0.5, -2.0]).unwrap();
        let v = g.constant(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = binarize(&mut g, s).unwrap();
        assert_eq!(mask.hard, vec![0, 0, 0]);
        let (fore, back) = split(&mut g, v, &mask).unwrap();
        assert!(g.value(fore).iter().all(|&x| x == 0.0));
        assert_eq!(g.value(back), g.value(v));
    }

    #[test]
    fn all_ones_mask_keeps_everything_in_fore() {
        let mut g = Graph::<f32>::new();
        let s = g.variable(&[1, 2, 1], vec![1.0, 0.1]).unwrap();
        let v = g.constant(&[1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mask = binarize(&mut g, s).unwrap();
        let (fore, back) = split(&mut g, v, &mask).unwrap();
        assert_eq!(g.value(fore), g.value(v));
        assert!(g.value(back).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_of_sum_of_mask_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let s = g.variable(&[4], vec![0.3, -0.7, 0.0, 2.0]).unwrap();
        let mask = binarize(&mut g, s).unwrap();
        let total = g.sum(mask.m_tilde).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn canonical_composition_agrees_with_dedicated_op() {
        let scores = [0.3f64, -0.7, 0.0, 2.5, -1e-3];
        let mut g = Graph::<f64>::new();
        let s = g.variable(&[5], scores.to_vec()).unwrap();
        // S + stop_grad(M − S) spelled out with graph primitives
        let m = g.constant(&[5], hard_mask(&scores).iter().map(|&b| b as f64).collect()).unwrap();
        let diff = g.sub(m, s).unwrap();
        let frozen = g.stop_grad(diff).unwrap();
        let canon = g.add(s, frozen).unwrap();
        let mask = binarize(&mut g, s).unwrap();
        for (a, b) in g.value(canon).iter().zip(g.value(mask.m_tilde)) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = g.constant(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y1 = g.mul(canon, w).unwrap();
        let l1 = g.sum(y1).unwrap();
        g.backward(l1).unwrap();
        let via_canon = g.grad(s).unwrap().to_vec();
        g.zero_grads();
        let y2 = g.mul(mask.m_tilde, w).unwrap();
        let l2 = g.sum(y2).unwrap();
        g.backward(l2).unwrap();
        assert_eq!(g.grad(s).unwrap(), via_canon.as_slice());
    }

    #[test]
    fn mask_length_must_match_rows() {
        let mut g = Graph::<f32>::new();
        let s = g.variable(&[1, 2, 1], vec![1.0, -1.0]).unwrap();
        let v = g.constant(&[1, 3, 2], vec![0.0; 6]).unwrap();
        let mask = binarize(&mut g, s).unwrap();
        assert!(matches!(split(&mut g, v, &mask), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn offset_surrogate_reproduces_mask_at_base_point() {
        let scores = [0.25f32, -0.5, 0.0];
        let mut g = Graph::<f32>::new();
        let s = g.variable(&[3], scores.to_vec()).unwrap();
        let mask = binarize_with_offset(&mut g, s, &frozen_offset(&scores)).unwrap();
        assert_eq!(g.value(mask.m_tilde), &[1.0, 0.0, 0.0]);
    }
}

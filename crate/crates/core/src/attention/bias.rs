//! Local relative-position biases and the causal mask.
//!
//! Biases depend on the offset `i - j` only and are nonzero for offsets
//! `0..=L`. Anything further back than `L` positions gets exactly zero, so
//! blocks older than the previous one can be served from the compressed
//! cache without a positional term.

use crate::error::{Error, Result};
use crate::tensor::{dot, Real, Tensor};

pub const MAX_WAVELENGTH: f64 = 1e5;

/// Sinusoid features for offsets `0..count`, one row per offset.
pub fn sinusoid_features<F: Real>(count: usize, width: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(&[count, width]);
    let half = width.div_ceil(2).max(1);
    for r in 0..count {
        for c in 0..width {
            let i = c / 2;
            let freq = MAX_WAVELENGTH.powf(-(i as f64) / half as f64);
            let angle = r as f64 * freq;
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(r, c, F::c(v));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BiasSpec<F: Real = f64> {
    block_len: usize,
    /// Bias per offset `0..=L`.
    window: Vec<F>,
}

impl<F: Real> BiasSpec<F> {
    /// Biases from the sinusoid features projected by `proj`.
    pub fn from_projection(block_len: usize, proj: &[F]) -> Self {
        let feats = sinusoid_features::<F>(block_len + 1, proj.len());
        let window = (0..=block_len).map(|r| dot(feats.row(r), proj)).collect();
        Self { block_len, window }
    }

    /// Explicit per-offset values for offsets `0..=L`.
    pub fn from_values(block_len: usize, window: Vec<F>) -> Result<Self> {
        if window.len() != block_len + 1 {
            return Err(Error::InvalidArgument(format!(
                "bias window needs {} values, got {}",
                block_len + 1,
                window.len()
            )));
        }
        Ok(Self { block_len, window })
    }

    pub fn zeros(block_len: usize) -> Self {
        Self {
            block_len,
            window: vec![F::zero(); block_len + 1],
        }
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn window(&self) -> &[F] {
        &self.window
    }

    /// Bias for a non-negative offset `i - j`.
    #[inline]
    pub fn offset_bias(&self, offset: usize) -> F {
        self.window.get(offset).copied().unwrap_or_else(F::zero)
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> F {
        if j > i {
            F::neg_large()
        } else {
            self.offset_bias(i - j)
        }
    }

    /// Bias block for queries of block `n` against keys of block `n` (with
    /// the causal mask).
    pub fn current_block(&self) -> Tensor<F> {
        let l = self.block_len;
        let mut out = Tensor::zeros(&[l, l]);
        for a in 0..l {
            for b in 0..l {
                out.set(a, b, self.entry(a, b));
            }
        }
        out
    }

    /// Bias block for queries of block `n` against keys of block `n - 1`.
    pub fn previous_block(&self) -> Tensor<F> {
        let l = self.block_len;
        let mut out = Tensor::zeros(&[l, l]);
        for a in 0..l {
            for b in 0..l {
                out.set(a, b, self.offset_bias(a + l - b));
            }
        }
        out
    }
}

/// Full `T × T` bias-plus-mask matrix.
pub fn build_bias_matrix<F: Real>(len: usize, spec: &BiasSpec<F>) -> Result<Tensor<F>> {
    let l = spec.block_len;
    if l == 0 || len % l != 0 {
        return Err(Error::BlockLength { block_len: l, len });
    }
    let mut out = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in 0..len {
            out.set(i, j, spec.entry(i, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[allow(dead_code)]
    type Tensor = crate::tensor::Tensor<f64>;
    use super::*;
    use crate::tensor::NEG_LARGE;

    #[test]
    fn zero_parameters_give_mask_only() {
        let spec = BiasSpec::<f64>::from_projection(2, &[0.0; 4]);
        let b = build_bias_matrix(2, &spec).unwrap();
        assert_eq!(b.data(), &[0.0, NEG_LARGE, 0.0, 0.0]);
    }

    #[test]
    fn outside_window_is_exactly_zero() {
        let spec = BiasSpec::<f64>::from_projection(2, &[0.3, -0.7, 1.1, 0.2]);
        let b = build_bias_matrix(12, &spec).unwrap();
        assert_eq!(b.at(5, 1), 0.0);
        assert_eq!(b.at(5, 4), b.at(9, 8));
        assert_eq!(b.at(3, 3), b.at(11, 11));
        for i in 0..12 {
            for j in 0..12 {
                if j > i {
                    assert_eq!(b.at(i, j), NEG_LARGE);
                } else if j + 2 < i {
                    assert_eq!(b.at(i, j), 0.0);
                } else {
                    assert!(b.at(i, j).is_finite());
                }
            }
        }
    }

    #[test]
    fn block_length_must_divide() {
        let spec = BiasSpec::<f64>::zeros(4);
        assert!(matches!(build_bias_matrix(6, &spec), Err(Error::BlockLength { .. })));
    }

    #[test]
    fn block_slices_match_full_matrix() {
        let spec = BiasSpec::<f64>::from_values(3, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let full = build_bias_matrix(9, &spec).unwrap();
        let cur = spec.current_block();
        let prev = spec.previous_block();
        let n = 2;
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(cur.at(a, b), full.at(n * 3 + a, n * 3 + b));
                assert_eq!(prev.at(a, b), full.at(n * 3 + a, (n - 1) * 3 + b));
            }
        }
    }

    #[test]
    fn sinusoids_are_bounded() {
        let f = sinusoid_features::<f64>(9, 6);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(f.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}

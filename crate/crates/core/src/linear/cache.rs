use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-shortcode running means of absorbed value rows and their counts.
///
/// Means rather than sums keep magnitudes bounded; the count re-enters the
/// attention scores as a `log` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState<F: Real = f64> {
    /// `S × D_v`; zero rows for codes that were never seen.
    pub value_means: Tensor<F>,
    /// `[S]`
    pub counts: Vec<F>,
    pub blocks_absorbed: usize,
}

#[inline]
fn clip1<F: Real>(v: F) -> F {
    v.max(F::one())
}

impl<F: Real> CacheState<F> {
    pub fn empty(codes: usize, d_v: usize) -> Self {
        Self {
            value_means: Tensor::zeros(&[codes, d_v]),
            counts: vec![F::zero(); codes],
            blocks_absorbed: 0,
        }
    }

    pub fn codes(&self) -> usize {
        self.counts.len()
    }

    pub fn d_v(&self) -> usize {
        self.value_means.cols()
    }

    pub fn total_count(&self) -> F {
        self.counts.iter().copied().sum()
    }

    /// Statistics of a single block: per-code means and counts.
    pub fn from_block(z: &[usize], v: &Tensor<F>, codes: usize) -> Result<Self> {
        if v.ndim() != 2 || v.rows() != z.len() {
            return Err(Error::ShapeMismatch {
                op: "cache_block",
                left: vec![z.len()],
                right: v.shape().to_vec(),
            });
        }
        let mut state = Self::empty(codes, v.cols());
        for (t, &c) in z.iter().enumerate() {
            if c >= codes {
                return Err(Error::CodeOutOfRange { code: c, size: codes });
            }
            state.counts[c] += F::one();
            for (acc, &x) in state.value_means.row_mut(c).iter_mut().zip(v.row(t)) {
                *acc += x;
            }
        }
        for c in 0..codes {
            let d = clip1(state.counts[c]);
            state.value_means.row_mut(c).iter_mut().for_each(|x| *x /= d);
        }
        state.blocks_absorbed = 1;
        Ok(state)
    }

    /// Count-weighted combination of two summaries. Associative, with the
    /// empty state as identity.
    pub fn merge(&self, other: &Self) -> Self {
        let mut out = Self::empty(self.codes(), self.d_v());
        for c in 0..self.codes() {
            let total = self.counts[c] + other.counts[c];
            let denom = clip1(total);
            let f1 = self.counts[c] / denom;
            let f2 = other.counts[c] / denom;
            for ((o, &a), &b) in out
                .value_means
                .row_mut(c)
                .iter_mut()
                .zip(self.value_means.row(c))
                .zip(other.value_means.row(c))
            {
                *o = f1 * a + f2 * b;
            }
            out.counts[c] = total;
        }
        out.blocks_absorbed = self.blocks_absorbed + other.blocks_absorbed;
        out
    }

    /// Folds one block of shortcodes and value rows into the cache.
    pub fn absorb(&self, z: &[usize], v: &Tensor<F>) -> Result<Self> {
        if v.cols() != self.d_v() {
            return Err(Error::ShapeMismatch {
                op: "cache_absorb",
                left: self.value_means.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        Ok(self.merge(&Self::from_block(z, v, self.codes())?))
    }

    /// Additive log-count scores: `ln(max(n, 1))` for seen codes,
    /// `NEG_LARGE` for unseen ones.
    pub fn count_biases(&self) -> Vec<F> {
        self.counts
            .iter()
            .map(|&n| if n > F::zero() { clip1(n).ln() } else { F::neg_large() })
            .collect()
    }

    pub fn cast<G: Real>(&self) -> CacheState<G> {
        CacheState {
            value_means: self.value_means.cast(),
            counts: self.counts.iter().map(|c| G::c(c.to_f64().unwrap_or(0.0))).collect(),
            blocks_absorbed: self.blocks_absorbed,
        }
    }
}

pub fn cache_absorb<F: Real>(state: &CacheState<F>, z_block: &[usize], v_block: &Tensor<F>) -> Result<CacheState<F>> {
    state.absorb(z_block, v_block)
}

/// `S × L` one-hot matrix with column `t` set at row `z_t`.
pub fn delta_onehot<F: Real>(z: &[usize], codes: usize) -> Result<Tensor<F>> {
    let mut out = Tensor::zeros(&[codes, z.len()]);
    for (t, &c) in z.iter().enumerate() {
        if c >= codes {
            return Err(Error::CodeOutOfRange { code: c, size: codes });
        }
        out.set(c, t, F::one());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn group_by(z: &[usize], v: &Tensor, codes: usize) -> (Vec<f64>, Tensor) {
        let mut counts = vec![0.0; codes];
        let mut sums = Tensor::zeros(&[codes, v.cols()]);
        for (t, &c) in z.iter().enumerate() {
            counts[c] += 1.0;
            for d in 0..v.cols() {
                sums.set(c, d, sums.at(c, d) + v.at(t, d));
            }
        }
        for c in 0..codes {
            if counts[c] > 0.0 {
                for d in 0..v.cols() {
                    sums.set(c, d, sums.at(c, d) / counts[c]);
                }
            }
        }
        (counts, sums)
    }

    fn random_block(rng: &mut ChaCha8Rng, l: usize, codes: usize, dv: usize) -> (Vec<usize>, Tensor) {
        let z = (0..l).map(|_| rng.random_range(0..codes)).collect();
        let v = Tensor::new(&[l, dv], (0..l * dv).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        (z, v)
    }

    #[test]
    fn delta_examples() {
        let d: Tensor = delta_onehot(&[0, 2, 0], 3).unwrap();
        assert_eq!(d.data(), &[1., 0., 1., 0., 0., 0., 0., 1., 0.]);
        for t in 0..3 {
            assert_eq!((0..3).map(|s| d.at(s, t)).sum::<f64>(), 1.0);
        }
        assert!(matches!(delta_onehot::<f64>(&[3], 3), Err(Error::CodeOutOfRange { .. })));
    }

    #[test]
    fn delta_row_sums_are_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<usize> = (0..40).map(|_| rng.random_range(0..5)).collect();
        let d: Tensor = delta_onehot(&z, 5).unwrap();
        for s in 0..5 {
            let hist = z.iter().filter(|&&c| c == s).count() as f64;
            assert_eq!(d.row(s).iter().sum::<f64>(), hist);
        }
    }

    #[test]
    fn absorb_into_empty_is_group_by() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, v) = random_block(&mut rng, 8, 4, 3);
        let state = CacheState::empty(4, 3).absorb(&z, &v).unwrap();
        let (counts, means) = group_by(&z, &v, 4);
        assert_eq!(state.counts, counts);
        assert!(state.value_means.max_abs_diff(&means).unwrap() < 1e-12);
        assert_eq!(state.blocks_absorbed, 1);
    }

    #[test]
    fn sequential_absorb_equals_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (z1, v1) = random_block(&mut rng, 6, 3, 4);
        let (z2, v2) = random_block(&mut rng, 6, 3, 4);
        let seq = CacheState::empty(3, 4).absorb(&z1, &v1).unwrap().absorb(&z2, &v2).unwrap();
        let zc: Vec<usize> = z1.iter().chain(&z2).copied().collect();
        let vc = Tensor::concat_rows(&[&v1, &v2]).unwrap();
        let (counts, means) = group_by(&zc, &vc, 3);
        assert_eq!(seq.counts, counts);
        assert!(seq.value_means.max_abs_diff(&means).unwrap() < 1e-12);
        assert_eq!(seq.total_count(), 12.0);
    }

    #[test]
    fn absent_code_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z1, v1) = random_block(&mut rng, 6, 3, 2);
        let before = CacheState::empty(4, 2).absorb(&z1, &v1).unwrap();
        let after = before.absorb(&[0, 1, 2, 0], &Tensor::full(&[4, 2], 5.0)).unwrap();
        assert_eq!(after.counts[3], before.counts[3]);
        assert_eq!(after.value_means.row(3), before.value_means.row(3));
    }

    #[test]
    fn merge_identity_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut states = Vec::new();
        for _ in 0..3 {
            let (z, v) = random_block(&mut rng, 5, 4, 3);
            let mut s = CacheState::from_block(&z, &v, 4).unwrap();
            // Non-integer counts (still at least 1) exercise the general rule.
            s.counts.iter_mut().for_each(|c| {
                if *c > 0.0 {
                    *c *= rng.random_range(1.0..3.0)
                }
            });
            states.push(s);
        }
        let zero = CacheState::empty(4, 3);
        let a = &states[0];
        assert_eq!(&zero.merge(a).value_means, &a.value_means);
        assert_eq!(&a.merge(&zero).value_means, &a.value_means);
        let left = a.merge(&states[1]).merge(&states[2]);
        let right = a.merge(&states[1].merge(&states[2]));
        assert!(left.value_means.max_abs_diff(&right.value_means).unwrap() < 1e-12);
        for c in 0..4 {
            assert!((left.counts[c] - right.counts[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn count_biases_mark_dead_codes() {
        let mut s = CacheState::<f64>::empty(3, 1);
        s.counts = vec![0.0, 1.0, 4.0];
        let b = s.count_biases();
        assert_eq!(b[0], crate::tensor::NEG_LARGE);
        assert_eq!(b[1], 0.0);
        assert!((b[2] - 4.0f64.ln()).abs() < 1e-15);
    }
}

//! Nearest-codeword quantization of key rows and the EMA k-means codebook.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Real, Tensor};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-5;

/// `S × D_k` codewords together with the EMA statistics that define them.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F: Real = f64> {
    codewords: Tensor<F>,
    ema_counts: Vec<F>,
    ema_sums: Tensor<F>,
    decay: F,
    smoothing_eps: F,
}

impl<F: Real> Codebook<F> {
    /// Codebook whose accumulators state one observation per codeword.
    pub fn new(codewords: Tensor<F>, decay: F) -> Result<Self> {
        if codewords.ndim() != 2 || codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(Error::InvalidShape {
                op: "codebook",
                msg: format!("codewords must be S×D with S, D >= 1, got {:?}", codewords.shape()),
            });
        }
        if !(decay > F::zero() && decay < F::one()) {
            return Err(Error::InvalidArgument(format!("codebook decay {decay} outside (0, 1)")));
        }
        let s = codewords.rows();
        Ok(Self {
            ema_sums: codewords.clone(),
            codewords,
            ema_counts: vec![F::one(); s],
            decay,
            smoothing_eps: F::c(DEFAULT_SMOOTHING_EPS),
        })
    }

    /// Rebuilds a codebook from stored accumulators; codewords are derived.
    pub fn from_accumulators(ema_counts: Vec<F>, ema_sums: Tensor<F>, decay: F, smoothing_eps: F) -> Result<Self> {
        if ema_sums.ndim() != 2 || ema_sums.rows() != ema_counts.len() || ema_counts.is_empty() {
            return Err(Error::InvalidShape {
                op: "codebook",
                msg: format!("{} counts for sums of shape {:?}", ema_counts.len(), ema_sums.shape()),
            });
        }
        if ema_counts.iter().any(|&c| !(c >= F::zero())) {
            return Err(Error::InvalidArgument("negative EMA count".into()));
        }
        let mut cb = Self {
            codewords: ema_sums.clone(),
            ema_counts,
            ema_sums,
            decay,
            smoothing_eps,
        };
        cb.refresh_codewords();
        Ok(cb)
    }

    /// Reassembles a codebook exactly as stored, codewords included.
    pub fn from_parts(codewords: Tensor<F>, ema_counts: Vec<F>, ema_sums: Tensor<F>, decay: F, smoothing_eps: F) -> Result<Self> {
        let mut cb = Self::from_accumulators(ema_counts, ema_sums, decay, smoothing_eps)?;
        if codewords.shape() != cb.codewords.shape() {
            return Err(Error::ShapeMismatch {
                op: "codebook",
                left: codewords.shape().to_vec(),
                right: cb.codewords.shape().to_vec(),
            });
        }
        cb.codewords = codewords;
        Ok(cb)
    }

    /// Gaussian codewords with per-component scale `std`.
    pub fn random(size: usize, dim: usize, std: f64, decay: F, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..size * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::c(z * std)
            })
            .collect();
        Self::new(Tensor::new(&[size, dim], data)?, decay)
    }

    /// k-means style seeding: `size` distinct rows of `keys`, padded with
    /// Gaussian rows of scale `fallback_std` when there are not enough
    /// distinct rows.
    pub fn seeded(keys: &Tensor<F>, size: usize, decay: F, fallback_std: f64, rng: &mut impl Rng) -> Result<Self> {
        let dim = keys.cols();
        let mut distinct: Vec<&[F]> = Vec::new();
        for t in 0..keys.rows() {
            let r = keys.row(t);
            if !distinct.iter().any(|d| *d == r) {
                distinct.push(r);
            }
        }
        let mut rows: Vec<Vec<F>> = if distinct.len() >= size {
            sample(rng, distinct.len(), size)
                .into_iter()
                .map(|i| distinct[i].to_vec())
                .collect()
        } else {
            distinct.iter().map(|r| r.to_vec()).collect()
        };
        while rows.len() < size {
            rows.push(
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        F::c(z * fallback_std)
                    })
                    .collect(),
            );
        }
        Self::new(Tensor::from_rows(&rows)?, decay)
    }

    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codewords(&self) -> &Tensor<F> {
        &self.codewords
    }

    pub fn codeword(&self, s: usize) -> &[F] {
        self.codewords.row(s)
    }

    pub fn ema_counts(&self) -> &[F] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor<F> {
        &self.ema_sums
    }

    pub fn decay(&self) -> F {
        self.decay
    }

    pub fn smoothing_eps(&self) -> F {
        self.smoothing_eps
    }

    pub fn with_smoothing_eps(mut self, eps: F) -> Self {
        self.smoothing_eps = eps;
        self.refresh_codewords();
        self
    }

    pub fn cast<G: Real>(&self) -> Codebook<G> {
        Codebook {
            codewords: self.codewords.cast(),
            ema_counts: self.ema_counts.iter().map(|c| G::c(c.to_f64().unwrap_or(0.0))).collect(),
            ema_sums: self.ema_sums.cast(),
            decay: G::c(self.decay.to_f64().unwrap_or(DEFAULT_DECAY)),
            smoothing_eps: G::c(self.smoothing_eps.to_f64().unwrap_or(DEFAULT_SMOOTHING_EPS)),
        }
    }

    fn refresh_codewords(&mut self) {
        for s in 0..self.size() {
            let denom = self.ema_counts[s].max(self.smoothing_eps);
            for (c, &u) in self.codewords.row_mut(s).iter_mut().zip(self.ema_sums.row(s)) {
                *c = u / denom;
            }
        }
    }

    /// One EMA k-means step from keys `k` and their shortcodes.
    pub fn ema_update(&mut self, k: &Tensor<F>, z: &Shortcodes) -> Result<()> {
        if k.ndim() != 2 || k.cols() != self.dim() || k.rows() != z.len() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                left: k.shape().to_vec(),
                right: vec![z.len(), self.dim()],
            });
        }
        z.check(self.size())?;
        let s = self.size();
        let mut counts = vec![F::zero(); s];
        let mut sums = Tensor::zeros(&[s, self.dim()]);
        for (t, &code) in z.codes().iter().enumerate() {
            counts[code] += F::one();
            for (acc, &v) in sums.row_mut(code).iter_mut().zip(k.row(t)) {
                *acc += v;
            }
        }
        let g = self.decay;
        let rest = F::one() - g;
        for code in 0..s {
            self.ema_counts[code] = g * self.ema_counts[code] + rest * counts[code];
            for (acc, &v) in self.ema_sums.row_mut(code).iter_mut().zip(sums.row(code)) {
                *acc = g * *acc + rest * v;
            }
        }
        self.refresh_codewords();
        Ok(())
    }
}

/// Shortcodes `z_t ∈ [0, S)`, one per quantized row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Shortcodes {
    codes: Vec<usize>,
}

impl Shortcodes {
    pub fn new(codes: Vec<usize>, size: usize) -> Result<Self> {
        let z = Self { codes };
        z.check(size)?;
        Ok(z)
    }

    pub fn check(&self, size: usize) -> Result<()> {
        match self.codes.iter().find(|&&c| c >= size) {
            Some(&code) => Err(Error::CodeOutOfRange { code, size }),
            None => Ok(()),
        }
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            codes: self.codes[start..start + len].to_vec(),
        }
    }

    /// Number of distinct shortcodes in use.
    pub fn distinct(&self, size: usize) -> usize {
        let mut used = vec![false; size];
        for &c in &self.codes {
            used[c] = true;
        }
        used.into_iter().filter(|&u| u).count()
    }
}

/// Index of the codeword closest to `x`, lowest index on ties.
pub fn nearest_codeword<'a, F: Real>(x: &[F], cb: &'a Codebook<F>) -> Result<(usize, &'a [F])> {
    if x.len() != cb.dim() {
        return Err(Error::ShapeMismatch {
            op: "nearest_codeword",
            left: vec![x.len()],
            right: vec![cb.size(), cb.dim()],
        });
    }
    let mut best = 0;
    let mut best_d = F::infinity();
    for s in 0..cb.size() {
        let d = sq_dist(x, cb.codeword(s));
        if d < best_d {
            best = s;
            best_d = d;
        }
    }
    Ok((best, cb.codeword(best)))
}

/// Row-wise quantization. The forward value is the codeword; see
/// [`straight_through_grad`] for the backward contract.
pub fn quantize_batch<F: Real>(k: &Tensor<F>, cb: &Codebook<F>) -> Result<(Tensor<F>, Shortcodes)> {
    if k.ndim() != 2 || k.cols() != cb.dim() {
        return Err(Error::ShapeMismatch {
            op: "quantize_batch",
            left: k.shape().to_vec(),
            right: vec![cb.size(), cb.dim()],
        });
    }
    let mut out = Tensor::zeros(k.shape());
    let mut codes = Vec::with_capacity(k.rows());
    for t in 0..k.rows() {
        let (z, c) = nearest_codeword(k.row(t), cb)?;
        out.row_mut(t).copy_from_slice(c);
        codes.push(z);
    }
    Ok((out, Shortcodes { codes }))
}

/// Gradient of the straight-through quantizer: the upstream gradient passes
/// to the input unchanged and codewords receive nothing.
pub fn straight_through_grad<F: Real>(upstream: &Tensor<F>) -> Tensor<F> {
    upstream.clone()
}

/// `(1/T) Σ_t ‖K_t − C_{z_t}‖²` with the codewords held constant.
pub fn commit_loss<F: Real>(k: &Tensor<F>, cb: &Codebook<F>, z: &Shortcodes) -> Result<F> {
    if k.rows() != z.len() || k.cols() != cb.dim() {
        return Err(Error::ShapeMismatch {
            op: "commit_loss",
            left: k.shape().to_vec(),
            right: vec![z.len(), cb.dim()],
        });
    }
    z.check(cb.size())?;
    if z.is_empty() {
        return Ok(F::zero());
    }
    let total: F = z
        .codes()
        .iter()
        .enumerate()
        .map(|(t, &c)| sq_dist(k.row(t), cb.codeword(c)))
        .sum();
    Ok(total / F::c(z.len() as f64))
}

/// Smallest gap between the best and second-best squared distance over all
/// rows; shortcodes are locally constant while perturbations stay well
/// below this margin.
pub fn argmin_margin<F: Real>(k: &Tensor<F>, cb: &Codebook<F>) -> F {
    if cb.size() < 2 {
        return F::infinity();
    }
    let mut margin = F::infinity();
    for t in 0..k.rows() {
        let mut best = F::infinity();
        let mut second = F::infinity();
        for s in 0..cb.size() {
            let d = sq_dist(k.row(t), cb.codeword(s));
            if d < best {
                second = best;
                best = d;
            } else if d < second {
                second = d;
            }
        }
        margin = margin.min(second - best);
    }
    margin
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    #[allow(dead_code)]
    type Tensor = crate::tensor::Tensor<f64>;
    #[allow(dead_code)]
    type Codebook = super::Codebook<f64>;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_codes() -> Codebook {
        Codebook::new(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap(), 0.99).unwrap()
    }

    #[test]
    fn nearest_codeword_examples() {
        let cb = two_codes();
        assert_eq!(nearest_codeword(&[0.0, 0.0], &cb).unwrap(), (0, &[0.0, 0.0][..]));
        assert_eq!(nearest_codeword(&[0.6, 0.6], &cb).unwrap(), (1, &[1.0, 1.0][..]));
        // Equidistant: lowest index wins.
        assert_eq!(nearest_codeword(&[0.5, 0.5], &cb).unwrap().0, 0);
        assert!(nearest_codeword(&[0.5], &cb).is_err());
    }

    #[test]
    fn quantize_fixed_point_and_idempotence() {
        let cb = two_codes();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (kh, z) = quantize_batch(&k, &cb).unwrap();
        assert_eq!(kh, k);
        assert_eq!(z.codes(), &[1, 0, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::new(&[8, 2], (0..16).map(|_| rng.random_range(-1.0..2.0)).collect()).unwrap();
        let (once, z1) = quantize_batch(&k, &cb).unwrap();
        let (twice, z2) = quantize_batch(&once, &cb).unwrap();
        assert_eq!(once, twice);
        assert_eq!(z1, z2);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = Codebook::random(3, 2, 1.0, 0.99, &mut rng).unwrap();
        let k = Tensor::new(&[8, 2], (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (kh, z) = quantize_batch(&k, &cb).unwrap();
        for t in 0..8 {
            let dists: Vec<f64> = (0..3)
                .map(|s| (0..2).map(|d| (k.at(t, d) - cb.codewords().at(s, d)).powi(2)).sum())
                .collect();
            let want = (0..3).fold(0, |b, s| if dists[s] < dists[b] { s } else { b });
            assert_eq!(z.codes()[t], want);
            assert_eq!(kh.row(t), cb.codeword(want));
        }
    }

    #[test]
    fn straight_through_is_identity() {
        let ones = Tensor::full(&[3, 2], 1.0);
        assert_eq!(straight_through_grad(&ones), ones);
        let zeros = Tensor::zeros(&[3, 2]);
        assert_eq!(straight_through_grad(&zeros), zeros);
    }

    #[test]
    fn commit_loss_examples() {
        let cb = two_codes();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let z = Shortcodes::new(vec![1, 0], 2).unwrap();
        assert_eq!(commit_loss(&k, &cb, &z).unwrap(), 0.0);

        let k = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z = Shortcodes::new(vec![0], 2).unwrap();
        assert_eq!(commit_loss(&k, &cb, &z).unwrap(), 1.0);
    }

    #[test]
    fn commit_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cb = Codebook::random(5, 4, 1.0, 0.99, &mut rng).unwrap();
        let k = Tensor::new(&[16, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, z) = quantize_batch(&k, &cb).unwrap();
        let mut direct = 0.0;
        for t in 0..16 {
            for d in 0..4 {
                direct += (k.at(t, d) - cb.codewords().at(z.codes()[t], d)).powi(2);
            }
        }
        direct /= 16.0;
        assert!((commit_loss(&k, &cb, &z).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn ema_hand_evaluation() {
        let cb0 = Codebook::from_accumulators(vec![1.0], Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), 0.5, 1e-5).unwrap();
        let mut cb = cb0.clone();
        let k = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        cb.ema_update(&k, &Shortcodes::new(vec![0], 1).unwrap()).unwrap();
        assert_eq!(cb.ema_counts(), &[1.0]);
        assert_eq!(cb.ema_sums().data(), &[1.0, 0.0]);
        assert_eq!(cb.codeword(0), &[1.0, 0.0]);
    }

    #[test]
    fn ema_fixed_point() {
        let mut cb = two_codes();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let z = Shortcodes::new(vec![1, 0], 2).unwrap();
        for _ in 0..10 {
            cb.ema_update(&k, &z).unwrap();
        }
        assert!(cb.codewords().max_abs_diff(two_codes().codewords()).unwrap() < 1e-12);
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers = [[2.0, 0.0], [-2.0, 1.0], [0.0, -3.0]];
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..60 {
                rows.push(vec![c[0] + rng.random_range(-0.1..0.1), c[1] + rng.random_range(-0.1..0.1)]);
            }
        }
        let k = Tensor::from_rows(&rows).unwrap();
        let init = Tensor::from_rows(&[rows[0].clone(), rows[60].clone(), rows[120].clone()]).unwrap();
        let mut cb = Codebook::new(init.clone(), 0.99).unwrap();
        let (_, z) = quantize_batch(&k, &cb).unwrap();
        for _ in 0..200 {
            cb.ema_update(&k, &z).unwrap();
        }
        let g200 = 0.99f64.powi(200);
        for s in 0..3 {
            let members: Vec<usize> = (0..k.rows()).filter(|&t| z.codes()[t] == s).collect();
            let m = members.len() as f64;
            for d in 0..2 {
                let mean = members.iter().map(|&t| k.at(t, d)).sum::<f64>() / m;
                // Geometric-series limit of the recursion from unit initial count.
                let closed = (g200 * init.at(s, d) + (1.0 - g200) * m * mean) / (g200 + (1.0 - g200) * m);
                assert!((cb.codewords().at(s, d) - closed).abs() < 1e-12);
                assert!((cb.codewords().at(s, d) - mean).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn ema_dead_codes_stay_finite() {
        let mut cb = two_codes();
        let k = Tensor::from_rows(&[vec![0.1, 0.0]]).unwrap();
        let z = Shortcodes::new(vec![0], 2).unwrap();
        for _ in 0..20_000 {
            cb.ema_update(&k, &z).unwrap();
        }
        assert!(cb.codewords().all_finite());
        assert!(cb.ema_counts().iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn seeding_uses_distinct_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let cb = Codebook::seeded(&k, 3, 0.99, 1.0, &mut rng).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|s| cb.codeword(s).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]);
        // Fewer distinct rows than codes: padded with random rows.
        let cb = Codebook::seeded(&k, 5, 0.99, 1.0, &mut rng).unwrap();
        assert_eq!(cb.size(), 5);
    }

    #[test]
    fn out_of_range_codes_rejected() {
        assert!(matches!(Shortcodes::new(vec![0, 3], 3), Err(Error::CodeOutOfRange { code: 3, size: 3 })));
    }

    proptest! {
        #[test]
        fn quantization_is_minimal(seed in 0u64..500, s in 1usize..6, t in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::random(s, 3, 1.0, 0.99, &mut rng).unwrap();
            let k = Tensor::new(&[t, 3], (0..t * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let (_, z) = quantize_batch(&k, &cb).unwrap();
            for row in 0..t {
                let chosen = sq_dist(k.row(row), cb.codeword(z.codes()[row]));
                for c in 0..s {
                    prop_assert!(chosen <= sq_dist(k.row(row), cb.codeword(c)));
                }
            }
        }

        #[test]
        fn ema_keeps_codeword_invariant(seed in 0u64..200, steps in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cb = Codebook::random(4, 2, 1.0, 0.9, &mut rng).unwrap();
            for _ in 0..steps {
                let k = Tensor::new(&[6, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let (_, z) = quantize_batch(&k, &cb).unwrap();
                cb.ema_update(&k, &z).unwrap();
                for c in 0..4 {
                    let denom = cb.ema_counts()[c].max(cb.smoothing_eps());
                    for d in 0..2 {
                        prop_assert!((cb.codewords().at(c, d) - cb.ema_sums().at(c, d) / denom).abs() < 1e-12);
                    }
                    prop_assert!(cb.ema_counts()[c] >= 0.0);
                }
            }
        }
    }
}

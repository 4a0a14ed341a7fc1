//! Self-check suite behind `vqattn verify`.
//!
//! Every documented invariant of the crate has one check here. Each check
//! returns a [`CheckResult`] carrying the worst deviation it saw and the
//! bound it was held to. The `fault` argument corrupts the candidate side
//! of a comparison; it exists so the harness itself can be tested.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{
    encoder_direct_weights, encoder_factored_weights, project, vq_attn_quadratic, vq_attn_quadratic_traced,
    EncoderNonlinearity, GauParams, HeadConfig, HeadKind,
};
use crate::autodiff::Tape;
use crate::bench::{fit_slopes, run_bench, write_csv, AttnKind, BenchConfig, BenchRow, Precision, CSV_HEADER};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{window_batches, Corpus, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::linear::{cache_vars, vq_attn_linear, vq_attn_linear_traced, CacheState, Reduction};
use crate::model::{Carry, Model, ModelConfig};
use crate::optim::OptimConfig;
use crate::quantizer::{argmin_margin, quantize_batch, straight_through_grad, Codebook, Shortcodes};
use crate::sampler::{decode_step, forward_distributions, sample_nucleus, DecodeState};
use crate::tensor::{block, contract, row_softmax_stable, sq_dist, ContractSpec, Tensor, NEG_LARGE};
use crate::train::{evaluate, parameter_gradients, training_loss, training_loss_on, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Not run (fast mode).
    pub skipped: bool,
    pub value: f64,
    pub bound: Bound,
    pub limit: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(module: &'static str, name: &'static str, value: f64, limit: f64, detail: String) -> Self {
        Self {
            module,
            name,
            passed: value <= limit,
            skipped: false,
            value,
            bound: Bound::AtMost,
            limit,
            detail,
        }
    }

    fn skipped(module: &'static str, name: &'static str) -> Self {
        Self {
            module,
            name,
            passed: true,
            skipped: true,
            value: f64::NAN,
            bound: Bound::AtMost,
            limit: f64::NAN,
            detail: "skipped in fast mode".into(),
        }
    }

    /// `module/name`
    pub fn property(&self) -> String {
        format!("{}/{}", self.module, self.name)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.skipped {
            "SKIP"
        } else if self.passed {
            "PASS"
        } else {
            "FAIL"
        };
        if self.skipped {
            return write!(f, "{status} {} ({})", self.property(), self.detail);
        }
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "{status} {} value={:.3e} {op} {:.3e} ({})",
            self.property(),
            self.value,
            self.limit,
            self.detail
        )
    }
}

/// `(module, name)` of every check, in report order.
pub const CHECKS: &[(&str, &str)] = &[
    ("tensor", "contract-oracle"),
    ("tensor", "softmax-rows"),
    ("tensor", "block-view-negative"),
    ("quantizer", "quantization-minimality"),
    ("quantizer", "vq-minimum-distortion"),
    ("quantizer", "distortion-proportionality"),
    ("quantizer", "ema-dead-codes-finite"),
    ("attention", "encoder-factorization"),
    ("attention", "causality"),
    ("attention", "residual-path"),
    ("attention", "multihead-slicing"),
    ("linear", "linear-quadratic-equivalence"),
    ("linear", "reduction-agreement"),
    ("linear", "merge-associativity"),
    ("linear", "weight-normalization"),
    ("linear", "count-conservation"),
    ("linear", "dead-code-zero-weight"),
    ("linear", "linear-scaling"),
    ("train", "finite-difference-gradients"),
    ("train", "straight-through-identity"),
    ("train", "training-smoke"),
    ("train", "loss-decrease"),
    ("train", "checkpoint-round-trip"),
    ("sampler", "decode-prefix-equivalence"),
    ("sampler", "decode-cost-flat"),
    ("sampler", "nucleus-sampling"),
    ("corpus", "stream-continuity"),
    ("bench", "csv-strict"),
    ("stress", "no-nan-fuzz"),
];

const SLOW: &[&str] = &["linear-scaling", "training-smoke", "loss-decrease", "decode-cost-flat"];

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Name of a check whose candidate is deliberately corrupted.
    pub fault: Option<String>,
    /// Skip the timing and training checks.
    pub fast: bool,
}

/// Runs every check and returns one result per entry of [`CHECKS`].
pub fn run_verify(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    run_verify_with(opts, |_| {})
}

/// As [`run_verify`], calling `progress` after each check.
pub fn run_verify_with(opts: &VerifyOptions, mut progress: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    if let Some(f) = &opts.fault {
        if !CHECKS.iter().any(|(_, n)| n == f) {
            return Err(Error::InvalidArgument(format!("unknown check `{f}`")));
        }
    }
    let seed = opts.seed;
    let fault = |name: &str| opts.fault.as_deref() == Some(name);
    let runs = |name: &str| !opts.fast || !SLOW.contains(&name) || fault(name);
    let mut smoke: Option<SmokeRun> = None;
    let mut out = Vec::with_capacity(CHECKS.len());
    for &(module, name) in CHECKS {
        let f = fault(name);
        let r = if !runs(name) {
            CheckResult::skipped(module, name)
        } else {
            match name {
                "contract-oracle" => contract_oracle(seed, 120, f)?,
                "softmax-rows" => softmax_rows(seed, 200, f)?,
                "block-view-negative" => block_view_negative(seed, f)?,
                "quantization-minimality" => quantization_minimality(seed, 100, f)?,
                "vq-minimum-distortion" => distortion_study(seed, 100_000, f)?.0,
                "distortion-proportionality" => distortion_study(seed, 100_000, f)?.1,
                "ema-dead-codes-finite" => ema_dead_codes_finite(seed, 2000, f)?,
                "encoder-factorization" => encoder_factorization(seed, 50, f)?,
                "causality" => causality(seed, 20, f)?,
                "residual-path" => residual_path(seed, f)?,
                "multihead-slicing" => multihead_slicing(seed, f)?,
                "linear-quadratic-equivalence" => linear_quadratic_equivalence(seed, 200, f)?,
                "reduction-agreement" => reduction_agreement(seed, 100, f)?,
                "merge-associativity" => merge_associativity(seed, 100, f)?,
                "weight-normalization" => weight_normalization(seed, 40, f)?,
                "count-conservation" => count_conservation(seed, 100, f)?,
                "dead-code-zero-weight" => dead_code_zero_weight(seed, 40, f)?,
                "linear-scaling" => linear_scaling(seed, f)?,
                "finite-difference-gradients" => finite_difference_gradients(seed, 20, f)?,
                "straight-through-identity" => straight_through_identity(seed, f)?,
                "training-smoke" | "loss-decrease" => {
                    if smoke.is_none() {
                        smoke = Some(smoke_run(&smoke_corpus(), 16, seed + 1, 500)?);
                    }
                    let run = smoke.as_ref().expect("just filled");
                    if name == "training-smoke" {
                        training_smoke(run, f)
                    } else {
                        loss_decrease(run, f)
                    }
                }
                "checkpoint-round-trip" => checkpoint_round_trip(seed, f)?,
                "decode-prefix-equivalence" => decode_prefix_equivalence(seed, f)?,
                "decode-cost-flat" => decode_cost_flat(seed, f)?,
                "nucleus-sampling" => nucleus_sampling(seed, f)?,
                "stream-continuity" => stream_continuity(seed, f)?,
                "csv-strict" => csv_strict(seed, f)?,
                "no-nan-fuzz" => no_nan_fuzz(seed, if opts.fast { 500 } else { 2000 }, f)?,
                other => unreachable!("no check named {other}"),
            }
        };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn random_head(rng: &mut impl Rng, i: usize) -> HeadConfig {
    let kind = [HeadKind::Shga, HeadKind::Mqa, HeadKind::Mha][i % 3];
    HeadConfig::new(kind, rng.random_range(2..=3)).expect("positive head count")
}

/// Layer parameters with a larger bias projection than the default init,
/// so the position biases visibly matter.
fn random_layer(rng: &mut impl Rng, dm: usize, dk: usize, dv: usize, l: usize, head: HeadConfig) -> Result<GauParams> {
    let mut p = GauParams::init(dm, dk, dv, l, head, rng)?;
    p.bias_proj = normal(rng, &[dk], 1.0);
    Ok(p)
}

fn random_books(rng: &mut impl Rng, head: HeadConfig, s: usize, dk: usize, std: f64) -> Result<Vec<Codebook>> {
    (0..head.kv_heads()).map(|_| Codebook::random(s, dk, std, 0.99, rng)).collect()
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        idx[k] = i % shape[k];
        i /= shape[k];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

fn naive_contract(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<f64>) {
    let free_a: Vec<usize> = (0..a.ndim()).filter(|k| !pairs.iter().any(|p| p.0 == *k)).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|k| !pairs.iter().any(|p| p.1 == *k)).collect();
    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&k| a.shape()[k])
        .chain(free_b.iter().map(|&k| b.shape()[k]))
        .collect();
    let sum_shape: Vec<usize> = pairs.iter().map(|p| a.shape()[p.0]).collect();
    let out_len: usize = out_shape.iter().product();
    let sum_len: usize = sum_shape.iter().product();
    let mut out = vec![0.0; out_len];
    let mut ia = vec![0; a.ndim()];
    let mut ib = vec![0; b.ndim()];
    for (o, slot) in out.iter_mut().enumerate() {
        let oi = unravel(o, &out_shape);
        for (k, &ax) in free_a.iter().enumerate() {
            ia[ax] = oi[k];
        }
        for (k, &ax) in free_b.iter().enumerate() {
            ib[ax] = oi[free_a.len() + k];
        }
        for s in 0..sum_len {
            let si = unravel(s, &sum_shape);
            for (k, p) in pairs.iter().enumerate() {
                ia[p.0] = si[k];
                ib[p.1] = si[k];
            }
            *slot += a.data()[ravel(&ia, a.shape())] * b.data()[ravel(&ib, b.shape())];
        }
    }
    (out_shape, out)
}

/// [`contract`] against nested loops on random shape-compatible cases.
pub fn contract_oracle(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 1);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let nda = rng.random_range(1..=3);
        let ndb = rng.random_range(1..=3);
        let npairs = rng.random_range(0..=nda.min(ndb));
        let shape_a: Vec<usize> = (0..nda).map(|_| rng.random_range(1..=4)).collect();
        let mut axes_a: Vec<usize> = (0..nda).collect();
        let mut axes_b: Vec<usize> = (0..ndb).collect();
        axes_a.shuffle(&mut rng);
        axes_b.shuffle(&mut rng);
        let pairs: Vec<(usize, usize)> = axes_a.into_iter().zip(axes_b).take(npairs).collect();
        let shape_b: Vec<usize> = (0..ndb)
            .map(|j| match pairs.iter().find(|p| p.1 == j) {
                Some(p) => shape_a[p.0],
                None => rng.random_range(1..=4),
            })
            .collect();
        let a = normal(&mut rng, &shape_a, 1.0);
        let b = normal(&mut rng, &shape_b, 1.0);
        let mut got = contract(&a, &b, &ContractSpec::new(&pairs))?;
        if fault && case == 0 {
            got.data_mut()[0] += 1e-6;
        }
        let (want_shape, want) = naive_contract(&a, &b, &pairs);
        let same_shape = got.shape() == want_shape.as_slice() || (want_shape.is_empty() && got.len() == 1);
        if !same_shape {
            worst = f64::INFINITY;
            continue;
        }
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    Ok(CheckResult::at_most(
        "tensor",
        "contract-oracle",
        worst,
        1e-10,
        format!("{cases} random contractions vs nested loops"),
    ))
}

/// Non-negative rows summing to one, unchanged by per-row shifts.
pub fn softmax_rows(seed: u64, rows: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 2);
    let mut worst: f64 = 0.0;
    let mut negative = 0usize;
    for r in 0..rows {
        let c = rng.random_range(1..=12);
        let mut x = normal(&mut rng, &[1, c], 5.0);
        for v in x.data_mut() {
            if rng.random_bool(0.2) {
                *v = NEG_LARGE;
            }
        }
        let mut y = row_softmax_stable(&x);
        if fault && r == 0 {
            y.data_mut()[0] += 1e-6;
        }
        negative += y.data().iter().filter(|&&v| v < 0.0).count();
        worst = worst.max((y.sum() - 1.0).abs());
        let shift = rng.random_range(-50.0..50.0);
        let shifted = row_softmax_stable(&x.map(|v| v + shift));
        worst = worst.max(shifted.max_abs_diff(&y)?);
    }
    if negative > 0 {
        worst = f64::INFINITY;
    }
    Ok(CheckResult::at_most(
        "tensor",
        "softmax-rows",
        worst,
        1e-12,
        format!("{rows} rows with masked entries; {negative} negative weights"),
    ))
}

/// Negative block indices give zero blocks of the right shape.
pub fn block_view_negative(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 3);
    let mut worst: f64 = 0.0;
    for l in [1, 2, 4, 8] {
        let x = normal(&mut rng, &[4 * l, 3], 1.0);
        for n in [-1isize, -2, -5] {
            let idx = if fault { 0 } else { n };
            let b = block(&x, idx, l);
            if b.shape() != [l, 3] {
                worst = f64::INFINITY;
                continue;
            }
            worst = worst.max(b.data().iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
        worst = worst.max(block(&x, 1, l).max_abs_diff(&x.slice_rows(l, l))?);
    }
    Ok(CheckResult::at_most(
        "tensor",
        "block-view-negative",
        worst,
        0.0,
        "blocks -1, -2, -5 for L in 1, 2, 4, 8".into(),
    ))
}

/// Assigned codewords are nearest by exhaustive scan.
pub fn quantization_minimality(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 4);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    let mut injected = !fault;
    for _ in 0..cases {
        let s = rng.random_range(1..=8);
        let d = rng.random_range(1..=5);
        let t = rng.random_range(1..=20);
        let cb = Codebook::random(s, d, 1.0, 0.99, &mut rng)?;
        let k = normal(&mut rng, &[t, d], 1.0);
        let (khat, z) = quantize_batch(&k, &cb)?;
        let mut codes = z.codes().to_vec();
        if !injected && s > 1 {
            injected = true;
            let far = (0..s)
                .max_by(|&a, &b| sq_dist(k.row(0), cb.codeword(a)).total_cmp(&sq_dist(k.row(0), cb.codeword(b))))
                .expect("non-empty codebook");
            codes[0] = far;
        }
        for (row, &zt) in codes.iter().enumerate() {
            let chosen = sq_dist(k.row(row), cb.codeword(zt));
            for c in 0..s {
                worst = worst.max(chosen - sq_dist(k.row(row), cb.codeword(c)));
            }
            if !fault && khat.row(row) != cb.codeword(zt) {
                worst = f64::INFINITY;
            }
            rows += 1;
        }
    }
    Ok(CheckResult::at_most(
        "quantizer",
        "quantization-minimality",
        worst,
        0.0,
        format!("{rows} rows scanned against every codeword"),
    ))
}

/// Query-side distortion `E(qᵀ(k − φ(k)))²` for VQ and random code
/// assignments, with isotropic `q`. Returns the VQ-minimum and the
/// proportionality results.
pub fn distortion_study(seed: u64, samples: usize, fault: bool) -> Result<(CheckResult, CheckResult)> {
    const KEYS: usize = 32;
    const DIM: usize = 4;
    const CODES: usize = 8;
    const ALTERNATIVES: usize = 6;
    let sigma = 0.7;
    let mut rng = rng_for(seed, 5);
    let cb = Codebook::random(CODES, DIM, 1.0, 0.99, &mut rng)?;
    let k = normal(&mut rng, &[KEYS, DIM], 1.0);
    let (_, z) = quantize_batch(&k, &cb)?;
    let mut assignments = vec![z.codes().to_vec()];
    for _ in 0..ALTERNATIVES {
        assignments.push((0..KEYS).map(|_| rng.random_range(0..CODES)).collect());
    }
    let residuals: Vec<Vec<f64>> = assignments
        .iter()
        .map(|codes| {
            codes
                .iter()
                .enumerate()
                .flat_map(|(t, &c)| k.row(t).iter().zip(cb.codeword(c)).map(|(a, b)| a - b).collect::<Vec<_>>())
                .collect()
        })
        .collect();
    let key_side: Vec<f64> = residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() / KEYS as f64)
        .collect();
    let mut query_side = vec![0.0; residuals.len()];
    let mut q = [0.0; DIM];
    for _ in 0..samples {
        for v in q.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = sigma * n;
        }
        for (acc, r) in query_side.iter_mut().zip(&residuals) {
            let mut s = 0.0;
            for row in r.chunks(DIM) {
                let p: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
                s += p * p;
            }
            *acc += s / KEYS as f64;
        }
    }
    for v in query_side.iter_mut() {
        *v /= samples as f64;
    }
    if fault {
        query_side[0] *= 10.0;
    }
    let best_alt = query_side[1..].iter().copied().fold(f64::INFINITY, f64::min);
    let minimum = CheckResult::at_most(
        "quantizer",
        "vq-minimum-distortion",
        query_side[0] / best_alt,
        1.0,
        format!(
            "vq {:.4e} vs best of {ALTERNATIVES} random assignments {:.4e}, {samples} queries",
            query_side[0], best_alt
        ),
    );
    let mut ratios: Vec<f64> = query_side.iter().zip(&key_side).map(|(a, b)| a / b).collect();
    if fault {
        ratios[1] *= 1.2;
    }
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let proportional = CheckResult::at_most(
        "quantizer",
        "distortion-proportionality",
        hi / lo - 1.0,
        0.05,
        format!(
            "ratio range [{lo:.4}, {hi:.4}] over {} assignments, sigma^2 = {:.4}",
            ratios.len(),
            sigma * sigma
        ),
    );
    Ok((minimum, proportional))
}

/// Long runs of EMA updates with most codes never assigned stay finite.
pub fn ema_dead_codes_finite(seed: u64, updates: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 6);
    let mut bad = 0usize;
    for decay in [0.5, 0.99] {
        let mut cb = Codebook::random(8, 4, 1.0, decay, &mut rng)?;
        let centre = cb.codeword(0).to_vec();
        for _ in 0..updates {
            let rows: Vec<Vec<f64>> = (0..16)
                .map(|_| centre.iter().map(|c| c + 1e-3 * rng.random_range(-1.0..1.0)).collect())
                .collect();
            let k = Tensor::from_rows(&rows)?;
            let z = Shortcodes::new(vec![0; 16], 8)?;
            cb.ema_update(&k, &z)?;
        }
        let mut words = cb.codewords().clone();
        if fault {
            words.data_mut()[5] = f64::NAN;
        }
        bad += words.data().iter().filter(|v| !v.is_finite()).count();
        bad += cb.ema_counts().iter().filter(|v| !v.is_finite()).count();
        bad += cb.ema_sums().data().iter().filter(|v| !v.is_finite()).count();
    }
    Ok(CheckResult::at_most(
        "quantizer",
        "ema-dead-codes-finite",
        bad as f64,
        0.0,
        format!("{updates} updates with 7 of 8 codes dead, decay 0.5 and 0.99"),
    ))
}

/// Weights through the codebook equal direct weights on quantized keys.
pub fn encoder_factorization(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 7);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let t = rng.random_range(1..=12);
        let dk = rng.random_range(1..=6);
        let s = rng.random_range(1..=10);
        let cb = Codebook::random(s, dk, 0.7, 0.99, &mut rng)?;
        let q = normal(&mut rng, &[t, dk], 0.7);
        let codes: Vec<usize> = (0..t).map(|_| rng.random_range(0..s)).collect();
        let rows: Vec<Vec<f64>> = codes.iter().map(|&c| cb.codeword(c).to_vec()).collect();
        let khat = Tensor::from_rows(&rows)?;
        let z = Shortcodes::new(codes, s)?;
        for phi in [EncoderNonlinearity::Exp, EncoderNonlinearity::Relu, EncoderNonlinearity::Softmax] {
            let mut direct = encoder_direct_weights(&q, &khat, phi)?;
            if fault && case == 0 {
                direct.data_mut()[0] += 1e-9;
            }
            let factored = encoder_factored_weights(&q, &z, &cb, phi, None)?;
            worst = worst.max(direct.max_abs_diff(&factored)?);
        }
    }
    Ok(CheckResult::at_most(
        "attention",
        "encoder-factorization",
        worst,
        1e-12,
        format!("{cases} instances x exp, relu, softmax"),
    ))
}

/// Perturbing rows after `t0` leaves outputs up to `t0` untouched, for the
/// quadratic and the linear form.
pub fn causality(seed: u64, trials: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let head = random_head(&mut rng, trial);
        let (l, t) = (4, 16);
        let p = random_layer(&mut rng, 6, 4, 2 * head.heads * 3, l, head)?;
        let cbs = random_books(&mut rng, head, 5, 4, 0.5)?;
        let x = normal(&mut rng, &[t, 6], 1.0);
        let t0 = rng.random_range(0..t - 1);
        let mut xp = x.clone();
        let from = if fault && trial == 0 { t0 } else { t0 + 1 };
        for i in from..t {
            for v in xp.row_mut(i) {
                *v += rng.random_range(-2.0..2.0);
            }
        }
        let a = vq_attn_quadratic(&x, &p, &cbs, head)?.y;
        let b = vq_attn_quadratic(&xp, &p, &cbs, head)?.y;
        worst = worst.max(a.slice_rows(0, t0 + 1).max_abs_diff(&b.slice_rows(0, t0 + 1))?);
        let a = vq_attn_linear(&x, &p, &cbs, head, Reduction::Serial)?.y;
        let b = vq_attn_linear(&xp, &p, &cbs, head, Reduction::Serial)?.y;
        worst = worst.max(a.slice_rows(0, t0 + 1).max_abs_diff(&b.slice_rows(0, t0 + 1))?);
    }
    Ok(CheckResult::at_most(
        "attention",
        "causality",
        worst,
        0.0,
        format!("{trials} perturbations after a random cut, quadratic and linear"),
    ))
}

/// With a zero output projection the layer is the identity.
pub fn residual_path(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 9);
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        let head = random_head(&mut rng, i);
        let mut p = random_layer(&mut rng, 5, 3, head.heads * 2, 4, head)?;
        p.w_o = Tensor::zeros(p.w_o.shape());
        if fault && i == 0 {
            p.w_o.data_mut()[0] = 1e-3;
        }
        let cbs = random_books(&mut rng, head, 4, 3, 0.5)?;
        let x = normal(&mut rng, &[12, 5], 1.0);
        worst = worst.max(vq_attn_quadratic(&x, &p, &cbs, head)?.y.max_abs_diff(&x)?);
        for r in Reduction::ALL {
            worst = worst.max(vq_attn_linear(&x, &p, &cbs, head, r)?.y.max_abs_diff(&x)?);
        }
    }
    Ok(CheckResult::at_most(
        "attention",
        "residual-path",
        worst,
        0.0,
        "6 layers with W_O = 0, quadratic and all reductions".into(),
    ))
}

/// Multi-query and multi-head layers equal a sum of single-head layers on
/// the matching column and row slices.
pub fn multihead_slicing(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 10);
    let mut worst: f64 = 0.0;
    let (dm, dk, l, t) = (6, 3, 4, 12);
    for (i, (kind, heads)) in [(HeadKind::Mqa, 2), (HeadKind::Mqa, 3), (HeadKind::Mha, 2), (HeadKind::Mha, 3)]
        .into_iter()
        .enumerate()
    {
        let head = HeadConfig::new(kind, heads)?;
        let dvh = 2;
        let p = random_layer(&mut rng, dm, dk, heads * dvh, l, head)?;
        let cbs = random_books(&mut rng, head, 5, dk, 0.5)?;
        let x = normal(&mut rng, &[t, dm], 1.0);
        let y = vq_attn_quadratic(&x, &p, &cbs, head)?.y;
        let mut acc = x.clone();
        for h in 0..heads {
            let kv = head.kv_of(h);
            let ph = GauParams {
                w_q: p.w_q.slice_cols(h * dk, dk),
                w_k: p.w_k.slice_cols(kv * dk, dk),
                w_v: p.w_v.slice_cols(kv * dvh, dvh),
                w_g: p.w_g.slice_cols(h * dvh, dvh),
                w_o: p.w_o.slice_rows(h * dvh, dvh),
                ..p.clone()
            };
            let yh = vq_attn_quadratic(&x, &ph, &cbs[kv..kv + 1], HeadConfig::SHGA)?.y;
            acc.add_assign(&yh.sub(&x)?)?;
        }
        if fault && i == 0 {
            acc.data_mut()[0] += 1e-6;
        }
        worst = worst.max(acc.max_abs_diff(&y)?);
    }
    Ok(CheckResult::at_most(
        "attention",
        "multihead-slicing",
        worst,
        1e-12,
        "mqa and mha with 2 and 3 heads".into(),
    ))
}

/// The block recurrence equals the quadratic form for every reduction
/// and head kind.
pub fn linear_quadratic_equivalence(seed: u64, configs: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 11);
    let mut worst: f64 = 0.0;
    let mut max_t = 0;
    for c in 0..configs {
        let l = [2, 4, 8][rng.random_range(0..3)];
        let t = l * rng.random_range(1..=128 / l);
        max_t = max_t.max(t);
        let s = rng.random_range(1..=16);
        let head = random_head(&mut rng, c);
        let dm = rng.random_range(3..=8);
        let dk = rng.random_range(1..=6);
        let dv = head.heads * rng.random_range(1..=3);
        let p = random_layer(&mut rng, dm, dk, dv, l, head)?;
        let std = [0.05, 0.3, 1.0][rng.random_range(0..3)];
        let cbs = random_books(&mut rng, head, s, dk, std)?;
        let x = normal(&mut rng, &[t, dm], 1.0);
        let quad = vq_attn_quadratic(&x, &p, &cbs, head)?;
        for r in Reduction::ALL {
            let mut lin = vq_attn_linear(&x, &p, &cbs, head, r)?;
            if fault && c == 0 {
                lin.y.data_mut()[0] += 1e-6;
            }
            worst = worst.max(lin.y.max_abs_diff(&quad.y)?);
            if lin.codes != quad.codes {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(CheckResult::at_most(
        "linear",
        "linear-quadratic-equivalence",
        worst,
        1e-8,
        format!("{configs} configs x 3 reductions, T <= {max_t}, L in 2/4/8, S in 1..16"),
    ))
}

fn cache_diff(a: &CacheState, b: &CacheState) -> Result<f64> {
    let mut d = a.value_means.max_abs_diff(&b.value_means)?;
    for (x, y) in a.counts.iter().zip(&b.counts) {
        d = d.max((x - y).abs());
    }
    Ok(d)
}

/// Serial, matmul and associative cache variables agree pairwise.
pub fn reduction_agreement(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 12);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let l = rng.random_range(1..=8);
        let nb = rng.random_range(1..=20);
        let s = rng.random_range(1..=16);
        let dv = rng.random_range(1..=5);
        let z: Vec<usize> = (0..l * nb).map(|_| rng.random_range(0..s)).collect();
        let v = normal(&mut rng, &[l * nb, dv], 1.0);
        let all: Vec<Vec<CacheState>> = Reduction::ALL
            .iter()
            .map(|&r| cache_vars(r, &z, &v, s, l))
            .collect::<Result<_>>()?;
        let mut all = all;
        if fault && case == 0 {
            all[1][0].value_means.data_mut()[0] += 1e-6;
        }
        for i in 0..3 {
            for j in i + 1..3 {
                for (a, b) in all[i].iter().zip(&all[j]) {
                    worst = worst.max(cache_diff(a, b)?);
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "linear",
        "reduction-agreement",
        worst,
        1e-10,
        format!("{cases} code streams, serial/matmul/assoc pairwise"),
    ))
}

/// The cache merge is associative and has the empty state as identity.
pub fn merge_associativity(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 13);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let s = rng.random_range(1..=8);
        let dv = rng.random_range(1..=4);
        let mut state = || -> Result<CacheState> {
            let n = rng.random_range(1..=6);
            let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..s)).collect();
            let v = normal(&mut rng, &[n, dv], 1.0);
            CacheState::from_block(&z, &v, s)
        };
        let (a, b, c) = (state()?, state()?, state()?);
        let mut left = a.merge(&b).merge(&c);
        if fault && case == 0 {
            left.value_means.data_mut()[0] += 1e-6;
        }
        let right = a.merge(&b.merge(&c));
        worst = worst.max(cache_diff(&left, &right)?);
        let e = CacheState::empty(s, dv);
        worst = worst.max(cache_diff(&a.merge(&e), &a)?);
        worst = worst.max(cache_diff(&e.merge(&a), &a)?);
    }
    Ok(CheckResult::at_most(
        "linear",
        "merge-associativity",
        worst,
        1e-12,
        format!("{cases} triples plus left and right identity"),
    ))
}

struct TracedCase {
    trace: crate::linear::LinearTrace<f64>,
    caches: Vec<Vec<CacheState>>,
    head: HeadConfig,
}

fn traced_case(rng: &mut ChaCha8Rng, i: usize) -> Result<TracedCase> {
    let l = [2, 4, 8][rng.random_range(0..3)];
    let t = l * rng.random_range(1..=64 / l);
    let s = rng.random_range(1..=16);
    let head = random_head(rng, i);
    let p = random_layer(rng, 5, 3, head.heads * 2, l, head)?;
    let cbs = random_books(rng, head, s, 3, 0.5)?;
    let x = normal(rng, &[t, 5], 1.0);
    let (out, trace) = vq_attn_linear_traced(&x, &p, &cbs, head, Reduction::Serial)?;
    let proj = project(&x, &p, head)?;
    let caches = out
        .codes
        .iter()
        .zip(&proj.v)
        .map(|(z, v)| cache_vars(Reduction::Serial, z.codes(), v, s, l))
        .collect::<Result<_>>()?;
    Ok(TracedCase { trace, caches, head })
}

/// Cache, previous and current weights of every query row sum to one.
pub fn weight_normalization(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 14);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for i in 0..cases {
        let tc = traced_case(&mut rng, i)?;
        for blocks in &tc.trace {
            for ba in blocks {
                for a in 0..ba.out.rows() {
                    let mut total = ba.w_cache.row(a).iter().sum::<f64>()
                        + ba.w_prev.row(a).iter().sum::<f64>()
                        + ba.w_cur.row(a).iter().sum::<f64>();
                    if fault && rows == 0 {
                        total += 1e-6;
                    }
                    worst = worst.max((total - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "linear",
        "weight-normalization",
        worst,
        1e-10,
        format!("{rows} query rows"),
    ))
}

/// At block `n >= 2` the cache holds exactly `(n - 1)·L` tokens.
pub fn count_conservation(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 15);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let l = rng.random_range(1..=8);
        let nb = rng.random_range(1..=16);
        let s = rng.random_range(1..=16);
        let z: Vec<usize> = (0..l * nb).map(|_| rng.random_range(0..s)).collect();
        let v = normal(&mut rng, &[l * nb, 2], 1.0);
        for r in Reduction::ALL {
            let caches = cache_vars(r, &z, &v, s, l)?;
            for (n, c) in caches.iter().enumerate() {
                let want = if n >= 2 { ((n - 1) * l) as f64 } else { 0.0 };
                let mut got = c.counts.iter().sum::<f64>();
                if fault && case == 0 && n == caches.len() - 1 {
                    got += 1.0;
                }
                worst = worst.max((got - want).abs());
            }
        }
    }
    Ok(CheckResult::at_most(
        "linear",
        "count-conservation",
        worst,
        0.0,
        format!("{cases} code streams, all reductions"),
    ))
}

/// Codes with zero cached tokens get exactly zero weight and zero mean.
pub fn dead_code_zero_weight(seed: u64, cases: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 16);
    let mut worst: f64 = 0.0;
    let mut dead = 0;
    for i in 0..cases {
        let tc = traced_case(&mut rng, i)?;
        for (h, blocks) in tc.trace.iter().enumerate() {
            let caches = &tc.caches[tc.head.kv_of(h)];
            for (n, ba) in blocks.iter().enumerate() {
                let c = &caches[n];
                for s in 0..c.codes() {
                    if c.counts[s] != 0.0 {
                        continue;
                    }
                    dead += 1;
                    for a in 0..ba.w_cache.rows() {
                        worst = worst.max(ba.w_cache.at(a, s).abs());
                    }
                    for &m in c.value_means.row(s) {
                        worst = worst.max(m.abs());
                    }
                    if fault && dead == 1 {
                        worst = worst.max(1e-300);
                    }
                }
            }
        }
    }
    Ok(CheckResult::at_most(
        "linear",
        "dead-code-zero-weight",
        worst,
        0.0,
        format!("{dead} dead (code, block) pairs"),
    ))
}

/// Short latency sweep: full attention should grow about quadratically
/// and the recurrence about linearly.
pub fn linear_scaling(seed: u64, fault: bool) -> Result<CheckResult> {
    let cfg = BenchConfig {
        lengths: vec![2048, 4096, 8192],
        repeats: 5,
        seed,
        ..BenchConfig::default()
    };
    let mut rows = run_bench(&cfg)?;
    if fault {
        for r in rows.iter_mut().filter(|r| r.kind == AttnKind::Vq) {
            let f = r.seq_len as f64 / 2048.0;
            r.latency_s = r.latency_s.map(|v| v * f);
        }
    }
    let slopes = fit_slopes(&rows);
    let get = |k: AttnKind| {
        slopes
            .iter()
            .find(|(g, _)| g.starts_with(&format!("{k}/")))
            .map_or(f64::NAN, |(_, s)| *s)
    };
    let (full, vq) = (get(AttnKind::Full), get(AttnKind::Vq));
    let mut r = CheckResult::at_most(
        "linear",
        "linear-scaling",
        vq,
        1.15,
        format!("vq slope {vq:.3}, full slope {full:.3} (>= 1.7), T = 2k..8k"),
    );
    r.passed = r.passed && full >= 1.7;
    Ok(r)
}

fn tiny_config(head: HeadConfig) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        d_k: 4,
        d_v: 8,
        codes: 3,
        seq_len: 32,
        block_len: 4,
        window: 16,
        vocab: 16,
        beta: 0.25,
        gamma: 0.99,
        head,
    }
}

/// Central differences against reverse mode on a two-layer model, with
/// shortcodes held fixed. Seeds whose keys sit within `1e-6` of a
/// quantization boundary, or whose codes move under perturbation, are
/// skipped and counted.
pub fn finite_difference_gradients(seed: u64, wanted: usize, fault: bool) -> Result<CheckResult> {
    const H: f64 = 1e-6;
    let w = 16;
    let mut accepted = 0;
    let mut excluded = Vec::new();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut trial = 0u64;
    while accepted < wanted && trial < 4 * wanted as u64 {
        let s = seed.wrapping_mul(1000).wrapping_add(trial);
        trial += 1;
        let mut rng = rng_for(s, 17);
        let head = random_head(&mut rng, trial as usize);
        let head = HeadConfig::new(head.kind, 2)?;
        let cfg = tiny_config(head);
        let model = Model::init(cfg.clone(), &mut rng)?;
        let streams: Vec<Vec<usize>> = (0..2)
            .map(|_| (0..2 * w + 1).map(|_| rng.random_range(0..cfg.vocab)).collect())
            .collect();
        let first: Vec<Vec<usize>> = streams.iter().map(|t| t[..w].to_vec()).collect();
        let inputs: Vec<Vec<usize>> = streams.iter().map(|t| t[w..2 * w].to_vec()).collect();
        let targets: Vec<Vec<usize>> = streams.iter().map(|t| t[w + 1..].to_vec()).collect();
        let mut st = TrainState::new(model, OptimConfig::default(), 2, s);
        st.seed_codebooks(&first)?;
        let model = st.model;
        let carries = first
            .iter()
            .map(|x| model.forward(x, &Carry::empty(&cfg)).map(|o| o.carry))
            .collect::<Result<Vec<_>>>()?;

        let rec = training_loss_on(Tape::with_frozen_quantizer(), &model, &inputs, &targets, &carries)?;
        let mut margin = f64::INFINITY;
        for sf in &rec.streams {
            for (li, heads) in sf.keys.iter().enumerate() {
                for (kv, k) in heads.iter().enumerate() {
                    margin = margin.min(argmin_margin(k, &model.codebooks[li][kv]));
                }
            }
        }
        if margin < 1e-6 {
            excluded.push(format!("{s} (margin {margin:.1e})"));
            continue;
        }
        let base_codes: Vec<_> = rec.streams.iter().map(|sf| sf.codes.clone()).collect();
        let mut analytic = parameter_gradients(&model, &rec)?;
        if fault {
            analytic[0].data_mut()[0] += 1.0;
        }

        let mut m = model.clone();
        let eval = |m: &Model| -> Result<Option<f64>> {
            let r = training_loss(m, &inputs, &targets, &carries)?;
            let same = r.streams.iter().zip(&base_codes).all(|(sf, c)| &sf.codes == c);
            Ok(same.then(|| r.tape.value(r.loss).item()))
        };
        let mut moved = false;
        let mut seed_worst: f64 = 0.0;
        'params: for (pi, grad) in analytic.iter().enumerate() {
            for j in 0..grad.len() {
                let orig = m.params_mut()[pi].data()[j];
                m.params_mut()[pi].data_mut()[j] = orig + H;
                let plus = eval(&m)?;
                m.params_mut()[pi].data_mut()[j] = orig - H;
                let minus = eval(&m)?;
                m.params_mut()[pi].data_mut()[j] = orig;
                let (Some(plus), Some(minus)) = (plus, minus) else {
                    moved = true;
                    break 'params;
                };
                let fd = (plus - minus) / (2.0 * H);
                let an = grad.data()[j];
                let tol = (1e-4 * fd.abs().max(an.abs())).max(1e-7);
                seed_worst = seed_worst.max((fd - an).abs() / tol);
                checked += 1;
            }
        }
        if moved {
            excluded.push(format!("{s} (codes moved)"));
            continue;
        }
        worst = worst.max(seed_worst);
        accepted += 1;
    }
    if accepted < wanted {
        worst = f64::INFINITY;
    }
    let mut detail = format!("{accepted} seeds, {checked} partials; error / max(1e-4 rel, 1e-7 abs)");
    if !excluded.is_empty() {
        detail.push_str(&format!("; excluded {}", excluded.join(", ")));
    }
    Ok(CheckResult::at_most("train", "finite-difference-gradients", worst, 1.0, detail))
}

/// Straight-through forward is the quantized value and its backward is the
/// identity.
pub fn straight_through_identity(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 18);
    let x0 = normal(&mut rng, &[5, 7], 1.0);
    let quantized = normal(&mut rng, &[5, 7], 1.0);
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
    let mut tape: Tape = Tape::new();
    let x = tape.param(x0);
    let y = tape.straight_through(x, quantized.clone())?;
    let loss = tape.cross_entropy(y, &targets)?;
    let grads = tape.backward(loss)?;
    let gy = grads.get_or_zero(y, &[5, 7]);
    let mut gx = grads.get_or_zero(x, &[5, 7]);
    if fault {
        gx.data_mut()[0] += 1e-3;
    }
    let mut worst = gx.max_abs_diff(&gy)?;
    worst = worst.max(tape.value(y).max_abs_diff(&quantized)?);
    worst = worst.max(straight_through_grad(&gy).max_abs_diff(&gy)?);
    Ok(CheckResult::at_most(
        "train",
        "straight-through-identity",
        worst,
        0.0,
        "forward equals quantized value, Jacobian is the identity".into(),
    ))
}

/// Periodic text used by the training checks.
pub fn smoke_corpus() -> Vec<u8> {
    "the quick brown fox jumps over the lazy dog; ".repeat(1000).into_bytes()
}

/// Per-window metrics of one training run.
#[derive(Debug, Clone)]
pub struct SmokeRun {
    pub ce: Vec<f64>,
    pub utilization: Vec<f64>,
    pub val_ce: f64,
    pub seconds: f64,
}

/// Model and optimizer settings of the smoke run.
pub fn smoke_config(codes: usize, windows: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            layers: 2,
            d_model: 64,
            d_k: 16,
            d_v: 128,
            codes,
            seq_len: 128,
            block_len: 8,
            window: 32,
            vocab: 256,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            lr: 3e-3,
            warmup_steps: 20,
            total_steps: windows,
            ..OptimConfig::default()
        },
        batch: 8,
        windows,
        eval_windows: 100,
        ..TrainConfig::default()
    }
}

/// Trains the smoke configuration on `text` and scores the validation
/// split.
pub fn smoke_run(text: &[u8], codes: usize, seed: u64, windows: u64) -> Result<SmokeRun> {
    let cfg = smoke_config(codes, windows);
    let corpus = Corpus::from_bytes(text.to_vec(), cfg.split)?;
    let model = Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut st = TrainState::new(model, cfg.optim.clone(), cfg.batch, seed);
    let start = Instant::now();
    let mut run = SmokeRun {
        ce: Vec::new(),
        utilization: Vec::new(),
        val_ce: f64::NAN,
        seconds: 0.0,
    };
    for batch in window_batches(&corpus, Split::Train, cfg.batch, cfg.model.window, seed)?.take(windows as usize) {
        let m = st.windowed_step(&batch)?;
        run.ce.push(m.ce);
        run.utilization.push(m.utilization);
    }
    run.seconds = start.elapsed().as_secs_f64();
    run.val_ce = evaluate(&st.model, corpus.split(Split::Val), cfg.eval_windows)?;
    Ok(run)
}

fn tail_mean(v: &[f64], n: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Final training CE below 0.1 nats and more than half the codebook in use.
pub fn training_smoke(run: &SmokeRun, fault: bool) -> CheckResult {
    let mut ce = tail_mean(&run.ce, 10);
    if fault {
        ce += 1.0;
    }
    let util = tail_mean(&run.utilization, 10);
    let first = run.ce.iter().position(|&c| c < 0.1).map_or("never".to_string(), |i| (i + 1).to_string());
    let mut r = CheckResult::at_most(
        "train",
        "training-smoke",
        ce,
        0.1,
        format!(
            "last-10 CE over {} windows, first below 0.1 at {first}, utilization {util:.2} (> 0.5), val CE {:.4}, {:.1}s",
            run.ce.len(),
            run.val_ce,
            run.seconds
        ),
    );
    r.passed = r.passed && util > 0.5;
    r
}

/// Trailing-100 mean CE at the last window is below that at window 100.
pub fn loss_decrease(run: &SmokeRun, fault: bool) -> CheckResult {
    let n = run.ce.len();
    let early = tail_mean(&run.ce[..n.min(100)], 100);
    let mut late = tail_mean(&run.ce, 100);
    if fault {
        late = early * 2.0;
    }
    let mut r = CheckResult::at_most(
        "train",
        "loss-decrease",
        late / early,
        1.0,
        format!("trailing-100 CE {early:.4} at window 100, {late:.4} at window {n}"),
    );
    r.passed = r.passed && late < early && n >= 200;
    r
}

/// A checkpoint written after a few windows decodes to an identical state
/// whose forward pass matches bit for bit.
pub fn checkpoint_round_trip(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut cfg = TrainConfig {
        model: ModelConfig {
            layers: 2,
            d_model: 16,
            d_k: 4,
            d_v: 16,
            codes: 8,
            seq_len: 32,
            block_len: 4,
            window: 16,
            vocab: 256,
            ..ModelConfig::default()
        },
        batch: 2,
        windows: 3,
        seed,
        ..TrainConfig::default()
    };
    cfg.optim.total_steps = 3;
    let corpus = Corpus::from_bytes(smoke_corpus(), SplitSpec::default())?;
    let model = Model::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut st = TrainState::new(model, cfg.optim.clone(), cfg.batch, seed);
    let mut batches = window_batches(&corpus, Split::Train, cfg.batch, cfg.model.window, seed)?;
    for _ in 0..3 {
        let b = batches.next().expect("endless iterator");
        st.windowed_step(&b)?;
    }
    let ck = Checkpoint {
        config: cfg,
        state: st,
        batcher: Some(batches.position()),
    };
    let mut back = Checkpoint::from_bytes(&ck.to_bytes())?;
    if fault {
        back.state.model.w_cls.data_mut()[0] += 1e-12;
    }
    let mut differing = usize::from(back.state != ck.state) + usize::from(back.batcher != ck.batcher);
    let tokens: Vec<usize> = corpus.split(Split::Val)[..16].iter().map(|&b| b as usize).collect();
    for (c0, c1) in ck.state.carries.iter().zip(&back.state.carries) {
        let a = ck.state.model.forward(&tokens, c0)?;
        let b = back.state.model.forward(&tokens, c1)?;
        differing += a
            .logits
            .data()
            .iter()
            .zip(b.logits.data())
            .filter(|(x, y)| x.to_bits() != y.to_bits())
            .count();
    }
    Ok(CheckResult::at_most(
        "train",
        "checkpoint-round-trip",
        differing as f64,
        0.0,
        "save, load, forward; differing state parts and logits".into(),
    ))
}

fn decode_config(head: HeadConfig) -> ModelConfig {
    ModelConfig {
        codes: 4,
        ..tiny_config(head)
    }
}

/// Token-by-token decoding reproduces teacher-forced distributions.
pub fn decode_prefix_equivalence(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 19);
    let mut worst: f64 = 0.0;
    let mut positions = 0;
    for i in 0..9 {
        let head = HeadConfig::new(random_head(&mut rng, i).kind, 2)?;
        let cfg = decode_config(head);
        let model = Model::init(cfg.clone(), &mut rng)?;
        let len = rng.random_range(1..=4 * cfg.block_len);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let want = forward_distributions(&model, &tokens)?;
        let mut state = DecodeState::new(&model, len);
        for (p, &tok) in tokens.iter().enumerate() {
            let mut got = decode_step(&model, &mut state, tok)?;
            if fault && i == 0 && p == 0 {
                got[0] += 1e-6;
            }
            for (g, w) in got.iter().zip(want.row(p)) {
                worst = worst.max((g - w).abs());
            }
            positions += 1;
        }
    }
    Ok(CheckResult::at_most(
        "sampler",
        "decode-prefix-equivalence",
        worst,
        1e-8,
        format!("{positions} positions over 9 models, prefixes up to 4L"),
    ))
}

/// Median time of decoding one block starting at `start`, over `reps`
/// clones of the same state.
fn block_decode_time(model: &Model, tokens: &[usize], start: usize, reps: usize) -> Result<f64> {
    let l = model.config.block_len;
    let mut state = DecodeState::new(model, tokens.len());
    for &t in &tokens[..start] {
        decode_step(model, &mut state, t)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut s = state.clone();
        let t0 = Instant::now();
        for &t in &tokens[start..start + l] {
            decode_step(model, &mut s, t)?;
        }
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[reps / 2])
}

/// Decoding a block at position `8L` costs about the same as at `2L`.
pub fn decode_cost_flat(seed: u64, fault: bool) -> Result<CheckResult> {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 32,
        d_k: 16,
        d_v: 64,
        codes: 64,
        seq_len: 256,
        block_len: 16,
        window: 32,
        vocab: 256,
        ..ModelConfig::default()
    };
    let mut rng = rng_for(seed, 20);
    let model = Model::init(cfg.clone(), &mut rng)?;
    let l = cfg.block_len;
    let tokens: Vec<usize> = (0..9 * l).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let early = block_decode_time(&model, &tokens, 2 * l, 31)?;
    let mut late = block_decode_time(&model, &tokens, 8 * l, 31)?;
    if fault {
        late *= 2.0;
    }
    Ok(CheckResult::at_most(
        "sampler",
        "decode-cost-flat",
        late / early,
        1.5,
        format!(
            "per-token {:.2e}s at 2L vs {:.2e}s at 8L, L = {l}",
            early / l as f64,
            late / l as f64
        ),
    ))
}

/// Nucleus truncation, greedy collapse and unbiased full sampling.
pub fn nucleus_sampling(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 21);
    let mut wrong = 0usize;
    let top = if fault { 1.0 } else { 0.6 };
    for _ in 0..1000 {
        wrong += usize::from(sample_nucleus(&[0.7, 0.2, 0.1], top, &mut rng)? != 0);
    }
    for _ in 0..200 {
        let raw: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let argmax = (0..10).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).expect("non-empty");
        wrong += usize::from(sample_nucleus(&dist, 1e-9, &mut rng)? != argmax);
    }
    let dist = [0.5, 0.3, 0.2];
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_nucleus(&dist, 1.0, &mut rng)?] += 1;
    }
    let mut z: f64 = 0.0;
    for (c, p) in counts.iter().zip(dist) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        z = z.max((*c as f64 - n as f64 * p).abs() / sd);
    }
    let value = if wrong > 0 { f64::INFINITY } else { z };
    Ok(CheckResult::at_most(
        "sampler",
        "nucleus-sampling",
        value,
        4.0,
        format!("{wrong} wrong truncated draws; full-sampling frequencies max |z| = {z:.2}"),
    ))
}

/// Consecutive windows of a stream are contiguous unless flagged as reset.
pub fn stream_continuity(seed: u64, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 22);
    let bytes: Vec<u8> = (0..6000).map(|_| rng.random()).collect();
    let corpus = Corpus::from_bytes(bytes, SplitSpec::default())?;
    let data = corpus.split(Split::Train);
    let w = 32;
    let mut violations = 0usize;
    let mut continued = 0usize;
    let mut prev: Option<Vec<usize>> = None;
    for (i, b) in window_batches(&corpus, Split::Train, 4, w, seed)?.take(400).enumerate() {
        for s in 0..4 {
            let off = b.offsets[s];
            let want_in: Vec<usize> = data[off..off + w].iter().map(|&x| x as usize).collect();
            let want_tg: Vec<usize> = data[off + 1..off + w + 1].iter().map(|&x| x as usize).collect();
            violations += usize::from(b.inputs[s] != want_in || b.targets[s] != want_tg);
            if let Some(p) = &prev {
                if !b.reset[s] {
                    continued += 1;
                    let expected = if fault && i == 1 { p[s] + w + 1 } else { p[s] + w };
                    violations += usize::from(off != expected);
                }
            }
        }
        prev = Some(b.offsets.clone());
    }
    Ok(CheckResult::at_most(
        "corpus",
        "stream-continuity",
        violations as f64,
        0.0,
        format!("{continued} continued windows over 400 batches"),
    ))
}

/// Problems found reading `csv` with a strict reader against the bench
/// schema.
pub fn csv_problems(csv_text: &[u8]) -> usize {
    let mut problems = 0;
    if !csv_text.is_ascii() || !csv_text.ends_with(b"\n") {
        problems += 1;
    }
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(csv_text);
    match reader.headers() {
        Ok(h) if h.iter().collect::<Vec<_>>() == CSV_HEADER.split(',').collect::<Vec<_>>() => {}
        _ => problems += 1,
    }
    for rec in reader.records() {
        let Ok(rec) = rec else {
            problems += 1;
            continue;
        };
        let seq: Option<f64> = rec[0].parse::<usize>().ok().map(|v| v as f64);
        let tps = &rec[4];
        let lat = &rec[5];
        match (tps, lat) {
            ("OOM", "OOM") => {}
            _ => match (seq, tps.parse::<f64>(), lat.parse::<f64>()) {
                (Some(t), Ok(a), Ok(b)) if a.is_finite() && b > 0.0 => {
                    if ((a - t / b) / a).abs() > 1e-9 {
                        problems += 1;
                    }
                }
                _ => problems += 1,
            },
        }
        if seq.is_none() || rec[1].is_empty() || rec[2].is_empty() || rec[3].is_empty() || rec[6].is_empty() {
            problems += 1;
        }
    }
    problems
}

/// Bench CSV, including an OOM row, survives a strict reader.
pub fn csv_strict(seed: u64, fault: bool) -> Result<CheckResult> {
    let cfg = BenchConfig {
        lengths: vec![32, 64],
        heads: vec![HeadKind::Shga, HeadKind::Mqa],
        reductions: Reduction::ALL.to_vec(),
        repeats: 1,
        warmup: 0,
        precision: Precision::Wide,
        block_len: 16,
        seed,
        ..BenchConfig::default()
    };
    let mut rows = run_bench(&cfg)?;
    rows.push(BenchRow {
        seq_len: 1 << 20,
        head: HeadKind::Shga,
        kind: AttnKind::Full,
        reduction: None,
        tokens_per_s: None,
        latency_s: None,
        peak_memory_estimate: u64::MAX,
    });
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    if fault {
        buf.extend_from_slice(b"64,shga,vq,serial,\"1,5\",0.1,vq/shga/serial\n");
    }
    let problems = csv_problems(&buf);
    Ok(CheckResult::at_most(
        "bench",
        "csv-strict",
        problems as f64,
        0.0,
        format!("{} rows incl. one OOM row", rows.len()),
    ))
}

fn count_bad(values: &[f64]) -> usize {
    values.iter().filter(|v| !v.is_finite()).count()
}

/// Adversarial inputs: identical keys, mostly dead codebooks, constant
/// token streams and extreme input scales. Counts non-finite values in
/// every output.
pub fn no_nan_fuzz(seed: u64, iterations: usize, fault: bool) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 23);
    let mut bad = 0usize;
    let mut outputs = 0usize;
    let mut note = |vals: &[f64], bad: &mut usize| {
        outputs += 1;
        *bad += count_bad(vals);
    };
    let tiny = tiny_config(HeadConfig::SHGA);
    let models: Vec<Model> = (0..3)
        .map(|i| {
            let head = HeadConfig::new([HeadKind::Shga, HeadKind::Mqa, HeadKind::Mha][i], 2)?;
            Model::init(ModelConfig { layers: 1, ..tiny_config(head) }, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut trainer = TrainState::new(models[0].clone(), OptimConfig::default(), 1, seed);
    for it in 0..iterations {
        let head = random_head(&mut rng, it);
        let (l, t, dm, dk) = (4, 16, 5, 3);
        let p = random_layer(&mut rng, dm, dk, head.heads * 2, l, head)?;
        let s = rng.random_range(1..=8);
        let scale = 10f64.powi(rng.random_range(-6..=6));
        let (x, cbs) = match it % 4 {
            0 => {
                let row = normal(&mut rng, &[1, dm], 1.0);
                let rows: Vec<&Tensor> = (0..t).map(|_| &row).collect();
                (Tensor::concat_rows(&rows)?, random_books(&mut rng, head, s, dk, 0.5)?)
            }
            1 => {
                let mut books = random_books(&mut rng, head, s, dk, 1e3)?;
                for b in books.iter_mut() {
                    let mut words = b.codewords().clone();
                    words.row_mut(0).fill(0.0);
                    *b = Codebook::new(words, 0.99)?;
                }
                (normal(&mut rng, &[t, dm], 1.0), books)
            }
            2 => (Tensor::full(&[t, dm], rng.random_range(-3.0..3.0)), random_books(&mut rng, head, s, dk, 0.5)?),
            _ => (normal(&mut rng, &[t, dm], scale), random_books(&mut rng, head, s, dk, scale.min(1e3))?),
        };
        let q = vq_attn_quadratic(&x, &p, &cbs, head)?;
        note(q.y.data(), &mut bad);
        note(&[q.commit], &mut bad);
        let r = Reduction::ALL[it % 3];
        let (lin, trace) = vq_attn_linear_traced(&x, &p, &cbs, head, r)?;
        note(lin.y.data(), &mut bad);
        for ba in trace.iter().flatten() {
            note(ba.w_cache.data(), &mut bad);
            note(&ba.denom, &mut bad);
        }
        let (_, weights) = vq_attn_quadratic_traced(&x, &p, &cbs, head)?;
        for w in &weights {
            note(w.data(), &mut bad);
        }
        let proj = project(&x, &p, head)?;
        for (kv, mut cb) in cbs.into_iter().enumerate() {
            let (_, z) = quantize_batch(&proj.k[kv], &cb)?;
            let caches = cache_vars(r, z.codes(), &proj.v[kv], cb.size(), l)?;
            for c in &caches {
                note(c.value_means.data(), &mut bad);
                note(&c.count_biases(), &mut bad);
            }
            for _ in 0..3 {
                cb.ema_update(&proj.k[kv], &z)?;
            }
            note(cb.codewords().data(), &mut bad);
        }
        let masked = Tensor::full(&[2, 5], NEG_LARGE);
        note(row_softmax_stable(&masked).data(), &mut bad);

        let model = &models[it % 3];
        let tok = rng.random_range(0..tiny.vocab);
        let len = tiny.window;
        let tokens = vec![tok; len];
        let out = model.forward(&tokens, &Carry::empty(&model.config))?;
        note(out.logits.data(), &mut bad);
        if it % 10 == 0 {
            let mut st = DecodeState::new(model, len);
            for _ in 0..len {
                let d = decode_step(model, &mut st, tok)?;
                note(&d, &mut bad);
                sample_nucleus(&d, 0.9, &mut rng)?;
            }
        }
        if it % 50 == 0 {
            let batch = crate::corpus::WindowBatch {
                inputs: vec![tokens.clone()],
                targets: vec![tokens.clone()],
                reset: vec![false],
                offsets: vec![0],
            };
            let m = trainer.windowed_step(&batch)?;
            note(&[m.loss, m.ce, m.commit, m.grad_norm, m.utilization], &mut bad);
        }
    }
    for (_, p) in trainer.model.params() {
        note(p.data(), &mut bad);
    }
    if fault {
        note(&[f64::NAN], &mut bad);
    }
    Ok(CheckResult::at_most(
        "stress",
        "no-nan-fuzz",
        bad as f64,
        0.0,
        format!("{iterations} iterations, {outputs} outputs inspected"),
    ))
}

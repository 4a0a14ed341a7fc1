//! Throughput benchmarks for full and vector-quantized attention layers.
//!
//! Each combination of sequence length, head kind, attention kind and
//! reduction is timed with a monotonic clock after untimed warmup runs; the
//! median over repeats is reported. Combinations whose analytic memory
//! estimate exceeds the budget are not run and appear as `OOM` rows.
//!
//! CSV columns: `seq_len,head,kind,reduction,tokens_per_s,latency_s,slope_group`.
//! `slope_group` names the latency-versus-length series a row belongs to
//! (`kind/head/reduction`); log-log slopes are fitted per group.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{build_bias_matrix, full_attn, GauParams, HeadConfig, HeadKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::{vq_attn_linear, Reduction};
use crate::model::{Carry, Model, ModelConfig};
use crate::quantizer::Codebook;
use crate::tensor::{Real, Tensor};

pub const CSV_HEADER: &str = "seq_len,head,kind,reduction,tokens_per_s,latency_s,slope_group";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// 64-bit floats.
    Wide,
    /// 32-bit floats.
    Narrow,
}

impl Precision {
    pub fn bytes(&self) -> usize {
        match self {
            Precision::Wide => 8,
            Precision::Narrow => 4,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Wide => "wide",
            Precision::Narrow => "narrow",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wide" | "f64" => Ok(Precision::Wide),
            "narrow" | "f32" => Ok(Precision::Narrow),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnKind {
    Full,
    Vq,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::Full => "full",
            AttnKind::Vq => "vq",
        })
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(AttnKind::Full),
            "vq" => Ok(AttnKind::Vq),
            other => Err(Error::InvalidArgument(format!("unknown attention kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub heads: Vec<HeadKind>,
    pub kinds: Vec<AttnKind>,
    /// Only used for forward `vq` rows; full attention has a single `none`
    /// row and backward runs use the serial recurrence.
    pub reductions: Vec<Reduction>,
    pub repeats: usize,
    pub warmup: usize,
    /// Time forward plus backward instead of forward only. Always runs in
    /// wide precision.
    pub backward: bool,
    pub precision: Precision,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub codes: usize,
    pub block_len: usize,
    /// Query heads for MQA and MHA.
    pub n_heads: usize,
    pub seed: u64,
    /// Combinations estimated above this many bytes become `OOM` rows.
    pub memory_limit: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192, 16384],
            heads: vec![HeadKind::Shga],
            kinds: vec![AttnKind::Full, AttnKind::Vq],
            reductions: vec![Reduction::Serial],
            repeats: 3,
            warmup: 1,
            backward: false,
            precision: Precision::Narrow,
            d_model: 32,
            d_k: 16,
            d_v: 64,
            codes: 64,
            block_len: 64,
            n_heads: 2,
            seed: 0,
            memory_limit: 2 << 30,
        }
    }
}

impl BenchConfig {
    pub fn head_config(&self, kind: HeadKind) -> Result<HeadConfig> {
        HeadConfig::new(kind, self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        if self.block_len == 0 || self.codes == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if let Some(&t) = self.lengths.iter().find(|&&t| t == 0 || t % self.block_len != 0) {
            return Err(Error::BlockLength {
                block_len: self.block_len,
                len: t,
            });
        }
        for &h in &self.heads {
            self.head_config(h)?.head_value_width(self.d_v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub head: HeadKind,
    pub kind: AttnKind,
    pub reduction: Option<Reduction>,
    /// `None` for `OOM` rows.
    pub tokens_per_s: Option<f64>,
    pub latency_s: Option<f64>,
    pub peak_memory_estimate: u64,
}

impl BenchRow {
    pub fn slope_group(&self) -> String {
        format!("{}/{}/{}", self.kind, self.head, self.reduction_label())
    }

    pub fn reduction_label(&self) -> String {
        self.reduction.map_or_else(|| "none".to_string(), |r| r.to_string())
    }

    pub fn is_oom(&self) -> bool {
        self.latency_s.is_none()
    }
}

/// Writes the header and one line per row.
pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        let num = |v: Option<f64>| v.map_or_else(|| "OOM".to_string(), |x| format!("{x:e}"));
        w.write_record([
            r.seq_len.to_string(),
            r.head.to_string(),
            r.kind.to_string(),
            r.reduction_label(),
            num(r.tokens_per_s),
            num(r.latency_s),
            r.slope_group(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln(latency)` against `ln(seq_len)` per slope
/// group, over groups with at least two timed rows. Sorted by group name.
pub fn fit_slopes(rows: &[BenchRow]) -> Vec<(String, f64)> {
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let Some(lat) = r.latency_s else { continue };
        let g = r.slope_group();
        let pt = ((r.seq_len as f64).ln(), lat.ln());
        match groups.iter_mut().find(|(name, _)| *name == g) {
            Some((_, pts)) => pts.push(pt),
            None => groups.push((g, vec![pt])),
        }
    }
    let mut out: Vec<(String, f64)> = groups
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 2)
        .filter_map(|(g, pts)| log_log_slope(&pts).map(|s| (g, s)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Bytes allocated by one timed run, from the tensors each path creates.
pub fn memory_estimate(cfg: &BenchConfig, head: HeadConfig, kind: AttnKind, t: usize) -> u64 {
    let (hq, hkv) = (head.query_heads() as u64, head.kv_heads() as u64);
    let (t, dm, dk, dv) = (t as u64, cfg.d_model as u64, cfg.d_k as u64, cfg.d_v as u64);
    let (s, l) = (cfg.codes as u64, cfg.block_len as u64);
    let dvh = dv / hq;
    let nblocks = t / l;
    // Input, normalized input, projections, gated output and layer output.
    let per_token = 3 * dm + hq * dk + hkv * (2 * dk + dvh) + 3 * dv;
    let block_scores = l * (s + 2 * l);
    if !cfg.backward {
        let elem = cfg.precision.bytes() as u64;
        let extra = match kind {
            AttnKind::Full => t,
            AttnKind::Vq => hkv * nblocks * s * (dvh + 1) + 3 * block_scores,
        };
        return elem * (t * per_token + extra);
    }
    // Tape values plus one gradient buffer of the same size.
    let attn = match kind {
        AttnKind::Full => hq * (4 * t * t + t * dvh) + t * t,
        AttnKind::Vq => hkv * nblocks * (2 * s * dvh + 2 * l * (dk + dvh)) + hq * nblocks * (4 * block_scores + l * (s + 2 * l) + l * dvh),
    };
    let wrap = t * (2 * dm + 256 * 2);
    2 * 8 * (t * per_token * 3 + attn + wrap)
}

fn random_tensor<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor<F>> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::c(z * std)
        })
        .collect();
    Tensor::new(&[rows, cols], data)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_runs(cfg: &BenchConfig, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut lat = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        run()?;
        lat.push(start.elapsed().as_secs_f64());
    }
    Ok(median(lat))
}

fn forward_latency<F: Real>(cfg: &BenchConfig, head: HeadConfig, kind: AttnKind, reduction: Reduction, t: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p: GauParams<F> = GauParams::init(cfg.d_model, cfg.d_k, cfg.d_v, cfg.block_len, head, &mut rng)?;
    let cbs = (0..head.kv_heads())
        .map(|_| Codebook::random(cfg.codes, cfg.d_k, 1.0 / (cfg.d_k as f64).sqrt(), F::c(0.99), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let x: Tensor<F> = random_tensor(&mut rng, t, cfg.d_model, 1.0)?;
    time_runs(cfg, || {
        let y = match kind {
            AttnKind::Full => full_attn(&x, &p, head)?,
            AttnKind::Vq => vq_attn_linear(&x, &p, &cbs, head, reduction)?.y,
        };
        std::hint::black_box(y);
        Ok(())
    })
}

/// One-layer model of the benchmark's dimensions over `t` tokens.
fn bench_model(cfg: &BenchConfig, head: HeadConfig, t: usize) -> Result<Model> {
    let mc = ModelConfig {
        layers: 1,
        d_model: cfg.d_model,
        d_k: cfg.d_k,
        d_v: cfg.d_v,
        codes: cfg.codes,
        seq_len: t,
        block_len: cfg.block_len,
        window: t,
        head,
        ..ModelConfig::default()
    };
    Model::init(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Full causal attention layer recorded on a tape, with the same
/// projections, gate and offset biases as the VQ layer but unquantized keys
/// and the complete `T × T` score matrix.
pub fn full_attn_tape(tape: &mut Tape, p: &GauParams, head: HeadConfig, x: Var) -> Result<Var> {
    let dk = p.d_k;
    let t = tape.value(x).rows();
    let w_q = tape.param(p.w_q.clone());
    let w_k = tape.param(p.w_k.clone());
    let w_v = tape.param(p.w_v.clone());
    let w_g = tape.param(p.w_g.clone());
    let w_o = tape.param(p.w_o.clone());
    let gain = tape.param(p.norm_gain.clone());
    let xt = tape.rms_norm(x, Some(gain))?;
    let qp = tape.matmul(xt, w_q)?;
    let kp = tape.matmul(xt, w_k)?;
    let vpre = tape.matmul(xt, w_v)?;
    let vp = tape.silu(vpre);
    let gpre = tape.matmul(xt, w_g)?;
    let g = tape.silu(gpre);
    let scale = 1.0 / p.tau.sqrt();
    let mut heads_qk = |src: Var, n: usize| -> Result<Vec<Var>> {
        (0..n)
            .map(|h| {
                let s = tape.slice_cols(src, h * dk, dk);
                let nrm = tape.rms_norm(s, None)?;
                Ok(tape.scale(nrm, scale))
            })
            .collect()
    };
    let q = heads_qk(qp, head.query_heads())?;
    let k = heads_qk(kp, head.kv_heads())?;
    let dvh = tape.value(vp).cols() / head.kv_heads();
    let v: Vec<Var> = (0..head.kv_heads()).map(|h| tape.slice_cols(vp, h * dvh, dvh)).collect();
    let bias = tape.constant(build_bias_matrix(t, &p.bias_spec())?);
    let mut outs = Vec::with_capacity(q.len());
    for (h, &qh) in q.iter().enumerate() {
        let kv = head.kv_of(h);
        let scores = tape.matmul_nt(qh, k[kv])?;
        let biased = tape.add(scores, bias)?;
        let w = tape.softmax_rows(biased);
        outs.push(tape.matmul(w, v[kv])?);
    }
    let wv = tape.concat_cols(&outs)?;
    let gated = tape.mul(wv, g)?;
    let o = tape.matmul(gated, w_o)?;
    tape.add(x, o)
}

fn backward_latency(cfg: &BenchConfig, head: HeadConfig, kind: AttnKind, t: usize) -> Result<f64> {
    let model = bench_model(cfg, head, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb4c4);
    let tokens: Vec<usize> = (0..=t).map(|_| rng.random_range(0..model.config.vocab)).collect();
    let (inputs, targets) = (&tokens[..t], &tokens[1..]);
    time_runs(cfg, || {
        let mut tape = Tape::new();
        let loss = match kind {
            AttnKind::Vq => {
                let vars = model.register(&mut tape, true);
                let fwd = model.forward_stream(&mut tape, &vars, inputs, &Carry::empty(&model.config))?;
                tape.cross_entropy(fwd.logits, targets)?
            }
            AttnKind::Full => {
                let embed = tape.param(model.embed.clone());
                let x = tape.gather_rows(embed, inputs)?;
                let y = full_attn_tape(&mut tape, &model.layers[0], head, x)?;
                let w = tape.param(model.w_cls.clone());
                let b = tape.param(model.b_cls.clone());
                let proj = tape.matmul(y, w)?;
                let logits = tape.add_row(proj, b)?;
                tape.cross_entropy(logits, targets)?
            }
        };
        std::hint::black_box(tape.backward(loss)?);
        Ok(())
    })
}

/// Runs every combination in order: length, head kind, attention kind,
/// reduction.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    run_bench_with(cfg, |_| {})
}

/// Like [`run_bench`], calling `progress` after each row.
pub fn run_bench_with(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &t in &cfg.lengths {
        for &hk in &cfg.heads {
            let head = cfg.head_config(hk)?;
            for &kind in &cfg.kinds {
                let reductions: Vec<Option<Reduction>> = match kind {
                    AttnKind::Full => vec![None],
                    // The taped layer always runs the serial recurrence.
                    AttnKind::Vq if cfg.backward => vec![Some(Reduction::Serial)],
                    AttnKind::Vq => cfg.reductions.iter().copied().map(Some).collect(),
                };
                for reduction in reductions {
                    let mem = memory_estimate(cfg, head, kind, t);
                    let latency = if mem > cfg.memory_limit {
                        None
                    } else if cfg.backward {
                        Some(backward_latency(cfg, head, kind, t)?)
                    } else {
                        let r = reduction.unwrap_or(Reduction::Serial);
                        Some(match cfg.precision {
                            Precision::Wide => forward_latency::<f64>(cfg, head, kind, r, t)?,
                            Precision::Narrow => forward_latency::<f32>(cfg, head, kind, r, t)?,
                        })
                    };
                    let row = BenchRow {
                        seq_len: t,
                        head: hk,
                        kind,
                        reduction,
                        tokens_per_s: latency.map(|l| t as f64 / l),
                        latency_s: latency,
                        peak_memory_estimate: mem,
                    };
                    progress(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

//! Gated attention layer parameters, input projections and the
//! quadratic-time reference attention.

pub mod bias;
pub mod reference;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::quantizer::{quantize_batch, Codebook, Shortcodes};
use crate::tensor::{rms_norm, silu, Real, Tensor};

pub use bias::{build_bias_matrix, BiasSpec};
pub use reference::{
    vq_attn_quadratic_traced,
    encoder_direct_weights, encoder_factored_weights, full_attn, vq_attn_quadratic, EncoderNonlinearity, VqAttnOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Single-head gated attention.
    Shga,
    /// Multi-query: several query heads share one key/value head.
    Mqa,
    /// Multi-head: one key/value head (and codebook) per query head.
    Mha,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Shga => "shga",
            HeadKind::Mqa => "mqa",
            HeadKind::Mha => "mha",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shga" | "gau" => Ok(HeadKind::Shga),
            "mqa" => Ok(HeadKind::Mqa),
            "mha" => Ok(HeadKind::Mha),
            other => Err(Error::InvalidArgument(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub heads: usize,
}

impl HeadConfig {
    pub const SHGA: HeadConfig = HeadConfig {
        kind: HeadKind::Shga,
        heads: 1,
    };

    pub fn new(kind: HeadKind, heads: usize) -> Result<Self> {
        let heads = if kind == HeadKind::Shga { 1 } else { heads };
        if heads == 0 {
            return Err(Error::InvalidArgument("head count must be positive".into()));
        }
        Ok(Self { kind, heads })
    }

    pub fn query_heads(&self) -> usize {
        self.heads
    }

    pub fn kv_heads(&self) -> usize {
        match self.kind {
            HeadKind::Shga | HeadKind::Mqa => 1,
            HeadKind::Mha => self.heads,
        }
    }

    /// Key/value head serving query head `h`.
    pub fn kv_of(&self, h: usize) -> usize {
        match self.kind {
            HeadKind::Mha => h,
            _ => 0,
        }
    }

    pub fn head_value_width(&self, d_v: usize) -> Result<usize> {
        if d_v % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "value width {d_v} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(d_v / self.heads)
    }
}

/// One gated attention unit: projections, input-norm gain, bias projection
/// and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GauParams<F: Real = f64> {
    /// `D_m × (H·D_k)`
    pub w_q: Tensor<F>,
    /// `D_m × (H_kv·D_k)`
    pub w_k: Tensor<F>,
    /// `D_m × (H_kv·D_v/H)`
    pub w_v: Tensor<F>,
    /// `D_m × D_v`
    pub w_g: Tensor<F>,
    /// `D_v × D_m`
    pub w_o: Tensor<F>,
    /// `[D_m]`
    pub norm_gain: Tensor<F>,
    /// `[D_k]`, projects sinusoid features to per-offset biases.
    pub bias_proj: Tensor<F>,
    pub tau: F,
    pub d_k: usize,
    pub block_len: usize,
}

impl<F: Real> GauParams<F> {
    /// Random initialization with fan-in scaled normals; `tau = d_k`.
    pub fn init(d_model: usize, d_k: usize, d_v: usize, block_len: usize, head: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let dvh = head.head_value_width(d_v)?;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    F::c(z * std)
                })
                .collect();
            Tensor::new(&[rows, cols], data)
        };
        let fan_m = 1.0 / (d_model as f64).sqrt();
        let fan_v = 1.0 / (d_v as f64).sqrt();
        Ok(Self {
            w_q: normal(d_model, head.query_heads() * d_k, fan_m)?,
            w_k: normal(d_model, head.kv_heads() * d_k, fan_m)?,
            w_v: normal(d_model, head.kv_heads() * dvh, fan_m)?,
            w_g: normal(d_model, d_v, fan_m)?,
            w_o: normal(d_v, d_model, fan_v)?,
            norm_gain: Tensor::full(&[d_model], F::one()),
            bias_proj: normal(1, d_k, 0.1)?.reshape(&[d_k])?,
            tau: F::c(d_k as f64),
            d_k,
            block_len,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_v(&self) -> usize {
        self.w_g.cols()
    }

    pub fn bias_spec(&self) -> BiasSpec<F> {
        BiasSpec::from_projection(self.block_len, self.bias_proj.data())
    }

    pub fn cast<G: Real>(&self) -> GauParams<G> {
        GauParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_g: self.w_g.cast(),
            w_o: self.w_o.cast(),
            norm_gain: self.norm_gain.cast(),
            bias_proj: self.bias_proj.cast(),
            tau: G::c(self.tau.to_f64().unwrap_or(1.0)),
            d_k: self.d_k,
            block_len: self.block_len,
        }
    }

    pub fn check(&self, head: HeadConfig) -> Result<()> {
        let (dm, dk, dv) = (self.d_model(), self.d_k, self.d_v());
        let dvh = head.head_value_width(dv)?;
        let expect = [
            ("w_q", &self.w_q, [dm, head.query_heads() * dk]),
            ("w_k", &self.w_k, [dm, head.kv_heads() * dk]),
            ("w_v", &self.w_v, [dm, head.kv_heads() * dvh]),
            ("w_g", &self.w_g, [dm, dv]),
            ("w_o", &self.w_o, [dv, dm]),
        ];
        for (name, t, want) in expect {
            if t.shape() != want {
                return Err(Error::InvalidShape {
                    op: "gau_params",
                    msg: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        if self.norm_gain.shape() != [dm] || self.bias_proj.len() != dk {
            return Err(Error::InvalidShape {
                op: "gau_params",
                msg: "norm gain or bias projection has the wrong width".into(),
            });
        }
        if !(self.tau > F::zero()) || self.block_len == 0 {
            return Err(Error::InvalidArgument("tau must be positive and block length nonzero".into()));
        }
        Ok(())
    }
}

/// Per-head queries/keys/values and the shared gate of one layer.
#[derive(Debug, Clone)]
pub struct Projections<F: Real = f64> {
    pub q: Vec<Tensor<F>>,
    pub k: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub g: Tensor<F>,
}

/// `X̃ = LN(X)`, `Q, K = τ^{-1/2}·LN(X̃W)`, `V, G = SiLU(X̃W)`.
pub fn project<F: Real>(x: &Tensor<F>, p: &GauParams<F>, head: HeadConfig) -> Result<Projections<F>> {
    p.check(head)?;
    if x.ndim() != 2 || x.cols() != p.d_model() {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: x.shape().to_vec(),
            right: p.w_q.shape().to_vec(),
        });
    }
    let xt = rms_norm(x, Some(p.norm_gain.data()));
    let scale = F::one() / p.tau.sqrt();
    let dk = p.d_k;
    let qk_heads = |w: &Tensor<F>, n: usize| -> Result<Vec<Tensor<F>>> {
        let proj = xt.matmul(w)?;
        Ok((0..n)
            .map(|h| rms_norm(&proj.slice_cols(h * dk, dk), None).scale(scale))
            .collect())
    };
    let q = qk_heads(&p.w_q, head.query_heads())?;
    let k = qk_heads(&p.w_k, head.kv_heads())?;
    let vall = xt.matmul(&p.w_v)?.map(silu);
    let dvh = vall.cols() / head.kv_heads();
    let v = (0..head.kv_heads()).map(|h| vall.slice_cols(h * dvh, dvh)).collect();
    let g = xt.matmul(&p.w_g)?.map(silu);
    Ok(Projections { q, k, v, g })
}

/// Quantizes each key head with its own codebook.
pub fn quantize_heads<F: Real>(
    k: &[Tensor<F>],
    cbs: &[Codebook<F>],
) -> Result<(Vec<Tensor<F>>, Vec<Shortcodes>)> {
    if k.len() != cbs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} key heads but {} codebooks",
            k.len(),
            cbs.len()
        )));
    }
    let mut khat = Vec::with_capacity(k.len());
    let mut codes = Vec::with_capacity(k.len());
    for (kh, cb) in k.iter().zip(cbs) {
        let (q, z) = quantize_batch(kh, cb)?;
        khat.push(q);
        codes.push(z);
    }
    Ok((khat, codes))
}

/// `Y = X + ((WV) ⊙ G)·W_O` given the concatenated per-head `WV`.
pub fn gate_and_project<F: Real>(x: &Tensor<F>, wv: &Tensor<F>, g: &Tensor<F>, p: &GauParams<F>) -> Result<Tensor<F>> {
    let o = wv.mul(g)?;
    x.add(&o.matmul(&p.w_o)?)
}

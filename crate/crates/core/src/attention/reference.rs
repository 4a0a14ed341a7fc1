//! Quadratic-time attention: the ground truth for the block recurrence.

use crate::attention::{gate_and_project, project, quantize_heads, BiasSpec, GauParams, HeadConfig};
use crate::error::{Error, Result};
use crate::linear::delta_onehot;
use crate::quantizer::{commit_loss, Codebook, Shortcodes};
use crate::tensor::{dot, row_softmax_stable, softmax_in_place, Real, Tensor};

#[derive(Debug, Clone)]
pub struct VqAttnOutput<F: Real = f64> {
    pub y: Tensor<F>,
    /// Shortcodes per key/value head.
    pub codes: Vec<Shortcodes>,
    /// Commit loss summed over key/value heads.
    pub commit: F,
}

pub(crate) fn check_len(len: usize, block_len: usize) -> Result<()> {
    if block_len == 0 || len % block_len != 0 {
        return Err(Error::BlockLength { block_len, len });
    }
    Ok(())
}

/// `softmax(Q K̂ᵀ + B)` for one head.
pub fn attention_weights<F: Real>(q: &Tensor<F>, khat: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let scores = q.matmul_nt(khat)?.add(bias)?;
    Ok(row_softmax_stable(&scores))
}

/// Vector-quantized self-attention evaluated with the full `T × T` weight
/// matrix. Also returns the per-query-head weight matrices.
pub fn vq_attn_quadratic_traced<F: Real>(
    x: &Tensor<F>,
    p: &GauParams<F>,
    cbs: &[Codebook<F>],
    head: HeadConfig,
) -> Result<(VqAttnOutput<F>, Vec<Tensor<F>>)> {
    check_len(x.rows(), p.block_len)?;
    let proj = project(x, p, head)?;
    let (khat, codes) = quantize_heads(&proj.k, cbs)?;
    let bias = crate::attention::build_bias_matrix(x.rows(), &p.bias_spec())?;

    let mut weights = Vec::with_capacity(head.query_heads());
    let mut outs = Vec::with_capacity(head.query_heads());
    for (h, q) in proj.q.iter().enumerate() {
        let kv = head.kv_of(h);
        let w = attention_weights(q, &khat[kv], &bias)?;
        outs.push(w.matmul(&proj.v[kv])?);
        weights.push(w);
    }
    let wv = Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())?;
    let y = gate_and_project(x, &wv, &proj.g, p)?;

    let mut commit = F::zero();
    for ((k, cb), z) in proj.k.iter().zip(cbs).zip(&codes) {
        commit += commit_loss(k, cb, z)?;
    }
    Ok((VqAttnOutput { y, codes, commit }, weights))
}

pub fn vq_attn_quadratic<F: Real>(
    x: &Tensor<F>,
    p: &GauParams<F>,
    cbs: &[Codebook<F>],
    head: HeadConfig,
) -> Result<VqAttnOutput<F>> {
    vq_attn_quadratic_traced(x, p, cbs, head).map(|(out, _)| out)
}

/// Causal softmax attention over unquantized keys, streamed one query row
/// at a time so memory stays `O(T)`. Same biases as the VQ layer.
pub fn full_attn<F: Real>(x: &Tensor<F>, p: &GauParams<F>, head: HeadConfig) -> Result<Tensor<F>> {
    check_len(x.rows(), p.block_len)?;
    let proj = project(x, p, head)?;
    let spec = p.bias_spec();
    let outs = proj
        .q
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let kv = head.kv_of(h);
            causal_rows(q, &proj.k[kv], &proj.v[kv], &spec)
        })
        .collect::<Vec<_>>();
    let wv = Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())?;
    gate_and_project(x, &wv, &proj.g, p)
}

fn causal_rows<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, spec: &BiasSpec<F>) -> Tensor<F> {
    let t = q.rows();
    let dv = v.cols();
    let mut out = Tensor::zeros(&[t, dv]);
    let mut scores = Vec::with_capacity(t);
    for i in 0..t {
        scores.clear();
        let qi = q.row(i);
        scores.extend((0..=i).map(|j| dot(qi, k.row(j)) + spec.offset_bias(i - j)));
        softmax_in_place(&mut scores);
        let orow = out.row_mut(i);
        for (j, &w) in scores.iter().enumerate() {
            for (o, &vv) in orow.iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderNonlinearity {
    Exp,
    Relu,
    Softmax,
}

impl EncoderNonlinearity {
    fn elementwise<F: Real>(self, v: F) -> F {
        match self {
            EncoderNonlinearity::Exp => v.exp(),
            EncoderNonlinearity::Relu => v.max(F::zero()),
            EncoderNonlinearity::Softmax => unreachable!("softmax is row-wise"),
        }
    }
}

/// `φ_w(Q K̂ᵀ)` evaluated directly (no bias, no mask).
pub fn encoder_direct_weights<F: Real>(q: &Tensor<F>, khat: &Tensor<F>, phi: EncoderNonlinearity) -> Result<Tensor<F>> {
    let scores = q.matmul_nt(khat)?;
    Ok(match phi {
        EncoderNonlinearity::Softmax => row_softmax_stable(&scores),
        other => scores.map(|v| other.elementwise(v)),
    })
}

/// Encoder weights through the codebook: `φ_w(QCᵀ)Δ` for elementwise
/// nonlinearities, `Diag(exp(QCᵀ)Δ𝟙)⁻¹ exp(QCᵀ)Δ` for softmax. Only valid
/// without biases or masks, so any supplied bias is rejected.
pub fn encoder_factored_weights<F: Real>(
    q: &Tensor<F>,
    z: &Shortcodes,
    cb: &Codebook<F>,
    phi: EncoderNonlinearity,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    if bias.is_some() {
        return Err(Error::InvalidArgument(
            "encoder factorization holds only without bias or mask".into(),
        ));
    }
    let delta = delta_onehot(z.codes(), cb.size())?;
    let code_scores = q.matmul_nt(cb.codewords())?;
    match phi {
        EncoderNonlinearity::Softmax => {
            // Row max over codewords cancels in the ratio.
            let mut e = code_scores;
            let s = e.cols();
            for i in 0..e.rows() {
                let row = e.row_mut(i);
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
            }
            let numer = e.matmul(&delta)?;
            let counts: Vec<F> = (0..s).map(|c| delta.row(c).iter().copied().sum()).collect();
            let mut out = numer;
            for i in 0..out.rows() {
                let denom = dot(e.row(i), &counts);
                out.row_mut(i).iter_mut().for_each(|v| *v /= denom);
            }
            Ok(out)
        }
        other => code_scores.map(|v| other.elementwise(v)).matmul(&delta),
    }
}

#[cfg(test)]
mod tests {
    #[allow(dead_code)]
    type Tensor = crate::tensor::Tensor<f64>;
    use super::*;
    use crate::attention::HeadKind;
    use crate::quantizer::quantize_batch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn layer(seed: u64, t: usize, l: usize, s: usize, head: HeadConfig) -> (Tensor, GauParams, Vec<Codebook>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GauParams::init(8, 4, 8, l, head, &mut rng).unwrap();
        let x = random(&mut rng, &[t, 8], 1.0);
        let cbs = (0..head.kv_heads())
            .map(|_| Codebook::random(s, 4, 0.5, 0.99, &mut rng).unwrap())
            .collect();
        (x, p, cbs)
    }

    #[test]
    fn rows_sum_to_one_over_causal_prefix() {
        let (x, p, cbs) = layer(1, 16, 4, 3, HeadConfig::SHGA);
        let (_, w) = vq_attn_quadratic_traced(&x, &p, &cbs, HeadConfig::SHGA).unwrap();
        for i in 0..16 {
            let s: f64 = w[0].row(i)[..=i].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w[0].row(i)[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_code_zero_bias_is_uniform() {
        let (x, mut p, _) = layer(2, 8, 4, 1, HeadConfig::SHGA);
        p.bias_proj = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cbs = vec![Codebook::random(1, 4, 0.5, 0.99, &mut rng).unwrap()];
        let (_, w) = vq_attn_quadratic_traced(&x, &p, &cbs, HeadConfig::SHGA).unwrap();
        for i in 0..8 {
            for j in 0..=i {
                assert!((w[0].at(i, j) - 1.0 / (i + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (x, mut p, cbs) = layer(3, 8, 2, 3, HeadConfig::SHGA);
        p.w_o = Tensor::zeros(p.w_o.shape());
        let out = vq_attn_quadratic(&x, &p, &cbs, HeadConfig::SHGA).unwrap();
        assert_eq!(out.y, x);
    }

    #[test]
    fn rejects_non_divisible_length() {
        let (x, p, cbs) = layer(4, 6, 4, 3, HeadConfig::SHGA);
        assert!(matches!(
            vq_attn_quadratic(&x, &p, &cbs, HeadConfig::SHGA),
            Err(Error::BlockLength { .. })
        ));
    }

    #[test]
    fn causality_under_perturbation() {
        let (x, p, cbs) = layer(5, 16, 4, 4, HeadConfig::SHGA);
        let base = vq_attn_quadratic(&x, &p, &cbs, HeadConfig::SHGA).unwrap().y;
        let t0 = 9;
        let mut x2 = x.clone();
        for t in t0 + 1..16 {
            for d in 0..8 {
                x2.set(t, d, x.at(t, d) + 3.0);
            }
        }
        let pert = vq_attn_quadratic(&x2, &p, &cbs, HeadConfig::SHGA).unwrap().y;
        for t in 0..=t0 {
            assert_eq!(base.row(t), pert.row(t));
        }
    }

    #[test]
    fn delta_onehot_in_encoder_shape() {
        let z = Shortcodes::new(vec![0, 2, 0], 3).unwrap();
        let d: Tensor = delta_onehot(z.codes(), 3).unwrap();
        assert_eq!(d.data(), &[1., 0., 1., 0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn encoder_factorization_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = Codebook::random(4, 5, 0.7, 0.99, &mut rng).unwrap();
        let q = random(&mut rng, &[12, 5], 1.0);
        let k = random(&mut rng, &[12, 5], 1.0);
        let (khat, z) = quantize_batch(&k, &cb).unwrap();
        for phi in [EncoderNonlinearity::Exp, EncoderNonlinearity::Relu, EncoderNonlinearity::Softmax] {
            let f = encoder_factored_weights(&q, &z, &cb, phi, None).unwrap();
            let d = encoder_direct_weights(&q, &khat, phi).unwrap();
            assert!(f.max_abs_diff(&d).unwrap() <= 1e-12, "{phi:?}");
            if phi == EncoderNonlinearity::Softmax {
                for i in 0..12 {
                    assert!((f.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        let b = Tensor::zeros(&[12, 12]);
        assert!(encoder_factored_weights(&q, &z, &cb, EncoderNonlinearity::Exp, Some(&b)).is_err());
    }

    #[test]
    fn multi_head_matches_per_head_single_head() {
        for kind in [HeadKind::Mqa, HeadKind::Mha] {
            let head = HeadConfig::new(kind, 2).unwrap();
            let (x, p, cbs) = layer(11, 8, 4, 3, head);
            let (out, weights) = vq_attn_quadratic_traced(&x, &p, &cbs, head).unwrap();
            let proj = project(&x, &p, head).unwrap();
            let bias = crate::attention::build_bias_matrix(8, &p.bias_spec()).unwrap();
            for h in 0..2 {
                let kv = head.kv_of(h);
                let (khat, _) = quantize_batch(&proj.k[kv], &cbs[kv]).unwrap();
                let w = attention_weights(&proj.q[h], &khat, &bias).unwrap();
                assert!(w.max_abs_diff(&weights[h]).unwrap() < 1e-14);
            }
            assert_eq!(out.codes.len(), head.kv_heads());
        }
    }

    #[test]
    fn full_attention_equals_quadratic_with_identity_quantizer() {
        // With every key being its own codeword, VQ attention is full attention.
        let (x, p, _) = layer(6, 8, 4, 8, HeadConfig::SHGA);
        let proj = project(&x, &p, HeadConfig::SHGA).unwrap();
        let cb = Codebook::new(proj.k[0].clone(), 0.99).unwrap();
        let vq = vq_attn_quadratic(&x, &p, &[cb], HeadConfig::SHGA).unwrap().y;
        let full = full_attn(&x, &p, HeadConfig::SHGA).unwrap();
        assert!(vq.max_abs_diff(&full).unwrap() < 1e-12);
    }
}

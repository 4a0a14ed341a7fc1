//! Linear-time decoder attention: queries in block `n` see blocks `n` and
//! `n - 1` with exact keys and local biases, and everything older through
//! per-shortcode running means.

mod cache;
mod reduction;

pub use cache::{cache_absorb, delta_onehot, CacheState};
pub use reduction::{
    associative_scan, cache_vars, cache_vars_assoc, cache_vars_matmul, cache_vars_serial, Reduction,
};

use crate::attention::reference::check_len;
use crate::attention::{gate_and_project, project, quantize_heads, BiasSpec, GauParams, HeadConfig, VqAttnOutput};
use crate::error::{Error, Result};
use crate::quantizer::{commit_loss, Codebook};
use crate::tensor::{dot, Real, Tensor};

/// Score and weight groups of one query block.
#[derive(Debug, Clone)]
pub struct BlockAttention<F: Real = f64> {
    /// `L × D_v`, gated if a gate was supplied.
    pub out: Tensor<F>,
    /// `L × S`
    pub w_cache: Tensor<F>,
    /// `L × L`
    pub w_prev: Tensor<F>,
    /// `L × L`
    pub w_cur: Tensor<F>,
    /// Softmax denominators relative to the joint row max.
    pub denom: Vec<F>,
}

/// Keys, values and bias blocks of the previous block, if there is one.
#[derive(Debug, Clone, Copy)]
pub struct PrevBlock<'a, F: Real> {
    pub khat: &'a Tensor<F>,
    pub v: &'a Tensor<F>,
}

/// Attention for the query rows of one block against the cache, the
/// previous block and the current block (causally masked). Row maxima are
/// taken jointly over the three score groups.
#[allow(clippy::too_many_arguments)]
pub fn attn_block<F: Real>(
    q: &Tensor<F>,
    prev: Option<PrevBlock<'_, F>>,
    khat_cur: &Tensor<F>,
    v_cur: &Tensor<F>,
    gate: Option<&Tensor<F>>,
    bias: &BiasSpec<F>,
    codewords: &Tensor<F>,
    cache: &CacheState<F>,
) -> Result<BlockAttention<F>> {
    let rows = q.rows();
    let l = khat_cur.rows();
    let s = codewords.rows();
    let dv = v_cur.cols();
    if cache.codes() != s || cache.d_v() != dv || codewords.cols() != q.cols() || khat_cur.cols() != q.cols() {
        return Err(Error::InvalidShape {
            op: "attn_block",
            msg: format!(
                "q {:?}, keys {:?}, codewords {:?}, cache {}x{}",
                q.shape(),
                khat_cur.shape(),
                codewords.shape(),
                cache.codes(),
                cache.d_v()
            ),
        });
    }
    let count_bias = cache.count_biases();
    let bias_cur = bias.current_block();
    let bias_prev = bias.previous_block();

    let mut w_cache = Tensor::zeros(&[rows, s]);
    let mut w_prev = Tensor::zeros(&[rows, l]);
    let mut w_cur = Tensor::zeros(&[rows, l]);
    let mut out = Tensor::zeros(&[rows, dv]);
    let mut denom = Vec::with_capacity(rows);

    for a in 0..rows {
        let qa = q.row(a);
        let sc: Vec<F> = (0..s).map(|c| dot(qa, codewords.row(c)) + count_bias[c]).collect();
        let sp: Vec<F> = match prev {
            Some(pb) => (0..l).map(|b| dot(qa, pb.khat.row(b)) + bias_prev.at(a, b)).collect(),
            None => vec![F::neg_large(); l],
        };
        let su: Vec<F> = (0..l).map(|b| dot(qa, khat_cur.row(b)) + bias_cur.at(a, b)).collect();

        let m = sc.iter().chain(&sp).chain(&su).copied().fold(F::neg_infinity(), F::max);
        let ec: Vec<F> = sc.iter().map(|&x| (x - m).exp()).collect();
        let ep: Vec<F> = sp.iter().map(|&x| (x - m).exp()).collect();
        let eu: Vec<F> = su.iter().map(|&x| (x - m).exp()).collect();
        let d: F = ec.iter().chain(&ep).chain(&eu).copied().sum();
        denom.push(d);

        let orow = out.row_mut(a);
        for (c, &e) in ec.iter().enumerate() {
            let w = e / d;
            w_cache.set(a, c, w);
            if w != F::zero() {
                for (o, &x) in orow.iter_mut().zip(cache.value_means.row(c)) {
                    *o += w * x;
                }
            }
        }
        if let Some(pb) = prev {
            for (b, &e) in ep.iter().enumerate() {
                let w = e / d;
                w_prev.set(a, b, w);
                for (o, &x) in orow.iter_mut().zip(pb.v.row(b)) {
                    *o += w * x;
                }
            }
        }
        for (b, &e) in eu.iter().enumerate() {
            let w = e / d;
            w_cur.set(a, b, w);
            if w != F::zero() {
                for (o, &x) in orow.iter_mut().zip(v_cur.row(b)) {
                    *o += w * x;
                }
            }
        }
    }
    if let Some(g) = gate {
        out = out.mul(g)?;
    }
    Ok(BlockAttention {
        out,
        w_cache,
        w_prev,
        w_cur,
        denom,
    })
}

/// Per-head block traces, exposed for invariant checks.
pub type LinearTrace<F> = Vec<Vec<BlockAttention<F>>>;

/// Vector-quantized self-attention via the block recurrence; equal to
/// [`crate::attention::vq_attn_quadratic`] up to summation order.
pub fn vq_attn_linear<F: Real>(
    x: &Tensor<F>,
    p: &GauParams<F>,
    cbs: &[Codebook<F>],
    head: HeadConfig,
    reduction: Reduction,
) -> Result<VqAttnOutput<F>> {
    vq_attn_linear_traced(x, p, cbs, head, reduction).map(|(o, _)| o)
}

pub fn vq_attn_linear_traced<F: Real>(
    x: &Tensor<F>,
    p: &GauParams<F>,
    cbs: &[Codebook<F>],
    head: HeadConfig,
    reduction: Reduction,
) -> Result<(VqAttnOutput<F>, LinearTrace<F>)> {
    let t = x.rows();
    let l = p.block_len;
    check_len(t, l)?;
    let proj = project(x, p, head)?;
    let (khat, codes) = quantize_heads(&proj.k, cbs)?;
    let bias = p.bias_spec();

    let caches: Vec<Vec<CacheState<F>>> = codes
        .iter()
        .zip(&proj.v)
        .zip(cbs)
        .map(|((z, v), cb)| cache_vars(reduction, z.codes(), v, cb.size(), l))
        .collect::<Result<_>>()?;

    let nblocks = t / l;
    let mut trace = Vec::with_capacity(head.query_heads());
    let mut head_outs = Vec::with_capacity(head.query_heads());
    for (h, q) in proj.q.iter().enumerate() {
        let kv = head.kv_of(h);
        let mut blocks = Vec::with_capacity(nblocks);
        let mut rows = Vec::with_capacity(nblocks);
        for n in 0..nblocks {
            let r = n * l;
            let q_blk = q.slice_rows(r, l);
            let k_cur = khat[kv].slice_rows(r, l);
            let v_cur = proj.v[kv].slice_rows(r, l);
            let (k_prev, v_prev);
            let prev = if n > 0 {
                k_prev = khat[kv].slice_rows(r - l, l);
                v_prev = proj.v[kv].slice_rows(r - l, l);
                Some(PrevBlock {
                    khat: &k_prev,
                    v: &v_prev,
                })
            } else {
                None
            };
            let ba = attn_block(&q_blk, prev, &k_cur, &v_cur, None, &bias, cbs[kv].codewords(), &caches[kv][n])?;
            rows.push(ba.out.clone());
            blocks.push(ba);
        }
        head_outs.push(Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?);
        trace.push(blocks);
    }
    let wv = Tensor::concat_cols(&head_outs.iter().collect::<Vec<_>>())?;
    let y = gate_and_project(x, &wv, &proj.g, p)?;
    let mut commit = F::zero();
    for ((k, cb), z) in proj.k.iter().zip(cbs).zip(&codes) {
        commit += commit_loss(k, cb, z)?;
    }
    Ok((VqAttnOutput { y, codes, commit }, trace))
}

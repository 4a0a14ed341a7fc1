//! Token-by-token decoding and nucleus sampling.
//!
//! A [`DecodeState`] holds, per layer and key/value head, the compressed
//! cache over blocks older than the previous one, the previous block's raw
//! quantized keys and values, and the partially filled current block. Each
//! step costs `O(S + 2L)` per head regardless of how long the prefix is.
//! When the current block fills up, the previous block is folded into the
//! cache and the current block takes its place.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{gate_and_project, project, BiasSpec};
use crate::error::{Error, Result};
use crate::model::{Carry, HeadCarry, Model, RawBlock};
use crate::quantizer::nearest_codeword;
use crate::tensor::{dot, row_softmax_stable, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
struct PartialBlock {
    khat: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    codes: Vec<usize>,
}

impl PartialBlock {
    fn new() -> Self {
        Self {
            khat: Vec::new(),
            v: Vec::new(),
            codes: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.codes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    carry: Carry,
    /// `[layer][kv head]`
    current: Vec<Vec<PartialBlock>>,
    position: usize,
    max_len: usize,
}

impl DecodeState {
    /// Empty context; at most `max_len` tokens may be fed.
    pub fn new(model: &Model, max_len: usize) -> Self {
        Self::from_carry(model, Carry::empty(&model.config), 0, max_len)
    }

    /// State after a block-aligned prefix of length `position` whose
    /// forward pass produced `carry`.
    pub fn from_carry(model: &Model, carry: Carry, position: usize, max_len: usize) -> Self {
        let cfg = &model.config;
        Self {
            carry,
            current: (0..cfg.layers)
                .map(|_| (0..cfg.head.kv_heads()).map(|_| PartialBlock::new()).collect())
                .collect(),
            position,
            max_len,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Compressed state; only meaningful at block boundaries.
    pub fn carry(&self) -> &Carry {
        &self.carry
    }
}

/// Feeds `token` and returns the next-token distribution.
pub fn decode_step(model: &Model, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
    let logits = decode_logits(model, state, token)?;
    let row = Tensor::new(&[1, logits.len()], logits)?;
    Ok(row_softmax_stable(&row).into_data())
}

/// Like [`decode_step`] but returns raw logits.
pub fn decode_logits(model: &Model, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if token >= cfg.vocab {
        return Err(Error::TokenOutOfRange { token, vocab: cfg.vocab });
    }
    if state.position >= state.max_len {
        return Err(Error::InvalidArgument(format!(
            "decode position {} reached the limit of {}",
            state.position, state.max_len
        )));
    }
    if state.carry.heads.len() != cfg.layers {
        return Err(Error::InvalidArgument("decode state does not match layer count".into()));
    }
    let l = cfg.block_len;
    let head = cfg.head;
    let mut x = Tensor::new(&[1, cfg.d_model], model.embed.row(token).to_vec())?;
    for (li, p) in model.layers.iter().enumerate() {
        let proj = project(&x, p, head)?;
        let bias = p.bias_spec();
        let cbs = &model.codebooks[li];
        for (kv, blk) in state.current[li].iter_mut().enumerate() {
            let (code, word) = nearest_codeword(proj.k[kv].row(0), &cbs[kv])?;
            blk.khat.push(word.to_vec());
            blk.v.push(proj.v[kv].row(0).to_vec());
            blk.codes.push(code);
        }
        let mut wv = Vec::with_capacity(cfg.d_v);
        for h in 0..head.query_heads() {
            let kv = head.kv_of(h);
            let out = attend_row(
                proj.q[h].row(0),
                &state.carry.heads[li][kv],
                &state.current[li][kv],
                cbs[kv].codewords(),
                &bias,
                l,
            );
            wv.extend(out);
        }
        let wv = Tensor::new(&[1, wv.len()], wv)?;
        x = gate_and_project(&x, &wv, &proj.g, p)?;
    }
    let mut logits = x.matmul(&model.w_cls)?.into_data();
    for (o, b) in logits.iter_mut().zip(model.b_cls.data()) {
        *o += b;
    }

    state.position += 1;
    if state.position % l == 0 {
        for (hc_layer, cur_layer) in state.carry.heads.iter_mut().zip(state.current.iter_mut()) {
            for (hc, cur) in hc_layer.iter_mut().zip(cur_layer.iter_mut()) {
                fold(hc, std::mem::replace(cur, PartialBlock::new()))?;
            }
        }
    }
    Ok(logits)
}

fn fold(hc: &mut HeadCarry, cur: PartialBlock) -> Result<()> {
    if let Some(prev) = hc.prev.take() {
        hc.cache = hc.cache.absorb(&prev.codes, &prev.v)?;
    }
    hc.prev = Some(RawBlock {
        khat: Tensor::from_rows(&cur.khat)?,
        v: Tensor::from_rows(&cur.v)?,
        codes: cur.codes,
    });
    Ok(())
}

/// One query row at in-block position `cur.len() - 1` against codewords
/// (cache), the previous block and the current prefix.
fn attend_row(q: &[f64], hc: &HeadCarry, cur: &PartialBlock, codewords: &Tensor, bias: &BiasSpec, l: usize) -> Vec<f64> {
    let a = cur.len() - 1;
    let counts = &hc.cache.counts;
    let mut scores = Vec::with_capacity(counts.len() + 2 * l);
    for (s, &n) in counts.iter().enumerate() {
        scores.push(if n > 0.0 {
            dot(q, codewords.row(s)) + n.max(1.0).ln()
        } else {
            f64::neg_large()
        });
    }
    if let Some(prev) = &hc.prev {
        for b in 0..l {
            scores.push(dot(q, prev.khat.row(b)) + bias.offset_bias(a + l - b));
        }
    }
    for b in 0..=a {
        scores.push(dot(q, &cur.khat[b]) + bias.offset_bias(a - b));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        denom += *s;
    }
    let dv = hc.cache.d_v();
    let mut out = vec![0.0; dv];
    let mut acc = |w: f64, row: &[f64]| {
        for (o, r) in out.iter_mut().zip(row) {
            *o += w * r;
        }
    };
    let mut i = 0;
    for s in 0..counts.len() {
        acc(scores[i], hc.cache.value_means.row(s));
        i += 1;
    }
    if let Some(prev) = &hc.prev {
        for b in 0..l {
            acc(scores[i], prev.v.row(b));
            i += 1;
        }
    }
    for row in &cur.v {
        acc(scores[i], row);
        i += 1;
    }
    out.iter_mut().for_each(|o| *o /= denom);
    out
}

/// Teacher-forced next-token distributions for every position of `tokens`,
/// from one block-parallel forward over the prefix padded to a multiple of
/// `L`.
pub fn forward_distributions(model: &Model, tokens: &[usize]) -> Result<Tensor> {
    let l = model.config.block_len;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty prefix".into()));
    }
    let mut padded = tokens.to_vec();
    padded.resize(tokens.len().div_ceil(l) * l, 0);
    let out = model.forward(&padded, &Carry::empty(&model.config))?;
    Ok(row_softmax_stable(&out.logits.slice_rows(0, tokens.len())))
}

/// Samples from the smallest highest-probability prefix of `dist` whose
/// mass reaches `top_p`. Equal probabilities are ordered by token id.
pub fn sample_nucleus(dist: &[f64], top_p: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    if dist.is_empty() || dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument("distribution has negative or non-finite entries".into()));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("distribution sums to {total}")));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &t in &order {
        mass += dist[t];
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &order[..keep];
    let u = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &t in nucleus {
        cum += dist[t];
        if u < cum {
            return Ok(t);
        }
    }
    Ok(nucleus[keep - 1])
}

/// Feeds `prompt` and then samples `length` tokens with nucleus sampling,
/// drawing from a ChaCha8 stream seeded with `seed`.
pub fn generate(model: &Model, prompt: &[usize], length: usize, top_p: f64, seed: u64) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DecodeState::new(model, prompt.len() + length);
    let mut dist = Vec::new();
    for &t in prompt {
        dist = decode_step(model, &mut state, t)?;
    }
    let mut out = Vec::with_capacity(length);
    for i in 0..length {
        let t = sample_nucleus(&dist, top_p, &mut rng)?;
        out.push(t);
        if i + 1 < length {
            dist = decode_step(model, &mut state, t)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{HeadConfig, HeadKind};
    use crate::model::ModelConfig;

    fn tiny(head: HeadConfig, seed: u64) -> Model {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 12,
            d_k: 4,
            d_v: 8,
            codes: 5,
            seq_len: 32,
            block_len: 4,
            window: 16,
            vocab: 11,
            head,
            ..ModelConfig::default()
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn stepwise_matches_block_parallel() {
        let heads = [
            HeadConfig::SHGA,
            HeadConfig::new(HeadKind::Mqa, 2).unwrap(),
            HeadConfig::new(HeadKind::Mha, 2).unwrap(),
        ];
        for (i, head) in heads.into_iter().enumerate() {
            let model = tiny(head, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
            let tokens: Vec<usize> = (0..16).map(|_| rng.random_range(0..11)).collect();
            let want = forward_distributions(&model, &tokens).unwrap();
            let mut st = DecodeState::new(&model, 64);
            for (t, &tok) in tokens.iter().enumerate() {
                let got = decode_step(&model, &mut st, tok).unwrap();
                for (g, w) in got.iter().zip(want.row(t)) {
                    assert!((g - w).abs() < 1e-10, "{head:?} position {t}");
                }
            }
        }
    }

    #[test]
    fn aligned_state_matches_forward_carry() {
        let model = tiny(HeadConfig::SHGA, 3);
        let tokens: Vec<usize> = (0..12).map(|i| (i * 7) % 11).collect();
        let out = model.forward(&tokens, &Carry::empty(&model.config)).unwrap();
        let mut st = DecodeState::new(&model, 64);
        for &t in &tokens {
            decode_step(&model, &mut st, t).unwrap();
        }
        for (a, b) in st.carry().heads.iter().flatten().zip(out.carry.heads.iter().flatten()) {
            assert_eq!(a.cache.counts, b.cache.counts);
            assert!(a.cache.value_means.max_abs_diff(&b.cache.value_means).unwrap() < 1e-12);
            let (pa, pb) = (a.prev.as_ref().unwrap(), b.prev.as_ref().unwrap());
            assert_eq!(pa.codes, pb.codes);
            assert!(pa.v.max_abs_diff(&pb.v).unwrap() < 1e-12);
        }
        // Resuming from the forward's carry gives the same next distribution.
        let mut resumed = DecodeState::from_carry(&model, out.carry, 12, 64);
        let a = decode_step(&model, &mut st, 5).unwrap();
        let b = decode_step(&model, &mut resumed, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn first_position_and_determinism() {
        let model = tiny(HeadConfig::SHGA, 9);
        let mut a = DecodeState::new(&model, 4);
        let mut b = a.clone();
        let da = decode_step(&model, &mut a, 3).unwrap();
        let db = decode_step(&model, &mut b, 3).unwrap();
        assert_eq!(da, db);
        assert_eq!(a, b);
        let want = forward_distributions(&model, &[3]).unwrap();
        for (g, w) in da.iter().zip(want.row(0)) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((da.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generate_length_seed_and_greedy() {
        let model = tiny(HeadConfig::SHGA, 4);
        let a = generate(&model, &[1, 2, 3], 13, 0.9, 7).unwrap();
        assert_eq!(a.len(), 13);
        assert_eq!(a, generate(&model, &[1, 2, 3], 13, 0.9, 7).unwrap());

        let greedy = generate(&model, &[5], 6, 1e-12, 1).unwrap();
        let mut st = DecodeState::new(&model, 7);
        let mut d = decode_step(&model, &mut st, 5).unwrap();
        for (i, &t) in greedy.iter().enumerate() {
            let best = (0..d.len()).fold(0, |b, j| if d[j] > d[b] { j } else { b });
            assert_eq!(t, best);
            if i + 1 < greedy.len() {
                d = decode_step(&model, &mut st, t).unwrap();
            }
        }
        assert!(generate(&model, &[], 3, 0.9, 0).is_err());
        assert!(generate(&model, &[1], 0, 0.9, 0).unwrap().is_empty());
    }

    #[test]
    fn decode_errors() {
        let model = tiny(HeadConfig::SHGA, 1);
        let mut st = DecodeState::new(&model, 2);
        assert!(matches!(decode_step(&model, &mut st, 11), Err(Error::TokenOutOfRange { .. })));
        decode_step(&model, &mut st, 0).unwrap();
        decode_step(&model, &mut st, 0).unwrap();
        assert!(decode_step(&model, &mut st, 0).is_err());
    }

    #[test]
    fn nucleus_single_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(sample_nucleus(&[0.7, 0.2, 0.1], 0.6, &mut rng).unwrap(), 0);
        }
        // Ties go to the lower id.
        for _ in 0..200 {
            assert_eq!(sample_nucleus(&[0.25, 0.5, 0.25], 0.5, &mut rng).unwrap(), 1);
            assert_eq!(sample_nucleus(&[0.4, 0.2, 0.4], 0.3, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn nucleus_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_nucleus(&[1.0], 0.0, &mut rng).is_err());
        assert!(sample_nucleus(&[1.0], -0.5, &mut rng).is_err());
        assert!(sample_nucleus(&[1.0], f64::NAN, &mut rng).is_err());
        assert!(sample_nucleus(&[0.5, 0.4], 1.0, &mut rng).is_err());
        assert!(sample_nucleus(&[1.5, -0.5], 1.0, &mut rng).is_err());
    }

    #[test]
    fn full_nucleus_frequencies() {
        let dist = [0.5, 0.3, 0.15, 0.05];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut hits = [0usize; 4];
        for _ in 0..n {
            hits[sample_nucleus(&dist, 1.0, &mut rng).unwrap()] += 1;
        }
        for (h, p) in hits.iter().zip(dist) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*h as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{hits:?}");
        }
    }
}

//! Byte-level language model: token embedding, a stack of vector-quantized
//! gated attention units with residual connections, and an untied linear
//! classifier.
//!
//! The forward pass runs on a [`Tape`] one window at a time. Everything
//! that precedes the window enters through a [`Carry`]: the compressed
//! cache over blocks older than the window's predecessor block, plus the
//! raw keys and values of that predecessor block. Carries are constants on
//! the tape, which truncates backpropagation at window boundaries.

use rand::Rng;

use crate::attention::bias::sinusoid_features;
use crate::attention::{GauParams, HeadConfig};
use crate::autodiff::{Entry, Tape, Var};
use crate::error::{Error, Result};
use crate::linear::CacheState;
use crate::quantizer::{quantize_batch, Codebook};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Codebook size `S`.
    pub codes: usize,
    /// Segment length `T`: caches are reset every `T / W` windows.
    pub seq_len: usize,
    pub block_len: usize,
    pub window: usize,
    pub vocab: usize,
    /// Commit loss coefficient.
    pub beta: f64,
    /// Codebook EMA decay.
    pub gamma: f64,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            d_k: 16,
            d_v: 128,
            codes: 16,
            seq_len: 256,
            block_len: 8,
            window: 32,
            vocab: 256,
            beta: 1e-4,
            gamma: 0.99,
            head: HeadConfig::SHGA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("codes", self.codes),
            ("seq_len", self.seq_len),
            ("block_len", self.block_len),
            ("window", self.window),
            ("vocab", self.vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.window % self.block_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "block_len {} must divide window {}",
                self.block_len, self.window
            )));
        }
        if self.seq_len % self.window != 0 {
            return Err(Error::InvalidArgument(format!(
                "window {} must divide seq_len {}",
                self.window, self.seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.beta < 0.0 {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1) and beta be non-negative".into()));
        }
        self.head.head_value_width(self.d_v)?;
        Ok(())
    }

    pub fn windows_per_segment(&self) -> usize {
        self.seq_len / self.window
    }
}

/// Raw quantized keys, values and shortcodes of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBlock {
    pub khat: Tensor,
    pub v: Tensor,
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCarry {
    /// Blocks older than `prev`.
    pub cache: CacheState,
    pub prev: Option<RawBlock>,
}

impl HeadCarry {
    pub fn empty(codes: usize, d_v: usize) -> Self {
        Self {
            cache: CacheState::empty(codes, d_v),
            prev: None,
        }
    }

    /// Cache including `prev`.
    pub fn folded(&self) -> Result<CacheState> {
        match &self.prev {
            Some(p) => self.cache.absorb(&p.codes, &p.v),
            None => Ok(self.cache.clone()),
        }
    }
}

/// Per-layer, per-key/value-head state carried between windows of one
/// stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Carry {
    pub heads: Vec<Vec<HeadCarry>>,
}

impl Carry {
    pub fn empty(cfg: &ModelConfig) -> Self {
        let dvh = cfg.d_v / cfg.head.query_heads();
        Self {
            heads: (0..cfg.layers)
                .map(|_| (0..cfg.head.kv_heads()).map(|_| HeadCarry::empty(cfg.codes, dvh)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `vocab × D_m`
    pub embed: Tensor,
    pub layers: Vec<GauParams>,
    /// `D_m × vocab`
    pub w_cls: Tensor,
    /// `[vocab]`
    pub b_cls: Tensor,
    /// `[layer][kv head]`
    pub codebooks: Vec<Vec<Codebook>>,
}

/// Tape handles for every parameter of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub w_cls: Var,
    pub b_cls: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_g: Var,
    pub w_o: Var,
    pub norm_gain: Var,
    pub bias_proj: Var,
}

impl ModelVars {
    /// Handles in [`Model::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.w_q, l.w_k, l.w_v, l.w_g, l.w_o, l.norm_gain, l.bias_proj]);
        }
        out.push(self.w_cls);
        out.push(self.b_cls);
        out
    }
}

/// Output of one stream's forward pass over a window.
#[derive(Debug, Clone)]
pub struct StreamForward {
    /// `len × vocab`
    pub logits: Var,
    /// Commit loss summed over layers and key/value heads.
    pub commit: Var,
    /// Per-layer commit values.
    pub layer_commit: Vec<f64>,
    /// Unquantized keys `[layer][kv head]` for the codebook update.
    pub keys: Vec<Vec<Tensor>>,
    pub codes: Vec<Vec<Vec<usize>>>,
    pub carry: Carry,
}

/// Plain (gradient-free) forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub layer_commit: Vec<f64>,
    pub carry: Carry,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize, std: f64| -> Result<Tensor> {
            use rand_distr::{Distribution, StandardNormal};
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Tensor::new(&[rows, cols], data)
        };
        let embed = normal(rng, config.vocab, config.d_model, 1.0)?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut codebooks = Vec::with_capacity(config.layers);
        let key_std = 1.0 / (config.d_k as f64).sqrt();
        for _ in 0..config.layers {
            layers.push(GauParams::init(
                config.d_model,
                config.d_k,
                config.d_v,
                config.block_len,
                config.head,
                rng,
            )?);
            codebooks.push(
                (0..config.head.kv_heads())
                    .map(|_| Codebook::random(config.codes, config.d_k, key_std, config.gamma, rng))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let w_cls = normal(rng, config.d_model, config.vocab, 1.0 / (config.d_model as f64).sqrt())?;
        let b_cls = Tensor::zeros(&[config.vocab]);
        Ok(Self {
            config,
            embed,
            layers,
            w_cls,
            b_cls,
            codebooks,
        })
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), &l.w_q));
            out.push((format!("layer{i}.w_k"), &l.w_k));
            out.push((format!("layer{i}.w_v"), &l.w_v));
            out.push((format!("layer{i}.w_g"), &l.w_g));
            out.push((format!("layer{i}.w_o"), &l.w_o));
            out.push((format!("layer{i}.norm_gain"), &l.norm_gain));
            out.push((format!("layer{i}.bias_proj"), &l.bias_proj));
        }
        out.push(("cls.w".to_string(), &self.w_cls));
        out.push(("cls.b".to_string(), &self.b_cls));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_g,
                &mut l.w_o,
                &mut l.norm_gain,
                &mut l.bias_proj,
            ]);
        }
        out.push(&mut self.w_cls);
        out.push(&mut self.b_cls);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on the tape, trainable or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let embed = leaf(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                w_q: leaf(&l.w_q),
                w_k: leaf(&l.w_k),
                w_v: leaf(&l.w_v),
                w_g: leaf(&l.w_g),
                w_o: leaf(&l.w_o),
                norm_gain: leaf(&l.norm_gain),
                bias_proj: leaf(&l.bias_proj),
            })
            .collect();
        let w_cls = leaf(&self.w_cls);
        let b_cls = leaf(&self.b_cls);
        ModelVars {
            embed,
            layers,
            w_cls,
            b_cls,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let l = self.config.block_len;
        if tokens.is_empty() || tokens.len() % l != 0 {
            return Err(Error::BlockLength {
                block_len: l,
                len: tokens.len(),
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records one stream's forward pass over `tokens` (a multiple of `L`
    /// long) that continues from `carry`.
    pub fn forward_stream(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize], carry: &Carry) -> Result<StreamForward> {
        self.check_tokens(tokens)?;
        if carry.heads.len() != self.layers.len() {
            return Err(Error::InvalidArgument("carry does not match layer count".into()));
        }
        let mut x = tape.gather_rows(vars.embed, tokens)?;
        let mut commits = Vec::with_capacity(self.layers.len());
        let mut layer_commit = Vec::with_capacity(self.layers.len());
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut codes = Vec::with_capacity(self.layers.len());
        let mut heads = Vec::with_capacity(self.layers.len());
        for (i, p) in self.layers.iter().enumerate() {
            let out = gau_tape(tape, p, &vars.layers[i], &self.codebooks[i], self.config.head, x, &carry.heads[i])?;
            x = out.y;
            layer_commit.push(tape.value(out.commit).item());
            commits.push(out.commit);
            keys.push(out.keys);
            codes.push(out.codes);
            heads.push(out.carry);
        }
        let proj = tape.matmul(x, vars.w_cls)?;
        let logits = tape.add_row(proj, vars.b_cls)?;
        let commit = tape.sum(&commits)?;
        Ok(StreamForward {
            logits,
            commit,
            layer_commit,
            keys,
            codes,
            carry: Carry { heads },
        })
    }

    /// Next-token logits for `tokens`, continuing from `carry`.
    pub fn forward(&self, tokens: &[usize], carry: &Carry) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward_stream(&mut tape, &vars, tokens, carry)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            layer_commit: out.layer_commit,
            carry: out.carry,
        })
    }
}

struct GauTapeOutput {
    y: Var,
    commit: Var,
    keys: Vec<Tensor>,
    codes: Vec<Vec<usize>>,
    carry: Vec<HeadCarry>,
}

/// Bias-table entries for one query block: log-count scores for the cache
/// columns, offset biases (or a full mask when there is no previous block)
/// for the previous-block columns, and masked offset biases for the current
/// block. Sources index the `L + 1` per-offset window biases.
fn block_bias_entries(l: usize, cache_counts: &[f64], has_prev: bool) -> Vec<Entry<f64>> {
    let s = cache_counts.len();
    let count_bias: Vec<f64> = cache_counts
        .iter()
        .map(|&n| if n > 0.0 { n.max(1.0).ln() } else { f64::neg_large() })
        .collect();
    let mut out = Vec::with_capacity(l * (s + 2 * l));
    for a in 0..l {
        out.extend(count_bias.iter().map(|&c| Entry::Const(c)));
        for b in 0..l {
            out.push(if !has_prev {
                Entry::Const(f64::neg_large())
            } else if a + l - b <= l {
                Entry::Src(a + l - b)
            } else {
                Entry::Const(0.0)
            });
        }
        for b in 0..l {
            out.push(if b > a { Entry::Const(f64::neg_large()) } else { Entry::Src(a - b) });
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn gau_tape(
    tape: &mut Tape,
    p: &GauParams,
    lv: &LayerVars,
    cbs: &[Codebook],
    head: HeadConfig,
    x: Var,
    carry: &[HeadCarry],
) -> Result<GauTapeOutput> {
    p.check(head)?;
    let len = tape.value(x).rows();
    let l = p.block_len;
    let dk = p.d_k;
    let nblocks = len / l;
    if carry.len() != head.kv_heads() || cbs.len() != head.kv_heads() {
        return Err(Error::InvalidArgument("carry or codebooks do not match key/value heads".into()));
    }

    let xt = tape.rms_norm(x, Some(lv.norm_gain))?;
    let qp = tape.matmul(xt, lv.w_q)?;
    let kp = tape.matmul(xt, lv.w_k)?;
    let vpre = tape.matmul(xt, lv.w_v)?;
    let vp = tape.silu(vpre);
    let gpre = tape.matmul(xt, lv.w_g)?;
    let g = tape.silu(gpre);
    let scale = 1.0 / p.tau.sqrt();
    let qk_head = |tape: &mut Tape, src: Var, h: usize| -> Result<Var> {
        let s = tape.slice_cols(src, h * dk, dk);
        let n = tape.rms_norm(s, None)?;
        Ok(tape.scale(n, scale))
    };
    let q: Vec<Var> = (0..head.query_heads()).map(|h| qk_head(tape, qp, h)).collect::<Result<_>>()?;
    let k: Vec<Var> = (0..head.kv_heads()).map(|h| qk_head(tape, kp, h)).collect::<Result<_>>()?;
    let dvh = tape.value(vp).cols() / head.kv_heads();
    let v: Vec<Var> = (0..head.kv_heads()).map(|h| tape.slice_cols(vp, h * dvh, dvh)).collect();

    // Per-offset biases, `(L + 1) × 1`.
    let feats = tape.constant(sinusoid_features(l + 1, dk));
    let proj_col = tape.reshape(lv.bias_proj, &[dk, 1])?;
    let window_bias = tape.matmul(feats, proj_col)?;

    let mut khat = Vec::with_capacity(k.len());
    let mut codes = Vec::with_capacity(k.len());
    let mut commits = Vec::with_capacity(k.len());
    let mut keys = Vec::with_capacity(k.len());
    for (kh, cb) in k.iter().zip(cbs) {
        let kval = tape.value(*kh).clone();
        let (q_val, z) = quantize_batch(&kval, cb)?;
        khat.push(tape.straight_through(*kh, q_val.clone())?);
        commits.push(tape.sq_dist_mean(*kh, q_val)?);
        codes.push(z.codes().to_vec());
        keys.push(kval);
    }

    // Cache means and counts per key/value head and local block.
    let mut block_caches: Vec<Vec<(Var, Vec<f64>)>> = Vec::with_capacity(k.len());
    let mut folded_carry = Vec::with_capacity(k.len());
    for (kv, hc) in carry.iter().enumerate() {
        let folded = hc.folded()?;
        let mut per_block: Vec<(Var, Vec<f64>)> = Vec::with_capacity(nblocks);
        for n in 0..nblocks {
            let entry = match n {
                0 => (tape.constant(hc.cache.value_means.clone()), hc.cache.counts.clone()),
                1 => (tape.constant(folded.value_means.clone()), folded.counts.clone()),
                _ => {
                    let (m, counts) = &per_block[n - 1];
                    let r = (n - 2) * l;
                    let vb = tape.slice_rows(v[kv], r, l);
                    tape.cache_absorb(*m, counts, vb, &codes[kv][r..r + l])?
                }
            };
            per_block.push(entry);
        }
        block_caches.push(per_block);
        folded_carry.push(folded);
    }

    let mut head_outs = Vec::with_capacity(q.len());
    for (h, &qh) in q.iter().enumerate() {
        let kv = head.kv_of(h);
        let cw = tape.constant(cbs[kv].codewords().clone());
        let mut outs = Vec::with_capacity(nblocks);
        for n in 0..nblocks {
            let r = n * l;
            let q_blk = tape.slice_rows(qh, r, l);
            let k_cur = tape.slice_rows(khat[kv], r, l);
            let v_cur = tape.slice_rows(v[kv], r, l);
            let (k_prev, v_prev, has_prev) = if n > 0 {
                (tape.slice_rows(khat[kv], r - l, l), tape.slice_rows(v[kv], r - l, l), true)
            } else if let Some(pb) = &carry[kv].prev {
                (tape.constant(pb.khat.clone()), tape.constant(pb.v.clone()), true)
            } else {
                (tape.constant(Tensor::zeros(&[l, dk])), tape.constant(Tensor::zeros(&[l, dvh])), false)
            };
            let (means, counts) = &block_caches[kv][n];
            let ext_k = tape.concat_rows(&[cw, k_prev, k_cur])?;
            let ext_v = tape.concat_rows(&[*means, v_prev, v_cur])?;
            let scores = tape.matmul_nt(q_blk, ext_k)?;
            let s = counts.len();
            let bias = tape.index_map(window_bias, &[l, s + 2 * l], block_bias_entries(l, counts, has_prev))?;
            let biased = tape.add(scores, bias)?;
            let w = tape.softmax_rows(biased);
            outs.push(tape.matmul(w, ext_v)?);
        }
        head_outs.push(tape.concat_rows(&outs)?);
    }
    let wv = tape.concat_cols(&head_outs)?;
    let gated = tape.mul(wv, g)?;
    let o = tape.matmul(gated, lv.w_o)?;
    let y = tape.add(x, o)?;
    let commit = tape.sum(&commits)?;

    let mut carry_out = Vec::with_capacity(k.len());
    for (kv, folded) in folded_carry.into_iter().enumerate() {
        let vval = tape.value(v[kv]);
        let kval = tape.value(khat[kv]);
        let last = (nblocks - 1) * l;
        let mut cache = folded;
        for r in (0..last).step_by(l) {
            cache = cache.absorb(&codes[kv][r..r + l], &vval.slice_rows(r, l))?;
        }
        carry_out.push(HeadCarry {
            cache,
            prev: Some(RawBlock {
                khat: kval.slice_rows(last, l),
                v: vval.slice_rows(last, l),
                codes: codes[kv][last..].to_vec(),
            }),
        });
    }
    Ok(GauTapeOutput {
        y,
        commit,
        keys,
        codes,
        carry: carry_out,
    })
}

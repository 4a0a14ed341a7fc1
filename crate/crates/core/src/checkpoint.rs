//! Binary training checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VQAT"
//! 4       4     u32 format version (1)
//! 8       8     u64 payload length P
//! 16      P     payload
//! 16+P    32    SHA-256 of bytes [0, 16+P)
//! ```
//!
//! The payload is a `u64` length plus UTF-8 config text (the `key = value`
//! form), then a `u64` entry count and that many entries:
//!
//! ```text
//! u32 name length, name bytes (UTF-8)
//! u8  tag: 0 = f64 tensor, 1 = u64 list
//! tag 0: u32 rank, rank × u64 dims, product(dims) × f64
//! tag 1: u64 count, count × u64
//! ```
//!
//! Entry names:
//!
//! | name | kind | contents |
//! |---|---|---|
//! | `param/<name>` | f64 | model parameter, names from `Model::params` |
//! | `adam/m/<name>`, `adam/v/<name>` | f64 | first and second moments |
//! | `codebook/<l>/<h>/words` | f64 | `S × D_k` codewords |
//! | `codebook/<l>/<h>/counts`, `.../sums` | f64 | EMA accumulators |
//! | `codebook/<l>/<h>/hyper` | f64 | `[decay, smoothing_eps]` |
//! | `carry/<b>/<l>/<h>/means`, `.../counts` | f64 | cache state of stream `b` |
//! | `carry/<b>/<l>/<h>/blocks` | u64 | `[blocks_absorbed]` |
//! | `carry/<b>/<l>/<h>/prev_khat`, `.../prev_v` | f64 | previous raw block, if any |
//! | `carry/<b>/<l>/<h>/prev_codes` | u64 | its shortcodes |
//! | `state` | u64 | `[step, ema_updates, seeded, seed, adam_t, streams]` |
//! | `batcher/cursors`, `batcher/fresh` | u64 | window iterator position, if saved |
//!
//! Floats are stored bit for bit, so a save/load round trip is exact.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::linear::CacheState;
use crate::model::{Carry, HeadCarry, Model, RawBlock};
use crate::optim::AdamW;
use crate::quantizer::Codebook;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"VQAT";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq)]
enum Value {
    F64(Tensor),
    U64(Vec<u64>),
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    /// Window iterator cursors and freshness flags.
    pub batcher: Option<(Vec<usize>, Vec<bool>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn entry(&mut self, name: &str, value: &Value) {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        match value {
            Value::F64(t) => {
                self.u8(0);
                self.u32(t.ndim() as u32);
                for &d in t.shape() {
                    self.u64(d as u64);
                }
                for &x in t.data() {
                    self.buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Value::U64(v) => {
                self.u8(1);
                self.u64(v.len() as u64);
                for &x in v {
                    self.u64(x);
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows usize"))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }
    fn entry(&mut self) -> Result<(String, Value)> {
        let n = self.u32()? as usize;
        let name = self.string(n)?;
        let value = match self.u8()? {
            0 => {
                let rank = self.u32()? as usize;
                let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
                let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
                let raw = self.take(count.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Value::F64(Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?)
            }
            1 => {
                let count = self.len()?;
                Value::U64((0..count).map(|_| self.u64()).collect::<Result<_>>()?)
            }
            t => return Err(bad(format!("{name}: unknown tag {t}"))),
        };
        Ok((name, value))
    }
}

struct Entries(HashMap<String, Value>);

impl Entries {
    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        match self.0.remove(name) {
            Some(Value::F64(t)) => Ok(t),
            Some(_) => Err(bad(format!("`{name}` is not a tensor"))),
            None => Err(bad(format!("missing `{name}`"))),
        }
    }
    fn opt_tensor(&mut self, name: &str) -> Result<Option<Tensor>> {
        if self.0.contains_key(name) {
            self.tensor(name).map(Some)
        } else {
            Ok(None)
        }
    }
    fn u64s(&mut self, name: &str) -> Result<Vec<u64>> {
        match self.0.remove(name) {
            Some(Value::U64(v)) => Ok(v),
            Some(_) => Err(bad(format!("`{name}` is not an integer list"))),
            None => Err(bad(format!("missing `{name}`"))),
        }
    }
    fn opt_u64s(&mut self, name: &str) -> Result<Option<Vec<u64>>> {
        if self.0.contains_key(name) {
            self.u64s(name).map(Some)
        } else {
            Ok(None)
        }
    }
    fn usizes(&mut self, name: &str) -> Result<Vec<usize>> {
        self.u64s(name)?
            .into_iter()
            .map(|x| usize::try_from(x).map_err(|_| bad(format!("`{name}` overflows usize"))))
            .collect()
    }
}

fn checked_shape(name: &str, t: Tensor, want: &[usize]) -> Result<Tensor> {
    if t.shape() != want {
        return Err(bad(format!("`{name}` has shape {:?}, expected {want:?}", t.shape())));
    }
    Ok(t)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut entries: Vec<(String, Value)> = Vec::new();
        let names: Vec<String> = st.model.params().into_iter().map(|(n, _)| n).collect();
        for (n, p) in st.model.params() {
            entries.push((format!("param/{n}"), Value::F64(p.clone())));
        }
        for (i, n) in names.iter().enumerate() {
            entries.push((format!("adam/m/{n}"), Value::F64(st.adam.m[i].clone())));
            entries.push((format!("adam/v/{n}"), Value::F64(st.adam.v[i].clone())));
        }
        for (l, books) in st.model.codebooks.iter().enumerate() {
            for (h, cb) in books.iter().enumerate() {
                let p = format!("codebook/{l}/{h}");
                let s = cb.size();
                entries.push((format!("{p}/words"), Value::F64(cb.codewords().clone())));
                entries.push((
                    format!("{p}/counts"),
                    Value::F64(Tensor::new(&[s], cb.ema_counts().to_vec()).expect("count length")),
                ));
                entries.push((format!("{p}/sums"), Value::F64(cb.ema_sums().clone())));
                entries.push((
                    format!("{p}/hyper"),
                    Value::F64(Tensor::new(&[2], vec![cb.decay(), cb.smoothing_eps()]).expect("two values")),
                ));
            }
        }
        for (b, carry) in st.carries.iter().enumerate() {
            for (l, heads) in carry.heads.iter().enumerate() {
                for (h, hc) in heads.iter().enumerate() {
                    let p = format!("carry/{b}/{l}/{h}");
                    let c = &hc.cache;
                    entries.push((format!("{p}/means"), Value::F64(c.value_means.clone())));
                    entries.push((
                        format!("{p}/counts"),
                        Value::F64(Tensor::new(&[c.counts.len()], c.counts.clone()).expect("count length")),
                    ));
                    entries.push((format!("{p}/blocks"), Value::U64(vec![c.blocks_absorbed as u64])));
                    if let Some(prev) = &hc.prev {
                        entries.push((format!("{p}/prev_khat"), Value::F64(prev.khat.clone())));
                        entries.push((format!("{p}/prev_v"), Value::F64(prev.v.clone())));
                        entries.push((
                            format!("{p}/prev_codes"),
                            Value::U64(prev.codes.iter().map(|&z| z as u64).collect()),
                        ));
                    }
                }
            }
        }
        entries.push((
            "state".into(),
            Value::U64(vec![
                st.step,
                st.ema_updates,
                st.seeded as u64,
                st.seed,
                st.adam.t,
                st.carries.len() as u64,
            ]),
        ));
        if let Some((cursors, fresh)) = &self.batcher {
            entries.push(("batcher/cursors".into(), Value::U64(cursors.iter().map(|&c| c as u64).collect())));
            entries.push(("batcher/fresh".into(), Value::U64(fresh.iter().map(|&f| f as u64).collect())));
        }

        let mut payload = Writer { buf: Vec::new() };
        let text = self.config.to_text();
        payload.u64(text.len() as u64);
        payload.buf.extend_from_slice(text.as_bytes());
        payload.u64(entries.len() as u64);
        for (name, value) in &entries {
            payload.entry(name, value);
        }

        let mut out = Writer {
            buf: Vec::with_capacity(HEADER + payload.buf.len() + DIGEST),
        };
        out.buf.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.u64(payload.buf.len() as u64);
        out.buf.extend_from_slice(&payload.buf);
        let digest = Sha256::digest(&out.buf);
        out.buf.extend_from_slice(&digest);
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER + DIGEST {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| bad("length overflows usize"))?;
        if bytes.len() != HEADER.saturating_add(len).saturating_add(DIGEST) {
            return Err(bad("length field does not match file size"));
        }
        let body_end = HEADER + len;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(bad("checksum mismatch"));
        }

        let mut r = Reader {
            buf: &bytes[HEADER..body_end],
            pos: 0,
        };
        let text_len = r.len()?;
        let text = r.string(text_len)?;
        let config = TrainConfig::parse(&text)?;
        let count = r.len()?;
        let mut map = HashMap::new();
        for _ in 0..count {
            let (name, value) = r.entry()?;
            if map.insert(name.clone(), value).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != r.buf.len() {
            return Err(bad("trailing bytes in payload"));
        }
        let mut e = Entries(map);

        let state = e.u64s("state")?;
        let [step, ema_updates, seeded, seed, adam_t, streams] = state[..] else {
            return Err(bad("`state` needs six values"));
        };
        let streams = usize::try_from(streams).map_err(|_| bad("stream count overflows usize"))?;

        // Shapes come from a freshly built model of the stored config.
        let mcfg = config.model.clone();
        let mut model = Model::init(mcfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect();
        for ((n, shape), slot) in names.iter().zip(model.params_mut()) {
            let key = format!("param/{n}");
            *slot = checked_shape(&key, e.tensor(&key)?, shape)?;
        }
        let mut adam = AdamW::new(names.iter().map(|(_, s)| s.as_slice()));
        adam.t = adam_t;
        for (i, (n, shape)) in names.iter().enumerate() {
            let (km, kv) = (format!("adam/m/{n}"), format!("adam/v/{n}"));
            adam.m[i] = checked_shape(&km, e.tensor(&km)?, shape)?;
            adam.v[i] = checked_shape(&kv, e.tensor(&kv)?, shape)?;
        }
        let kv_heads = mcfg.head.kv_heads();
        for l in 0..mcfg.layers {
            for h in 0..kv_heads {
                let p = format!("codebook/{l}/{h}");
                let words = checked_shape(&p, e.tensor(&format!("{p}/words"))?, &[mcfg.codes, mcfg.d_k])?;
                let counts = checked_shape(&p, e.tensor(&format!("{p}/counts"))?, &[mcfg.codes])?;
                let sums = checked_shape(&p, e.tensor(&format!("{p}/sums"))?, &[mcfg.codes, mcfg.d_k])?;
                let hyper = checked_shape(&p, e.tensor(&format!("{p}/hyper"))?, &[2])?;
                model.codebooks[l][h] = Codebook::from_parts(words, counts.into_data(), sums, hyper.data()[0], hyper.data()[1])?;
            }
        }
        let dvh = mcfg.d_v / mcfg.head.query_heads();
        let l_len = mcfg.block_len;
        let mut carries = Vec::with_capacity(streams);
        for b in 0..streams {
            let mut heads = Vec::with_capacity(mcfg.layers);
            for l in 0..mcfg.layers {
                let mut row = Vec::with_capacity(kv_heads);
                for h in 0..kv_heads {
                    let p = format!("carry/{b}/{l}/{h}");
                    let means = checked_shape(&p, e.tensor(&format!("{p}/means"))?, &[mcfg.codes, dvh])?;
                    let counts = checked_shape(&p, e.tensor(&format!("{p}/counts"))?, &[mcfg.codes])?;
                    let blocks = e.usizes(&format!("{p}/blocks"))?;
                    let cache = CacheState {
                        value_means: means,
                        counts: counts.into_data(),
                        blocks_absorbed: *blocks.first().ok_or_else(|| bad(format!("{p}/blocks is empty")))?,
                    };
                    let khat = e.opt_tensor(&format!("{p}/prev_khat"))?;
                    let v = e.opt_tensor(&format!("{p}/prev_v"))?;
                    let codes = e.opt_u64s(&format!("{p}/prev_codes"))?;
                    let prev = match (khat, v, codes) {
                        (Some(khat), Some(v), Some(codes)) => {
                            let codes: Vec<usize> = codes.into_iter().map(|z| z as usize).collect();
                            if codes.len() != l_len || codes.iter().any(|&z| z >= mcfg.codes) {
                                return Err(bad(format!("{p}/prev_codes is malformed")));
                            }
                            Some(RawBlock {
                                khat: checked_shape(&p, khat, &[l_len, mcfg.d_k])?,
                                v: checked_shape(&p, v, &[l_len, dvh])?,
                                codes,
                            })
                        }
                        (None, None, None) => None,
                        _ => return Err(bad(format!("{p}: incomplete previous block"))),
                    };
                    row.push(HeadCarry { cache, prev });
                }
                heads.push(row);
            }
            carries.push(Carry { heads });
        }
        let batcher = match (e.opt_u64s("batcher/cursors")?, e.opt_u64s("batcher/fresh")?) {
            (Some(c), Some(f)) => Some((c.into_iter().map(|x| x as usize).collect(), f.into_iter().map(|x| x != 0).collect())),
            (None, None) => None,
            _ => return Err(bad("incomplete batcher position")),
        };
        if let Some(extra) = e.0.keys().next() {
            return Err(bad(format!("unexpected entry `{extra}`")));
        }
        Ok(Self {
            state: TrainState {
                model,
                optim: config.optim.clone(),
                adam,
                carries,
                step,
                ema_updates,
                seeded: seeded != 0,
                seed,
            },
            config,
            batcher,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

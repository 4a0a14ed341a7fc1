//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. Keys mirror the fields of
//! [`ModelConfig`], [`OptimConfig`] and [`TrainConfig`]. Unknown or repeated
//! keys are errors, reported with their line number.
//!
//! ```text
//! # smoke run
//! corpus = smoke.txt
//! codes = 16
//! block_len = 8
//! windows = 500
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::{HeadConfig, HeadKind};
use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub corpus: Option<PathBuf>,
    pub split: SplitSpec,
    /// Streams per batch.
    pub batch: usize,
    /// Windows to train for.
    pub windows: u64,
    pub seed: u64,
    /// Validation windows scored at the end of a run; `0` skips evaluation.
    pub eval_windows: usize,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Write the checkpoint every this many windows as well as at the end;
    /// `0` writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig {
                total_steps: 500,
                ..OptimConfig::default()
            },
            corpus: None,
            split: SplitSpec::default(),
            batch: 8,
            windows: 500,
            seed: 0,
            eval_windows: 64,
            metrics: None,
            checkpoint: None,
            checkpoint_every: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "layers",
    "d_model",
    "d_k",
    "d_v",
    "codes",
    "seq_len",
    "block_len",
    "window",
    "vocab",
    "beta",
    "gamma",
    "head",
    "heads",
    "lr",
    "warmup_steps",
    "total_steps",
    "min_lr_ratio",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "clip",
    "corpus",
    "split",
    "batch",
    "windows",
    "seed",
    "eval_windows",
    "metrics",
    "checkpoint",
    "checkpoint_every",
];

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config {
        line,
        msg: format!("bad value `{value}` for `{key}`: {e}"),
    })
}

impl TrainConfig {
    /// Parses configuration text. Keys not given keep their defaults;
    /// `total_steps` follows `windows` unless set explicitly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let (mut head_kind, mut heads) = (cfg.model.head.kind, cfg.model.head.heads);
        let mut total_steps = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            };
            if seen.contains(&known) {
                return Err(Error::Config {
                    line,
                    msg: format!("`{key}` given twice"),
                });
            }
            seen.push(known);
            let m = &mut cfg.model;
            let o = &mut cfg.optim;
            match known {
                "layers" => m.layers = parse_value(line, key, value)?,
                "d_model" => m.d_model = parse_value(line, key, value)?,
                "d_k" => m.d_k = parse_value(line, key, value)?,
                "d_v" => m.d_v = parse_value(line, key, value)?,
                "codes" => m.codes = parse_value(line, key, value)?,
                "seq_len" => m.seq_len = parse_value(line, key, value)?,
                "block_len" => m.block_len = parse_value(line, key, value)?,
                "window" => m.window = parse_value(line, key, value)?,
                "vocab" => m.vocab = parse_value(line, key, value)?,
                "beta" => m.beta = parse_value(line, key, value)?,
                "gamma" => m.gamma = parse_value(line, key, value)?,
                "head" => head_kind = parse_value::<HeadKind>(line, key, value)?,
                "heads" => heads = parse_value(line, key, value)?,
                "lr" => o.lr = parse_value(line, key, value)?,
                "warmup_steps" => o.warmup_steps = parse_value(line, key, value)?,
                "total_steps" => total_steps = Some(parse_value(line, key, value)?),
                "min_lr_ratio" => o.min_lr_ratio = parse_value(line, key, value)?,
                "beta1" => o.beta1 = parse_value(line, key, value)?,
                "beta2" => o.beta2 = parse_value(line, key, value)?,
                "eps" => o.eps = parse_value(line, key, value)?,
                "weight_decay" => o.weight_decay = parse_value(line, key, value)?,
                "clip" => o.clip = parse_value(line, key, value)?,
                "corpus" => cfg.corpus = Some(PathBuf::from(value)),
                "split" => cfg.split = parse_value(line, key, value)?,
                "batch" => cfg.batch = parse_value(line, key, value)?,
                "windows" => cfg.windows = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "eval_windows" => cfg.eval_windows = parse_value(line, key, value)?,
                "metrics" => cfg.metrics = Some(PathBuf::from(value)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                "checkpoint_every" => cfg.checkpoint_every = parse_value(line, key, value)?,
                _ => unreachable!("key list and match arms disagree"),
            }
        }
        cfg.model.head = HeadConfig::new(head_kind, heads).map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.optim.total_steps = total_steps.unwrap_or(cfg.windows);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config {
            line: 0,
            msg: e.to_string(),
        };
        self.model.validate().map_err(wrap)?;
        self.split.validate().map_err(wrap)?;
        if self.batch == 0 {
            return Err(Error::Config {
                line: 0,
                msg: "batch must be positive".into(),
            });
        }
        Ok(())
    }

    /// Text form that [`TrainConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let s = &self.split;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("layers", m.layers.to_string());
        put("d_model", m.d_model.to_string());
        put("d_k", m.d_k.to_string());
        put("d_v", m.d_v.to_string());
        put("codes", m.codes.to_string());
        put("seq_len", m.seq_len.to_string());
        put("block_len", m.block_len.to_string());
        put("window", m.window.to_string());
        put("vocab", m.vocab.to_string());
        put("beta", m.beta.to_string());
        put("gamma", m.gamma.to_string());
        put("head", m.head.kind.to_string());
        put("heads", m.head.heads.to_string());
        put("lr", o.lr.to_string());
        put("warmup_steps", o.warmup_steps.to_string());
        put("total_steps", o.total_steps.to_string());
        put("min_lr_ratio", o.min_lr_ratio.to_string());
        put("beta1", o.beta1.to_string());
        put("beta2", o.beta2.to_string());
        put("eps", o.eps.to_string());
        put("weight_decay", o.weight_decay.to_string());
        put("clip", o.clip.to_string());
        if let Some(p) = &self.corpus {
            put("corpus", p.display().to_string());
        }
        put("split", format!("{}/{}/{}", s.train, s.val, s.test));
        put("batch", self.batch.to_string());
        put("windows", self.windows.to_string());
        put("seed", self.seed.to_string());
        put("eval_windows", self.eval_windows.to_string());
        if let Some(p) = &self.metrics {
            put("metrics", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            put("checkpoint", p.display().to_string());
        }
        put("checkpoint_every", self.checkpoint_every.to_string());
        out
    }
}

//! Byte corpora, deterministic splits and contiguous window batching.

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.9,
            val: 0.05,
            test: 0.05,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Corpus("split fractions must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Corpus(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Parses `train/val/test` with either fractions (`0.9/0.05/0.05`) or
/// percentages (`90/5/5`).
impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split('/')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Corpus(format!("bad split '{s}': {e}")))?;
        if parts.len() != 3 {
            return Err(Error::Corpus(format!("split '{s}' needs three parts")));
        }
        let total: f64 = parts.iter().sum();
        let scale = if (total - 100.0).abs() < 1e-6 { 100.0 } else { 1.0 };
        Self::new(parts[0] / scale, parts[1] / scale, parts[2] / scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
    /// End of train and end of validation.
    bounds: [usize; 2],
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, spec: SplitSpec) -> Result<Self> {
        spec.validate()?;
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let n = bytes.len() as f64;
        let train_end = (n * spec.train).round() as usize;
        let val_end = ((n * (spec.train + spec.val)).round() as usize).clamp(train_end, bytes.len());
        Ok(Self {
            bounds: [train_end.min(bytes.len()), val_end],
            bytes,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn vocab(&self) -> usize {
        BYTE_VOCAB
    }

    pub fn boundaries(&self) -> [usize; 2] {
        self.bounds
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.bounds[0],
            Split::Val => self.bounds[0]..self.bounds[1],
            Split::Test => self.bounds[1]..self.bytes.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[u8] {
        &self.bytes[self.range(split)]
    }
}

pub fn load_corpus(path: impl AsRef<Path>, spec: SplitSpec) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, spec)
}

/// `B` streams of `W` input tokens and their next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Stream `b` does not continue its previous window (first window, or
    /// it wrapped around the end of the split).
    pub reset: Vec<bool>,
    /// Split-relative start offset of each stream's window.
    pub offsets: Vec<usize>,
}

/// Endless iterator of contiguous windows, one cursor per stream.
#[derive(Debug, Clone)]
pub struct WindowBatcher<'a> {
    data: &'a [u8],
    window: usize,
    cursors: Vec<usize>,
    fresh: Vec<bool>,
}

pub fn window_batches<'a>(corpus: &'a Corpus, split: Split, batch: usize, window: usize, seed: u64) -> Result<WindowBatcher<'a>> {
    let data = corpus.split(split);
    if window == 0 || batch == 0 {
        return Err(Error::InvalidArgument("batch and window must be positive".into()));
    }
    if data.len() <= window {
        return Err(Error::Corpus(format!(
            "split of {} bytes is too short for windows of {window}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = data.len() - window - 1;
    let cursors = (0..batch).map(|_| rng.random_range(0..=last_start)).collect();
    Ok(WindowBatcher {
        data,
        window,
        cursors,
        fresh: vec![true; batch],
    })
}

impl<'a> WindowBatcher<'a> {
    /// Cursor and freshness per stream, enough to resume the iterator.
    pub fn position(&self) -> (Vec<usize>, Vec<bool>) {
        (self.cursors.clone(), self.fresh.clone())
    }

    pub fn restore(&mut self, cursors: Vec<usize>, fresh: Vec<bool>) -> Result<()> {
        if cursors.len() != self.cursors.len() || fresh.len() != self.fresh.len() {
            return Err(Error::InvalidArgument("batcher state has the wrong stream count".into()));
        }
        if cursors.iter().any(|&c| c + self.window + 1 > self.data.len()) {
            return Err(Error::InvalidArgument("batcher cursor out of range".into()));
        }
        self.cursors = cursors;
        self.fresh = fresh;
        Ok(())
    }
}

impl Iterator for WindowBatcher<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        let w = self.window;
        let b = self.cursors.len();
        let mut batch = WindowBatch {
            inputs: Vec::with_capacity(b),
            targets: Vec::with_capacity(b),
            reset: Vec::with_capacity(b),
            offsets: Vec::with_capacity(b),
        };
        for s in 0..b {
            if self.cursors[s] + w + 1 > self.data.len() {
                self.cursors[s] = 0;
                self.fresh[s] = true;
            }
            let p = self.cursors[s];
            batch.inputs.push(self.data[p..p + w].iter().map(|&x| x as usize).collect());
            batch.targets.push(self.data[p + 1..p + w + 1].iter().map(|&x| x as usize).collect());
            batch.reset.push(self.fresh[s]);
            batch.offsets.push(p);
            self.fresh[s] = false;
            self.cursors[s] = p + w;
        }
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn boundaries_from_fractions() {
        let c = Corpus::from_bytes(vec![7; 100], SplitSpec::new(0.9, 0.05, 0.05).unwrap()).unwrap();
        assert_eq!(c.boundaries(), [90, 95]);
        assert_eq!(c.split(Split::Val).len(), 5);
        assert_eq!(c.split(Split::Test).len(), 5);
        let again = Corpus::from_bytes(vec![7; 100], "90/5/5".parse().unwrap()).unwrap();
        assert_eq!(again.boundaries(), c.boundaries());
    }

    #[test]
    fn bad_inputs() {
        assert!(Corpus::from_bytes(Vec::new(), SplitSpec::default()).is_err());
        assert!(SplitSpec::new(0.5, 0.2, 0.2).is_err());
        assert!("90/5".parse::<SplitSpec>().is_err());
        assert!(load_corpus("/definitely/not/here.bin", SplitSpec::default()).is_err());
    }

    #[test]
    fn load_from_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&[1u8; 40]).unwrap();
        let c = load_corpus(f.path(), SplitSpec::default()).unwrap();
        assert_eq!(c.bytes().len(), 40);
        assert_eq!(c.boundaries(), [36, 38]);
    }

    #[test]
    fn windows_are_contiguous_shifted_and_in_split() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(1000).collect();
        let c = Corpus::from_bytes(bytes, SplitSpec::default()).unwrap();
        let range = c.range(Split::Train);
        let mut it = window_batches(&c, Split::Train, 3, 16, 5).unwrap();
        let mut last: Vec<Option<usize>> = vec![None; 3];
        for _ in 0..200 {
            let b = it.next().unwrap();
            for s in 0..3 {
                let off = b.offsets[s];
                assert!(range.start + off + 17 <= range.end);
                for i in 0..15 {
                    assert_eq!(b.targets[s][i], b.inputs[s][i + 1]);
                }
                assert_eq!(b.inputs[s][0], c.bytes()[range.start + off] as usize);
                if !b.reset[s] {
                    assert_eq!(Some(off), last[s].map(|p| p + 16));
                }
                last[s] = Some(off);
            }
        }
    }

    #[test]
    fn seeded_determinism_and_resume() {
        let c = Corpus::from_bytes((0..200u8).collect(), SplitSpec::default()).unwrap();
        let a: Vec<_> = window_batches(&c, Split::Train, 2, 8, 11).unwrap().take(30).collect();
        let b: Vec<_> = window_batches(&c, Split::Train, 2, 8, 11).unwrap().take(30).collect();
        assert_eq!(a, b);
        let mut it = window_batches(&c, Split::Train, 2, 8, 11).unwrap();
        for _ in 0..10 {
            it.next();
        }
        let (cur, fresh) = it.position();
        let mut resumed = window_batches(&c, Split::Train, 2, 8, 11).unwrap();
        resumed.restore(cur, fresh).unwrap();
        assert_eq!(resumed.next(), Some(a[10].clone()));
    }

    #[test]
    fn too_short_split() {
        let c = Corpus::from_bytes(vec![0; 10], SplitSpec::default()).unwrap();
        assert!(window_batches(&c, Split::Train, 1, 9, 0).is_err());
        assert!(window_batches(&c, Split::Train, 1, 8, 0).is_ok());
    }
}

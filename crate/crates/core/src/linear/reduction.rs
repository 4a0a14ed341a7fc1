//! Three ways to compute the lag-2 cache variables for every block: a
//! serial fold, lower-triangular count-fraction matrices, and an
//! associative scan over block summaries.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linear::CacheState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduction {
    Serial,
    Matmul,
    Assoc,
}

impl Reduction {
    pub const ALL: [Reduction; 3] = [Reduction::Serial, Reduction::Matmul, Reduction::Assoc];
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Serial => "serial",
            Reduction::Matmul => "matmul",
            Reduction::Assoc => "assoc",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Reduction::Serial),
            "matmul" => Ok(Reduction::Matmul),
            "assoc" | "associative" => Ok(Reduction::Assoc),
            other => Err(Error::UnknownReduction(other.to_string())),
        }
    }
}

fn block_summaries<F: Real>(z: &[usize], v: &Tensor<F>, codes: usize, block_len: usize) -> Result<Vec<CacheState<F>>> {
    if block_len == 0 || z.len() % block_len != 0 || v.rows() != z.len() {
        return Err(Error::BlockLength {
            block_len,
            len: z.len(),
        });
    }
    (0..z.len() / block_len)
        .map(|n| {
            let r = n * block_len;
            CacheState::from_block(&z[r..r + block_len], &v.slice_rows(r, block_len), codes)
        })
        .collect()
}

/// Output block `n` holds the state after blocks `0..=n-2`; blocks 0 and 1
/// get the empty state.
fn lag_two<F: Real>(inclusive: Vec<CacheState<F>>, codes: usize, d_v: usize) -> Vec<CacheState<F>> {
    let r = inclusive.len();
    let mut out = Vec::with_capacity(r);
    for _ in 0..r.min(2) {
        out.push(CacheState::empty(codes, d_v));
    }
    out.extend(inclusive.into_iter().take(r.saturating_sub(2)));
    out
}

pub fn cache_vars_serial<F: Real>(z: &[usize], v: &Tensor<F>, codes: usize, block_len: usize) -> Result<Vec<CacheState<F>>> {
    let blocks = block_summaries(z, v, codes, block_len)?;
    let mut acc = CacheState::empty(codes, v.cols());
    let mut inclusive = Vec::with_capacity(blocks.len());
    for b in &blocks {
        acc = acc.merge(b);
        inclusive.push(acc.clone());
    }
    Ok(lag_two(inclusive, codes, v.cols()))
}

pub fn cache_vars_matmul<F: Real>(z: &[usize], v: &Tensor<F>, codes: usize, block_len: usize) -> Result<Vec<CacheState<F>>> {
    let blocks = block_summaries(z, v, codes, block_len)?;
    let r = blocks.len();
    let dv = v.cols();
    let mut inclusive: Vec<CacheState<F>> = (0..r).map(|_| CacheState::empty(codes, dv)).collect();
    for s in 0..codes {
        // fracs[r][g] = count_g / Σ_{g' ≤ r} count_g' on and below the diagonal.
        let mut fracs = Tensor::zeros(&[r, r]);
        let mut running = F::zero();
        for row in 0..r {
            running += blocks[row].counts[s];
            let denom = running.max(F::one());
            for g in 0..=row {
                fracs.set(row, g, blocks[g].counts[s] / denom);
            }
            inclusive[row].counts[s] = running;
        }
        let mut means = Tensor::zeros(&[r, dv]);
        for (g, b) in blocks.iter().enumerate() {
            means.row_mut(g).copy_from_slice(b.value_means.row(s));
        }
        let cum = fracs.matmul(&means)?;
        for (row, state) in inclusive.iter_mut().enumerate() {
            state.value_means.row_mut(s).copy_from_slice(cum.row(row));
            state.blocks_absorbed = row + 1;
        }
    }
    Ok(lag_two(inclusive, codes, dv))
}

pub fn cache_vars_assoc<F: Real>(z: &[usize], v: &Tensor<F>, codes: usize, block_len: usize) -> Result<Vec<CacheState<F>>> {
    let blocks = block_summaries(z, v, codes, block_len)?;
    let inclusive = associative_scan(&blocks, &|a: &CacheState<F>, b: &CacheState<F>| a.merge(b));
    Ok(lag_two(inclusive, codes, v.cols()))
}

pub fn cache_vars<F: Real>(
    reduction: Reduction,
    z: &[usize],
    v: &Tensor<F>,
    codes: usize,
    block_len: usize,
) -> Result<Vec<CacheState<F>>> {
    match reduction {
        Reduction::Serial => cache_vars_serial(z, v, codes, block_len),
        Reduction::Matmul => cache_vars_matmul(z, v, codes, block_len),
        Reduction::Assoc => cache_vars_assoc(z, v, codes, block_len),
    }
}

/// Inclusive scan with an associative `op`, in the pairwise-reduce /
/// expand form: `O(n)` applications, `O(log n)` depth.
pub fn associative_scan<T: Clone>(items: &[T], op: &impl Fn(&T, &T) -> T) -> Vec<T> {
    let n = items.len();
    if n <= 1 {
        return items.to_vec();
    }
    let pairs: Vec<T> = items.chunks(2).map(|c| if c.len() == 2 { op(&c[0], &c[1]) } else { c[0].clone() }).collect();
    let reduced = associative_scan(&pairs, op);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            out.push(items[0].clone());
        } else if i % 2 == 1 {
            out.push(reduced[i / 2].clone());
        } else {
            out.push(op(&reduced[i / 2 - 1], &items[i]));
        }
    }
    out
}

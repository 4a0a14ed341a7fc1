//! Dense row-major arrays and the handful of operations the attention code
//! is written against.
//!
//! Two precisions are supported through [`Real`]: `f64` for everything that
//! is checked against an oracle, `f32` for throughput measurements.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Additive mask sentinel. Finite on purpose: `exp(NEG_LARGE - m)` is exactly
/// zero for any reasonable `m` and never produces NaN.
pub const NEG_LARGE: f64 = -1e30;

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    #[inline]
    fn neg_large() -> Self {
        Self::c(NEG_LARGE)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2, "rows() on a {}-d tensor", self.ndim());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2, "cols() on a {}-d tensor", self.ndim());
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// General axis permutation; `axes[k]` is the source axis of output axis `k`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of {nd} axes"),
            });
        }
        let src_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(axes).map(|(&i, &a)| i * src_strides[a]).sum();
            out.push(self.data[off]);
            for k in (0..nd).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(&out_shape, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Self::new(&[m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.cols() != other.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, n) = (self.rows(), other.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(dot(a, other.row(j)));
            }
        }
        Self::new(&[m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.rows() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (k, m, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![F::zero(); m * n];
        for p in 0..k {
            let arow = self.row(p);
            let brow = other.row(p);
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Self::new(&[m, n], out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows() * len);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Self {
            shape: vec![self.rows(), len],
            data,
        }
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.ndim() != 2 || p.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows();
        }
        Self::new(&[rows, c], data)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.ndim() != 2 || p.rows() != r) {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                msg: "all parts need the same row count".into(),
            });
        }
        let c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(&[r, c], data)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Axis pairing for [`contract`]: each `(i, j)` sums axis `i` of the left
/// operand against axis `j` of the right one.
#[derive(Debug, Clone, Default)]
pub struct ContractSpec {
    pub pairs: Vec<(usize, usize)>,
}

impl ContractSpec {
    pub fn new(pairs: &[(usize, usize)]) -> Self {
        Self {
            pairs: pairs.to_vec(),
        }
    }

    /// Ordinary matrix product / inner product pairing.
    pub fn matmul<F: Real>(a: &Tensor<F>) -> Self {
        Self::new(&[(a.ndim() - 1, 0)])
    }
}

/// Generalized tensor contraction. The result carries the unpaired axes of
/// `a` followed by the unpaired axes of `b`.
pub fn contract<F: Real>(a: &Tensor<F>, b: &Tensor<F>, spec: &ContractSpec) -> Result<Tensor<F>> {
    let mismatch = || Error::ShapeMismatch {
        op: "contract",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    let mut used_a = vec![false; a.ndim()];
    let mut used_b = vec![false; b.ndim()];
    for &(i, j) in &spec.pairs {
        if i >= a.ndim() || j >= b.ndim() || used_a[i] || used_b[j] || a.shape[i] != b.shape[j] {
            return Err(mismatch());
        }
        used_a[i] = true;
        used_b[j] = true;
    }
    let free_a: Vec<usize> = (0..a.ndim()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|&k| !used_b[k]).collect();

    let perm_a: Vec<usize> = free_a.iter().copied().chain(spec.pairs.iter().map(|p| p.0)).collect();
    let perm_b: Vec<usize> = spec.pairs.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let k: usize = spec.pairs.iter().map(|p| a.shape[p.0]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();

    let a2 = a.permute(&perm_a)?.reshape(&[m, k])?;
    let b2 = b.permute(&perm_b)?.reshape(&[k, n])?;
    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&k| a.shape[k])
        .chain(free_b.iter().map(|&k| b.shape[k]))
        .collect();
    a2.matmul(&b2)?.reshape(&out_shape)
}

/// Softmax along the last axis, computed as `exp(x - rowmax) / Σ`.
/// Entries at `NEG_LARGE` receive exactly zero weight.
pub fn row_softmax_stable<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    let c = *x.shape.last().unwrap_or(&1);
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Replaces entries `(i, j)` of the trailing two axes for which `mask(i, j)`
/// holds.
pub fn masked_fill<F: Real>(x: &Tensor<F>, mask: impl Fn(usize, usize) -> bool, value: F) -> Tensor<F> {
    let mut out = x.clone();
    let nd = x.ndim();
    if nd < 2 {
        return out;
    }
    let (r, c) = (x.shape[nd - 2], x.shape[nd - 1]);
    if r * c == 0 {
        return out;
    }
    for mat in out.data.chunks_mut(r * c) {
        for i in 0..r {
            for j in 0..c {
                if mask(i, j) {
                    mat[i * c + j] = value;
                }
            }
        }
    }
    out
}

/// Shifts blocks of `block_len` rows along the time axis (the axis before
/// the feature axis) by one block: `[A, B, C] -> [0, A, B]`.
pub fn pad_block_shift<F: Real>(x: &Tensor<F>, block_len: usize) -> Result<Tensor<F>> {
    let nd = x.ndim();
    if nd < 2 || block_len == 0 || x.shape[nd - 2] % block_len != 0 || x.shape[nd - 2] == 0 {
        return Err(Error::InvalidShape {
            op: "pad_block_shift",
            msg: format!("shape {:?} has no whole blocks of length {block_len}", x.shape),
        });
    }
    let t = x.shape[nd - 2];
    let d = x.shape[nd - 1];
    let shift = block_len * d;
    let mut out = Tensor::zeros(&x.shape);
    for (src, dst) in x.data.chunks(t * d).zip(out.data.chunks_mut(t * d)) {
        dst[shift..].copy_from_slice(&src[..t * d - shift]);
    }
    Ok(out)
}

/// Rows `n·L .. (n+1)·L` of a `T×D` tensor; negative `n` denotes the zero
/// block used by the recurrence's padding convention.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a, F: Real = f64> {
    pub source: &'a Tensor<F>,
    pub index: isize,
    pub block_len: usize,
}

impl<'a, F: Real> BlockView<'a, F> {
    pub fn new(source: &'a Tensor<F>, index: isize, block_len: usize) -> Self {
        Self {
            source,
            index,
            block_len,
        }
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        if self.index < 0 {
            return Tensor::zeros(&[self.block_len, self.source.cols()]);
        }
        self.source.slice_rows(self.index as usize * self.block_len, self.block_len)
    }
}

pub fn block<F: Real>(x: &Tensor<F>, index: isize, block_len: usize) -> Tensor<F> {
    BlockView::new(x, index, block_len).to_tensor()
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// Row-wise RMS normalization with an optional per-feature gain.
pub fn rms_norm<F: Real>(x: &Tensor<F>, gain: Option<&[F]>) -> Tensor<F> {
    let mut out = x.clone();
    let c = x.cols();
    let eps = F::c(RMS_EPS);
    for row in out.data.chunks_mut(c) {
        let ms = row.iter().map(|&v| v * v).sum::<F>() / F::c(c as f64);
        let inv = F::one() / (ms + eps).sqrt();
        match gain {
            Some(g) => row.iter_mut().zip(g).for_each(|(v, &gv)| *v *= inv * gv),
            None => row.iter_mut().for_each(|v| *v *= inv),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    #[allow(dead_code)]
    type Tensor = super::Tensor<f64>;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn contract_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let out = contract(&eye, &col, &ContractSpec::matmul(&eye)).unwrap();
        assert_eq!(out, col);
    }

    #[test]
    fn contract_inner_product() {
        let a = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let out = contract(&a, &b, &ContractSpec::new(&[(0, 0)])).unwrap();
        assert_eq!(out.shape(), &[] as &[usize]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn contract_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[5, 4]);
        let b = random(&mut rng, &[4, 3]);
        let out = contract(&a, &b, &ContractSpec::matmul(&a)).unwrap();
        assert!(out.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn contract_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = contract(&a, &b, &ContractSpec::matmul(&a)).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn contract_many_random_cases_against_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..120 {
            let (i, j, k, l) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            // a: i×k×j, b: l×j×k, contract k and j.
            let a = random(&mut rng, &[i, k, j]);
            let b = random(&mut rng, &[l, j, k]);
            let out = contract(&a, &b, &ContractSpec::new(&[(1, 2), (2, 1)])).unwrap();
            assert_eq!(out.shape(), &[i, l]);
            for x in 0..i {
                for y in 0..l {
                    let mut s = 0.0;
                    for p in 0..k {
                        for q in 0..j {
                            s += a.data()[(x * k + p) * j + q] * b.data()[(y * j + q) * k + p];
                        }
                    }
                    assert!((out.data()[x * l + y] - s).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[3, 5]);
        let b = random(&mut rng, &[4, 5]);
        let nt = a.matmul_nt(&b).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&b.transpose()).unwrap()).unwrap() < 1e-14);
        let c = random(&mut rng, &[3, 2]);
        let tn = a.matmul_tn(&c).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&c).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(row_softmax_stable(&x).data(), &[0.5, 0.5]);
        for c in [-3.0, 0.0, 7.5, 1e6] {
            let x = Tensor::from_f64(&[1, 2], &[c, NEG_LARGE]).unwrap();
            assert_eq!(row_softmax_stable(&x).data(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn masked_fill_examples() {
        let x = Tensor::from_f64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let y = masked_fill(&x, |i, j| j > i, NEG_LARGE);
        for i in 0..3 {
            for j in 0..3 {
                let want = if j > i { NEG_LARGE } else { x.at(i, j) };
                assert_eq!(y.at(i, j), want);
            }
        }
        assert_eq!(masked_fill(&x, |_, _| false, 0.0), x);
        assert!(masked_fill(&x, |_, _| true, 0.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_block_shift_examples() {
        let x = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let once = pad_block_shift(&x, 1).unwrap();
        assert_eq!(once.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(pad_block_shift(&once, 1).unwrap().data(), &[0.0, 0.0, 1.0]);
        let single = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pad_block_shift(&single, 2).unwrap().data(), &[0.0; 4]);
        assert!(pad_block_shift(&single, 3).is_err());
    }

    #[test]
    fn negative_block_is_zero() {
        let x = Tensor::from_f64(&[4, 3], &[1.0; 12]).unwrap();
        let b = block(&x, -1, 2);
        assert_eq!(b.shape(), &[2, 3]);
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert_eq!(block(&x, 1, 2).data(), &[1.0; 6]);
    }

    #[test]
    fn rms_norm_unit_rms() {
        let x = Tensor::from_f64(&[1, 4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = rms_norm(&x, None);
        let ms: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            shift in -50.0f64..50.0,
        ) {
            let x = Tensor::new(&[3, 4], vals).unwrap();
            let y = row_softmax_stable(&x);
            for i in 0..3 {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
            }
            let shifted = row_softmax_stable(&x.map(|v| v + shift));
            prop_assert!(y.max_abs_diff(&shifted).unwrap() <= 1e-12);
            let plus17 = row_softmax_stable(&x.map(|v| v + 17.0));
            prop_assert!(y.max_abs_diff(&plus17).unwrap() <= 1e-12);
        }

        #[test]
        fn permute_round_trip(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let n = a * b * c;
            let x = Tensor::new(&[a, b, c], (0..n).map(|v| v as f64).collect()).unwrap();
            let p = x.permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(p.shape(), &[c, a, b]);
            prop_assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
        }
    }
}

//! Reverse-mode differentiation over a closed set of primitive ops.
//!
//! A [`Tape`] records every op in execution order together with whatever
//! the backward rule needs. Stop-gradient boundaries are explicit: constants
//! never receive gradient, the straight-through op passes its upstream
//! gradient unchanged, and the commit-loss target is stored as a plain
//! tensor.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tensor, RMS_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One entry of an [`Tape::index_map`] result: either a copy of a source
/// element or a fixed constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry<F> {
    Src(usize),
    Const(F),
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Option<Var>, inv: Vec<F> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    StraightThrough(Var),
    SqDistMean { x: Var, target: Tensor<F> },
    IndexMap { src: Var, entries: Vec<Entry<F>> },
    CacheAbsorb { prior: Var, v: Var, codes: Vec<usize>, keep: Vec<F>, denom: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<F> },
    Sum(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<F: Real = f64> {
    nodes: Vec<Node<F>>,
    frozen_quantizer: bool,
}

fn mismatch<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen_quantizer: false,
        }
    }

    /// A tape whose straight-through ops pass no gradient, matching the
    /// true derivative of a quantizer with locally constant assignments.
    /// Finite-difference checks compare against this mode.
    pub fn with_frozen_quantizer() -> Self {
        Self {
            nodes: Vec::new(),
            frozen_quantizer: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds the row vector `b` (any shape with `cols(a)` elements) to every
    /// row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if x.ndim() != 2 || r.len() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(r.data()).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::tensor::silu);
        self.push(out, Op::Silu(a), &[a])
    }

    /// Row-wise RMS normalization with an optional per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::InvalidShape {
                op: "rms_norm",
                msg: format!("expected a matrix, got {:?}", xv.shape()),
            });
        }
        let c = xv.cols();
        if let Some(g) = gain {
            if self.value(g).len() != c {
                return Err(mismatch("rms_norm", xv, self.value(g)));
            }
        }
        let eps = F::c(RMS_EPS);
        let inv: Vec<F> = xv
            .data()
            .chunks(c)
            .map(|row| F::one() / (row.iter().map(|&v| v * v).sum::<F>() / F::c(c as f64) + eps).sqrt())
            .collect();
        let mut out = xv.clone();
        let gv = gain.map(|g| self.value(g).data().to_vec());
        for (row, &r) in out.data_mut().chunks_mut(c).zip(&inv) {
            match &gv {
                Some(g) => row.iter_mut().zip(g).for_each(|(v, &gg)| *v *= r * gg),
                None => row.iter_mut().for_each(|v| *v *= r),
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(gain).collect();
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, &parents))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Max-subtracted row softmax; the max is a constant for the backward
    /// pass.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = crate::tensor::row_softmax_stable(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut rows = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    token: i,
                    vocab: t.rows(),
                });
            }
            rows.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), t.cols()], rows)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Forward value `quantized`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<F>) -> Result<Var> {
        if quantized.shape() != self.value(x).shape() {
            return Err(mismatch("straight_through", self.value(x), &quantized));
        }
        if self.frozen_quantizer {
            return Ok(self.constant(quantized));
        }
        Ok(self.push(quantized, Op::StraightThrough(x), &[x]))
    }

    /// `(1/rows) Σ_t ‖x_t − target_t‖²` with `target` held constant.
    pub fn sq_dist_mean(&mut self, x: Var, target: Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || xv.ndim() != 2 {
            return Err(mismatch("sq_dist_mean", xv, &target));
        }
        let rows = xv.rows().max(1);
        let total: F = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(total / F::c(rows as f64));
        Ok(self.push(out, Op::SqDistMean { x, target }, &[x]))
    }

    /// Builds a tensor of `shape` whose entries copy elements of the
    /// flattened `src` or hold constants.
    pub fn index_map(&mut self, src: Var, shape: &[usize], entries: Vec<Entry<F>>) -> Result<Var> {
        let sv = self.value(src);
        let mut data = Vec::with_capacity(entries.len());
        for e in &entries {
            data.push(match *e {
                Entry::Src(i) => *sv.data().get(i).ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range")))?,
                Entry::Const(c) => c,
            });
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::IndexMap { src, entries }, &[src]))
    }

    /// Folds one block into a per-code running mean:
    /// `M_s = (n_s·m_s + Σ_{t: z_t = s} v_t) / max(n_s + c_s, 1)`, where
    /// `m = prior`, `n = prior_counts` and `c_s` counts code `s` in `codes`.
    /// Returns the new means and counts.
    pub fn cache_absorb(&mut self, prior: Var, prior_counts: &[F], v: Var, codes: &[usize]) -> Result<(Var, Vec<F>)> {
        let (pv, vv) = (self.value(prior), self.value(v));
        let s = prior_counts.len();
        if pv.ndim() != 2 || pv.rows() != s || vv.ndim() != 2 || pv.cols() != vv.cols() || codes.len() != vv.rows() {
            return Err(mismatch("cache_absorb", pv, vv));
        }
        let mut counts = prior_counts.to_vec();
        let mut sums = pv.clone();
        for c in 0..s {
            let n = prior_counts[c];
            sums.row_mut(c).iter_mut().for_each(|x| *x *= n);
        }
        for (t, &c) in codes.iter().enumerate() {
            if c >= s {
                return Err(Error::CodeOutOfRange { code: c, size: s });
            }
            counts[c] += F::one();
            sums.row_mut(c).iter_mut().zip(vv.row(t)).for_each(|(a, &b)| *a += b);
        }
        let denom: Vec<F> = counts.iter().map(|&n| n.max(F::one())).collect();
        for c in 0..s {
            let d = denom[c];
            sums.row_mut(c).iter_mut().for_each(|x| *x /= d);
        }
        let keep = prior_counts.iter().zip(&denom).map(|(&n, &d)| n / d).collect();
        let out = self.push(
            sums,
            Op::CacheAbsorb {
                prior,
                v,
                codes: codes.to_vec(),
                keep,
                denom,
            },
            &[prior, v],
        );
        Ok((out, counts))
    }

    /// Mean next-token negative log-likelihood.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let probs = crate::tensor::row_softmax_stable(lv);
        let v = lv.cols();
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let row = lv.row(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / F::c(targets.len().max(1) as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("sum of nothing".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p))?;
        }
        Ok(self.push(out, Op::Sum(parts.to_vec()), parts))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss variable is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op<F>, out: &Tensor<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs_grad(*b) {
                    let c = g.cols();
                    let mut col = vec![F::zero(); c];
                    for row in g.data().chunks(c) {
                        col.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), col)?)?;
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.zip_with(g, "silu_backward", |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (F::one() + x * (F::one() - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let n = F::c(c as f64);
                let gv: Option<&[F]> = gain.map(|gg| self.value(gg).data());
                if self.needs_grad(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, ((xr, gr), dr)) in xv
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(dx.data_mut().chunks_mut(c))
                        .enumerate()
                    {
                        let ri = inv[r];
                        // u = dy ⊙ gain
                        let u = |j: usize| match gv {
                            Some(gg) => gr[j] * gg[j],
                            None => gr[j],
                        };
                        let proj: F = (0..c).map(|j| u(j) * xr[j]).sum();
                        let k = ri * ri * ri * proj / n;
                        for j in 0..c {
                            dr[j] = ri * u(j) - k * xr[j];
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(gg) = gain {
                    if self.needs_grad(*gg) {
                        let mut dg = vec![F::zero(); c];
                        for (r, (xr, gr)) in xv.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                            for j in 0..c {
                                dg[j] += gr[j] * xr[j] * inv[r];
                            }
                        }
                        self.accumulate(grads, *gg, Tensor::new(self.value(*gg).shape(), dg)?)?;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = xv.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(at, rows))?;
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(at, cols))?;
                    }
                    at += cols;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?)?;
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = Tensor::zeros(out.shape());
                for ((yr, gr), dr) in out.data().chunks(c).zip(g.data().chunks(c)).zip(d.data_mut().chunks_mut(c)) {
                    let inner: F = yr.iter().zip(gr).map(|(&y, &gy)| y * gy).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::GatherRows { table, idx } => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    d.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *table, d)?;
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone())?,
            Op::SqDistMean { x, target } => {
                let xv = self.value(*x);
                let k = F::c(2.0) * g.item() / F::c(xv.rows().max(1) as f64);
                let d = xv.zip_with(target, "sq_dist_backward", |a, b| k * (a - b))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::IndexMap { src, entries } => {
                let sv = self.value(*src);
                let mut d = Tensor::zeros(sv.shape());
                for (e, &gv) in entries.iter().zip(g.data()) {
                    if let Entry::Src(i) = e {
                        d.data_mut()[*i] += gv;
                    }
                }
                self.accumulate(grads, *src, d)?;
            }
            Op::CacheAbsorb { prior, v, codes, keep, denom } => {
                let mut dp = g.clone();
                for (c, &k) in keep.iter().enumerate() {
                    dp.row_mut(c).iter_mut().for_each(|x| *x *= k);
                }
                self.accumulate(grads, *prior, dp)?;
                let mut dv = Tensor::zeros(self.value(*v).shape());
                for (t, &c) in codes.iter().enumerate() {
                    let k = F::one() / denom[c];
                    dv.row_mut(t).iter_mut().zip(g.row(c)).for_each(|(a, &b)| *a = b * k);
                }
                self.accumulate(grads, *v, dv)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = g.item() / F::c(targets.len().max(1) as f64);
                let mut d = probs.scale(k);
                for (i, &t) in targets.iter().enumerate() {
                    let cur = d.at(i, t);
                    d.set(i, t, cur - k);
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<F: Real = f64> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`; `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is not on any path.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    #[allow(dead_code)]
    type Tensor = crate::tensor::Tensor<f64>;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the gradient of every parameter of `build` against central
    /// differences.
    fn check(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get_or_zero(vars[pi], p.shape());
            for e in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[e] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
                    let l = build(&mut t, &vs);
                    t.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6f64.max(1e-5 * fd.abs()),
                    "param {pi} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn total(tape: &mut Tape, x: Var) -> Var {
        // Weighted sum keeps every element's gradient distinct.
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let w = tape.constant(Tensor::new(&shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap());
        let m = tape.mul(x, w).unwrap();
        let flat = tape.reshape(m, &[1, n]).unwrap();
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
        let s = tape.matmul(flat, ones).unwrap();
        tape.reshape(s, &[]).unwrap()
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check(vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[5, 4])], |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap();
            let anb = t.matmul_nt(v[0], v[2]).unwrap();
            let a = total(t, ab);
            let b = total(t, anb);
            t.sum(&[a, b]).unwrap()
        });
    }

    #[test]
    fn elementwise_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, &[3, 5]), random(&mut rng, &[5]), random(&mut rng, &[3, 5])], |t, v| {
            let n = t.rms_norm(v[0], Some(v[1])).unwrap();
            let n2 = t.rms_norm(v[2], None).unwrap();
            let s = t.silu(n);
            let m = t.mul(s, n2).unwrap();
            let r = t.add_row(m, v[1]).unwrap();
            let sc = t.scale(r, 1.7);
            let a = t.add(sc, v[2]).unwrap();
            total(t, a)
        });
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, &[4, 6]), random(&mut rng, &[4, 6])], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let a = total(t, sm);
            let ce = t.cross_entropy(v[1], &[0, 5, 2, 2]).unwrap();
            t.sum(&[a, ce]).unwrap()
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, &[4, 3]), random(&mut rng, &[5, 3]), random(&mut rng, &[6])], |t, v| {
            let cr = t.concat_rows(&[v[0], v[1]]).unwrap();
            let sl = t.slice_rows(cr, 2, 5);
            let sc = t.slice_cols(sl, 1, 2);
            let cc = t.concat_cols(&[sc, sl]).unwrap();
            let g = t.gather_rows(v[1], &[4, 0, 4, 2, 1]).unwrap();
            let gg = t.concat_cols(&[cc, g]).unwrap();
            let im = t
                .index_map(v[2], &[2, 2], vec![Entry::Src(5), Entry::Const(3.0), Entry::Src(0), Entry::Src(5)])
                .unwrap();
            let a = total(t, gg);
            let b = total(t, im);
            t.sum(&[a, b]).unwrap()
        });
    }

    #[test]
    fn straight_through_and_commit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random(&mut rng, &[3, 2]);
        let tc = target.clone();
        check(vec![random(&mut rng, &[3, 2])], move |t, v| t.sq_dist_mean(v[0], tc.clone()).unwrap());
        // Definitional check: upstream gradient passes through unchanged.
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, &[3, 2]));
        let st = tape.straight_through(x, target).unwrap();
        let l = total(&mut tape, st);
        let g = tape.backward(l).unwrap();
        let expect: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * i as f64).collect();
        assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn cache_absorb_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&mut rng, &[3, 2]), random(&mut rng, &[4, 2]), random(&mut rng, &[2, 2])], |t, v| {
            let (m, n) = t.cache_absorb(v[0], &[2.0, 0.0, 1.0], v[1], &[0, 1, 1, 2]).unwrap();
            let (m2, _) = t.cache_absorb(m, &n, v[2], &[1, 0]).unwrap();
            total(t, m2)
        });
    }

    #[test]
    fn cache_absorb_value_matches_cache_state() {
        use crate::linear::CacheState;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random(&mut rng, &[8, 3]);
        let codes = [0, 2, 2, 1, 0, 0, 3, 2];
        let prior = CacheState::empty(4, 3).absorb(&codes[..4], &v.slice_rows(0, 4)).unwrap();
        let expect = prior.absorb(&codes[4..], &v.slice_rows(4, 4)).unwrap();
        let mut tape = Tape::new();
        let pm = tape.constant(prior.value_means.clone());
        let vv = tape.param(v.slice_rows(4, 4));
        let (m, n) = tape.cache_absorb(pm, &prior.counts, vv, &codes[4..]).unwrap();
        assert!(tape.value(m).max_abs_diff(&expect.value_means).unwrap() < 1e-14);
        assert_eq!(n, expect.counts);
    }

    #[test]
    fn disconnected_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 2], 1.0));
        let b = tape.param(Tensor::full(&[2, 2], 2.0));
        let _unused = tape.silu(b);
        let l = total(&mut tape, a);
        let g = tape.backward(l).unwrap();
        assert!(g.get(b).is_none());
        assert!(g.get_or_zero(b, &[2, 2]).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn doubling_loss_doubles_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random(&mut rng, &[3, 3]);
        let grad = |k: f64| {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let s = tape.softmax_rows(x);
            let l = total(&mut tape, s);
            let l2 = tape.scale(l, k);
            tape.backward(l2).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2) = (grad(1.0), grad(2.0));
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut tape: Tape = Tape::new();
        let a = tape.param(Tensor::full(&[2], 1.0));
        assert!(tape.backward(a).is_err());
    }
}

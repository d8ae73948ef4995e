//! Differentiable primitives recorded on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};

use super::linalg;
use super::real::Real;
use super::tape::{Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn zip_add<T: Real>(acc: &mut [T], v: &[T]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += *b);
}

// ---------------------------------------------------------------------------
// linear / matmul

struct LinearOp {
    n: usize,
    din: usize,
    dout: usize,
    has_bias: bool,
}

impl<T: Real> Op<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, din, dout) = (self.n, self.din, self.dout);
        let mut out = vec![None, None];
        if needs[0] {
            let mut dx = vec![T::zero(); n * din];
            linalg::matmul_nt_acc(g, w, &mut dx, n, dout, din);
            out[0] = Some(dx);
        }
        if needs[1] {
            let mut dw = vec![T::zero(); din * dout];
            linalg::matmul_tn_acc(x, g, &mut dw, n, din, dout);
            out[1] = Some(dw);
        }
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![T::zero(); dout];
                linalg::col_sum_acc(g, &mut db, n, dout);
                db
            }));
        }
        out
    }
}

struct MatMulNtOp {
    n: usize,
    c: usize,
    k: usize,
}

impl<T: Real> Op<T> for MatMulNtOp {
    fn name(&self) -> &'static str {
        "matmul_nt"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, c, k) = (self.n, self.c, self.k);
        // out = a·bᵀ, da = g·b, db = gᵀ·a
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); n * c];
            linalg::matmul(g, b, &mut da, n, k, c);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); k * c];
            linalg::matmul_tn_acc(g, a, &mut db, n, k, c);
            db
        });
        vec![da, db]
    }
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl<T: Real> Op<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        match self.0 {
            Binary::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            Binary::Sub => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ],
            Binary::Mul => vec![
                needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
            ],
        }
    }
}

#[derive(Clone, Copy)]
enum Unary<T> {
    Scale(T),
    Relu,
    Tanh,
    Exp,
}

struct UnaryOp<T>(Unary<T>);

impl<T: Real> Op<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Scale(_) => "scale",
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
        }
    }

    fn backward(&self, inputs: &[&[T]], y: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let d: Vec<T> = match self.0 {
            Unary::Scale(c) => g.iter().map(|&g| g * c).collect(),
            Unary::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Unary::Tanh => g
                .iter()
                .zip(y)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
            Unary::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
        };
        vec![Some(d)]
    }
}

struct SumOp {
    scale_by_len: bool,
}

impl<T: Real> Op<T> for SumOp {
    fn name(&self) -> &'static str {
        if self.scale_by_len {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = inputs[0].len();
        let v = if self.scale_by_len {
            g[0] / T::from_usize(n).unwrap()
        } else {
            g[0]
        };
        vec![Some(vec![v; n])]
    }
}

struct ReshapeOp;

impl<T: Real> Op<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

// ---------------------------------------------------------------------------
// segment reductions and gathers

struct SegmentOp {
    ids: Vec<usize>,
    counts: Vec<usize>,
    argmax: Vec<usize>,
    channels: usize,
    mode: Reduce,
}

impl<T: Real> Op<T> for SegmentOp {
    fn name(&self) -> &'static str {
        "segment_reduce"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.channels;
        let mut dx = vec![T::zero(); inputs[0].len()];
        match self.mode {
            Reduce::Sum | Reduce::Mean => {
                for (row, &s) in self.ids.iter().enumerate() {
                    let scale = if self.mode == Reduce::Mean {
                        T::one() / T::from_usize(self.counts[s]).unwrap()
                    } else {
                        T::one()
                    };
                    for ch in 0..c {
                        dx[row * c + ch] += g[s * c + ch] * scale;
                    }
                }
            }
            Reduce::Max => {
                for s in 0..self.counts.len() {
                    if self.counts[s] == 0 {
                        continue;
                    }
                    for ch in 0..c {
                        let row = self.argmax[s * c + ch];
                        dx[row * c + ch] += g[s * c + ch];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct GatherOp {
    idx: Vec<usize>,
    rows: usize,
    channels: usize,
}

impl<T: Real> Op<T> for GatherOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, _: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.channels;
        let mut dx = vec![T::zero(); self.rows * c];
        for (out_row, &src) in self.idx.iter().enumerate() {
            zip_add(&mut dx[src * c..(src + 1) * c], &g[out_row * c..(out_row + 1) * c]);
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// normalization, activations, dropout

struct BatchNormTrainOp<T> {
    n: usize,
    c: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Op<T> for BatchNormTrainOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1];
        let (n, c) = (self.n, self.c);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let gv = g[i * c + ch];
                dgamma[ch] += gv * self.xhat[i * c + ch];
                dbeta[ch] += gv;
            }
        }
        let dx = needs[0].then(|| {
            let nf = T::from_usize(n).unwrap();
            let mut dx = vec![T::zero(); n * c];
            for ch in 0..c {
                // Σ dxhat = γ Σ g, Σ dxhat·xhat = γ Σ g·xhat
                let sum_d = gamma[ch] * dbeta[ch];
                let sum_dx = gamma[ch] * dgamma[ch];
                let k = self.inv_std[ch] / nf;
                for i in 0..n {
                    let dxhat = g[i * c + ch] * gamma[ch];
                    dx[i * c + ch] = k * (nf * dxhat - sum_d - self.xhat[i * c + ch] * sum_dx);
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

struct BatchNormEvalOp<T> {
    n: usize,
    c: usize,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Op<T> for BatchNormEvalOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c) = (self.n, self.c);
        let mut dx = vec![T::zero(); n * c];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let gv = g[i * c + ch];
                let xhat = (x[i * c + ch] - self.mean[ch]) * self.inv_std[ch];
                dx[i * c + ch] = gv * gamma[ch] * self.inv_std[ch];
                dgamma[ch] += gv * xhat;
                dbeta[ch] += gv;
            }
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dgamma),
            needs[2].then_some(dbeta),
        ]
    }
}

struct PReluOp {
    c: usize,
}

impl<T: Real> Op<T> for PReluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, a) = (inputs[0], inputs[1]);
        let c = self.c;
        let mut dx = vec![T::zero(); x.len()];
        let mut da = vec![T::zero(); c];
        for (i, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            let ch = i % c;
            if xv > T::zero() {
                dx[i] = gv;
            } else {
                dx[i] = gv * a[ch];
                da[ch] += gv * xv;
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(da)]
    }
}

struct DropoutOp<T> {
    mask: Vec<T>,
}

impl<T: Real> Op<T> for DropoutOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

struct L2NormalizeOp<T> {
    c: usize,
    norms: Vec<T>,
    eps: T,
}

impl<T: Real> Op<T> for L2NormalizeOp<T> {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }

    fn backward(&self, _: &[&[T]], y: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.c;
        let mut dx = vec![T::zero(); y.len()];
        for (r, &norm) in self.norms.iter().enumerate() {
            let yr = &y[r * c..(r + 1) * c];
            let gr = &g[r * c..(r + 1) * c];
            let dxr = &mut dx[r * c..(r + 1) * c];
            if norm > self.eps {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dxr[j] = (gr[j] - yr[j] * dot) / norm;
                }
            } else {
                for j in 0..c {
                    dxr[j] = gr[j] / self.eps;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct CrossEntropyOp<T> {
    k: usize,
    labels: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Real> Op<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[&[T]], _: &[T], g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let b = self.labels.len();
        let scale = g[0] / T::from_usize(b).unwrap();
        let mut d = self.probs.clone();
        for (r, &l) in self.labels.iter().enumerate() {
            d[r * self.k + l] -= T::one();
        }
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(d)]
    }
}

// ---------------------------------------------------------------------------

impl<T: Real> Tape<T> {
    /// `x·W + b` with `x: N×Din`, `W: Din×Dout`, `b: Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims2(x)?;
        let (wr, dout) = self.dims2(w)?;
        if wr != din {
            return Err(SgcnError::shape(format!(
                "linear: input is {n}×{din} but weight is {wr}×{dout}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(SgcnError::shape(format!(
                    "linear: bias shape {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        linalg::matmul(self.value(x), self.value(w), &mut out, n, din, dout);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(dout) {
                zip_add(row, bias);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            vec![n, dout],
            out,
            inputs,
            Box::new(LinearOp {
                n,
                din,
                dout,
                has_bias: b.is_some(),
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// `a·bᵀ` with `a: N×C`, `b: K×C`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims2(a)?;
        let (k, cb) = self.dims2(b)?;
        if c != cb {
            return Err(SgcnError::shape(format!(
                "matmul_nt: {n}×{c} against {k}×{cb}"
            )));
        }
        let mut out = vec![T::zero(); n * k];
        linalg::matmul_nt_acc(self.value(a), self.value(b), &mut out, n, c, k);
        Ok(self.push(vec![n, k], out, vec![a, b], Box::new(MatMulNtOp { n, c, k })))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SgcnError::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = match kind {
            Binary::Add => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Binary::Sub => av.iter().zip(bv).map(|(&x, &y)| x - y).collect(),
            Binary::Mul => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, vec![a, b], Box::new(BinaryOp(kind))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Unary::Scale(c) => v * c,
                Unary::Relu => v.max(T::zero()),
                Unary::Tanh => v.tanh(),
                Unary::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, vec![x], Box::new(UnaryOp(kind)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.push(vec![], vec![s], vec![x], Box::new(SumOp { scale_by_len: false }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        self.push(vec![], vec![s], vec![x], Box::new(SumOp { scale_by_len: true }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(SgcnError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, vec![x], Box::new(ReshapeOp)))
    }

    /// Reduces the rows of `values: M×C` into `num_segments` rows. Empty
    /// segments give zero rows; max ties go to the first row.
    pub fn segment_reduce(
        &mut self,
        values: Var,
        ids: &[usize],
        num_segments: usize,
        mode: Reduce,
    ) -> Result<Var> {
        let (m, c) = self.dims2(values)?;
        if ids.len() != m {
            return Err(SgcnError::shape(format!(
                "segment_reduce: {} ids for {m} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&s| s >= num_segments) {
            return Err(SgcnError::invalid(format!(
                "segment id {bad} out of range for {num_segments} segments"
            )));
        }
        let v = self.value(values);
        let mut counts = vec![0usize; num_segments];
        let mut out = vec![T::zero(); num_segments * c];
        let mut argmax = Vec::new();
        match mode {
            Reduce::Sum | Reduce::Mean => {
                for (row, &s) in ids.iter().enumerate() {
                    counts[s] += 1;
                    zip_add(&mut out[s * c..(s + 1) * c], &v[row * c..(row + 1) * c]);
                }
                if mode == Reduce::Mean {
                    for (s, &n) in counts.iter().enumerate() {
                        if n > 0 {
                            let inv = T::from_usize(n).unwrap();
                            out[s * c..(s + 1) * c].iter_mut().for_each(|o| *o /= inv);
                        }
                    }
                }
            }
            Reduce::Max => {
                argmax = vec![usize::MAX; num_segments * c];
                for (row, &s) in ids.iter().enumerate() {
                    let first = counts[s] == 0;
                    counts[s] += 1;
                    for ch in 0..c {
                        let x = v[row * c + ch];
                        if first || x > out[s * c + ch] {
                            out[s * c + ch] = x;
                            argmax[s * c + ch] = row;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![num_segments, c],
            out,
            vec![values],
            Box::new(SegmentOp {
                ids: ids.to_vec(),
                counts,
                argmax,
                channels: c,
                mode,
            }),
        ))
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(SgcnError::invalid(format!("row {bad} out of range for {rows} rows")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            vec![idx.len(), c],
            out,
            vec![x],
            Box::new(GatherOp {
                idx: idx.to_vec(),
                rows,
                channels: c,
            }),
        ))
    }

    /// Training-mode batch norm over all `N` rows, biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c) = self.dims2(x)?;
        self.check_channels(gamma, c, "batch_norm scale")?;
        self.check_channels(beta, c, "batch_norm shift")?;
        if n == 0 {
            return Err(SgcnError::invalid("batch_norm on zero rows"));
        }
        let v = self.value(x);
        let nf = T::from_usize(n).unwrap();
        let mut mean = vec![T::zero(); c];
        for row in v.chunks_exact(c) {
            zip_add(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); c];
        for row in v.chunks_exact(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for ch in 0..c {
                let h = (v[i * c + ch] - mean[ch]) * inv_std[ch];
                xhat[i * c + ch] = h;
                out[i * c + ch] = g[ch] * h + b[ch];
            }
        }
        let y = self.push(
            vec![n, c],
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormTrainOp { n, c, xhat, inv_std }),
        );
        Ok((y, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        self.check_channels(gamma, c, "batch_norm scale")?;
        self.check_channels(beta, c, "batch_norm shift")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(SgcnError::shape("batch_norm running statistics width"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&s| T::one() / (s + eps).sqrt())
            .collect();
        let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for ch in 0..c {
                out[i * c + ch] = g[ch] * ((v[i * c + ch] - running_mean[ch]) * inv_std[ch]) + b[ch];
            }
        }
        Ok(self.push(
            vec![n, c],
            out,
            vec![x, gamma, beta],
            Box::new(BatchNormEvalOp {
                n,
                c,
                mean: running_mean.to_vec(),
                inv_std,
            }),
        ))
    }

    fn check_channels(&self, v: Var, c: usize, what: &str) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(SgcnError::shape(format!(
                "{what} has shape {:?}, expected [{c}]",
                self.shape(v)
            )));
        }
        Ok(())
    }

    /// `x` where positive, `a·x` otherwise; one slope per channel (last axis).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        self.check_channels(a, c, "prelu slope")?;
        let (v, s) = (self.value(x), self.value(a));
        let out: Vec<T> = v
            .iter()
            .enumerate()
            .map(|(i, &x)| if x > T::zero() { x } else { s[i % c] * x })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, vec![x, a], Box::new(PReluOp { c })))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`, eval is identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(SgcnError::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, vec![x], Box::new(DropoutOp { mask })))
    }

    /// Divides each row by its L2 norm, clamped below by `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        let v = self.value(x);
        let mut out = v.to_vec();
        let mut norms = Vec::with_capacity(v.len() / c.max(1));
        for row in out.chunks_exact_mut(c) {
            let norm = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let d = norm.max(eps);
            row.iter_mut().for_each(|a| *a /= d);
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, vec![x], Box::new(L2NormalizeOp { c, norms, eps })))
    }

    /// Mean softmax cross-entropy of `logits: B×K` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(SgcnError::shape(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(SgcnError::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let v = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let (arg, mx) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, x)| if x > bv { (i, x) } else { (bi, bv) });
            // z = 1 + rest, where the max term contributes exactly one
            let mut rest = T::zero();
            for (i, (p, &x)) in probs[r * k..(r + 1) * k].iter_mut().zip(row).enumerate() {
                *p = (x - mx).exp();
                if i != arg {
                    rest += *p;
                }
            }
            let z = T::one() + rest;
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            total += rest.ln_1p() + (mx - row[l]);
        }
        let loss = total / T::from_usize(b).unwrap();
        Ok(self.push(
            vec![],
            vec![loss],
            vec![logits],
            Box::new(CrossEntropyOp {
                k,
                labels: labels.to_vec(),
                probs,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn var(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.variable(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[1, 2], &[1.0, 2.0]);
        let w = var(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = var(&mut t, &[2], &[0.0, 0.0]);
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);

        let x = var(&mut t, &[1, 2], &[1.0, 1.0]);
        let b = var(&mut t, &[2], &[3.0, 4.0]);
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[4.0, 5.0]);
    }

    #[test]
    fn linear_rejects_mismatch_with_dimensions() {
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let w = var(&mut t, &[2, 2], &[0.0; 4]);
        let err = t.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("1×3") && err.contains("2×2"), "{err}");
    }

    #[test]
    fn segment_examples() {
        let mut t = Tape::<f64>::new();
        let v = var(&mut t, &[2, 1], &[1.0, 3.0]);
        let m = t.segment_reduce(v, &[0, 0], 1, Reduce::Mean).unwrap();
        assert_eq!(t.value(m), &[2.0]);
        let s = t.segment_reduce(v, &[0, 1], 3, Reduce::Sum).unwrap();
        assert_eq!(t.value(s), &[1.0, 3.0, 0.0]);
        assert!(t.segment_reduce(v, &[0, 3], 3, Reduce::Sum).is_err());
    }

    #[test]
    fn segment_max_routes_to_first_tie() {
        let mut t = Tape::<f64>::new();
        let v = var(&mut t, &[3, 1], &[2.0, 2.0, 1.0]);
        let m = t.segment_reduce(v, &[0, 0, 0], 1, Reduce::Max).unwrap();
        let l = t.sum(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[3], &[0.5, -1.0, 2.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[1], &[3.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[2], &[1.0, 2.0]);
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = var(&mut t, &[2], &[3.0, 4.0]);
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::<f64>::new();
        // channel 0 constant, channel 1 varying
        let x = var(&mut t, &[3, 2], &[5.0, 1.0, 5.0, 2.0, 5.0, 6.0]);
        let g = var(&mut t, &[2], &[1.0, 1.0]);
        let b = var(&mut t, &[2], &[0.25, 0.0]);
        let (y, stats) = t.batch_norm_train(x, g, b, 1e-5).unwrap();
        let out = t.value(y);
        for i in 0..3 {
            assert_eq!(out[i * 2], 0.25);
        }
        assert_eq!(stats.mean, vec![5.0, 3.0]);

        let ones = var(&mut t, &[2], &[1.0, 1.0]);
        let zeros = var(&mut t, &[2], &[0.0, 0.0]);
        let y = t
            .batch_norm_eval(x, ones, zeros, &[0.0, 0.0], &[1.0, 1.0], 0.0)
            .unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7 % 13) as f64) * 0.37 - 1.0).collect();
        let x = var(&mut t, &[10, 4], &data);
        let g = var(&mut t, &[4], &[1.0; 4]);
        let b = var(&mut t, &[4], &[0.0; 4]);
        let (y, _) = t.batch_norm_train(x, g, b, 1e-12).unwrap();
        let out = t.value(y);
        for ch in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| out[i * 4 + ch]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn prelu_examples() {
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[2, 1], &[5.0, -4.0]);
        let a = var(&mut t, &[1], &[0.25]);
        let y = t.prelu(x, a).unwrap();
        assert_eq!(t.value(y), &[5.0, -1.0]);
        let one = var(&mut t, &[1], &[1.0]);
        let y = t.prelu(x, one).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let s = t.sum(y);
        t.backward(s).unwrap();
        // slope gradient sums x over the negative side
        assert_eq!(t.grad(one).unwrap(), &[-4.0]);
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let x = var(&mut t, &[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::full(&[1_000_000], 1.0f32));
        let y = t.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let kept = t.value(y).iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.8).abs() < 0.01, "{kept}");
        let scaled = t.value(y).iter().find(|&&v| v != 0.0).unwrap();
        assert!((scaled - 1.25).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut t = Tape::<f64>::new();
        let l = var(&mut t, &[2, 3], &[0.5; 6]);
        let ce = t.cross_entropy(l, &[0, 2]).unwrap();
        assert!((t.value(ce)[0] - 3f64.ln()).abs() < 1e-15);
        assert!(t.cross_entropy(l, &[0, 3]).is_err());
    }
}

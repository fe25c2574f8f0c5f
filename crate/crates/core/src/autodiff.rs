//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (vectors are `1×d` rows, scalars `1×1`).
//! Parameters live in a [`ParamStore`]; a [`Tape`] borrows the store, records
//! the forward computation, and [`Tape::backward`] returns gradients for every
//! node and every parameter that took part in it. Parameters that were never
//! touched get no gradient at all, which is what the ablation-isolation
//! checks rely on.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Bias added to masked attention scores before the softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Named parameters in creation order. The order is part of the model
/// contract: two stores built from the same seed by the same constructors
/// hold bit-identical values.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Drop every parameter created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Seeded parameter initializer. Draw order is the init order.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }

    /// `N(0, 1/fan_in)` weights for a `fan_in × fan_out` matrix.
    pub fn fan_in(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        self.normal(fan_in, fan_out, (1.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..=bound))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Mat),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    MaskedSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Unfold(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
}

pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, Var>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient of a parameter, `None` if the parameter never entered the tape
    /// (which means the gradient is exactly zero).
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    pub fn touched_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn check_same(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over unmasked columns; masked columns come out exactly 0.
pub fn masked_softmax_rows(scores: &Mat, mask: &[bool]) -> Result<Mat> {
    if mask.len() != scores.ncols() {
        return Err(Error::Shape(format!(
            "mask length {} for {} keys",
            mask.len(),
            scores.ncols()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllKeysMasked);
    }
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        for (x, &m) in row.iter_mut().zip(mask) {
            if !m {
                *x += MASK_BIAS;
            }
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        for (x, &m) in row.iter_mut().zip(mask) {
            if !m {
                *x = 0.0;
            }
        }
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(out)
}

/// Zero-padded, same-length unfolding: row `i` holds rows `i-k/2 ..= i+k/2`
/// concatenated along the feature axis.
fn unfold(x: &Mat, kernel: usize) -> Mat {
    let (n, d) = x.dim();
    let half = kernel / 2;
    let mut out = Mat::zeros((n, kernel * d));
    for i in 0..n {
        for j in 0..kernel {
            let src = i as isize + j as isize - half as isize;
            if src >= 0 && (src as usize) < n {
                out.slice_mut(s![i, j * d..(j + 1) * d])
                    .assign(&x.row(src as usize));
            }
        }
    }
    out
}

fn fold_grad(g: &Mat, n: usize, d: usize, kernel: usize) -> Mat {
    let half = kernel / 2;
    let mut out = Mat::zeros((n, d));
    for i in 0..n {
        for j in 0..kernel {
            let src = i as isize + j as isize - half as isize;
            if src >= 0 && (src as usize) < n {
                let mut row = out.row_mut(src as usize);
                row += &g.slice(s![i, j * d..(j + 1) * d]);
            }
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row_leaf(&mut self, values: &[f64]) -> Var {
        let m = Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.leaf(m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || ca != cr {
            return Err(Error::Shape(format!(
                "add_row: {ra}×{ca} + {rr}×{cr}"
            )));
        }
        let v = self.value(a) + self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `a (n×d) ⊙ row (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || ca != cr {
            return Err(Error::Shape(format!(
                "mul_row: {ra}×{ca} ⊙ {rr}×{cr}"
            )));
        }
        let v = self.value(a) * self.value(row);
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        check_same(self.value(a), &c, "mul_const")?;
        let v = self.value(a) * &c;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    /// Zero every row whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.shape(a);
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask_rows: mask {} for {n} rows",
                mask.len()
            )));
        }
        let c = Mat::from_shape_fn((n, d), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
        self.mul_const(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::Shape(format!("matmul: {ra}×{ca} · {rb}×{cb}")));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let (n, d) = self.shape(a);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(a);
        let mut v = Mat::zeros((index.len(), d));
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = i {
                v.row_mut(r).assign(&src.row(*i));
            }
        }
        Ok(self.push(v, Op::Gather(a, index.to_vec())))
    }

    /// Row-wise softmax with key mask (see [`masked_softmax_rows`]).
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let v = masked_softmax_rows(self.value(scores), mask)?;
        Ok(self.push(v, Op::MaskedSoftmax(scores)))
    }

    /// Per-row standardization `(x − μ) / √(σ² + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (n, d) = x.dim();
        let mut out = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Same-length zero-padded window unfolding for odd kernels.
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be odd, got {kernel}"
            )));
        }
        let v = unfold(self.value(a), kernel);
        Ok(self.push(v, Op::Unfold(a, kernel)))
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones(self.nodes[output.0].value.dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, row) => {
                    acc(&mut grads, *a, &g * self.value(*row));
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Abs(a) => {
                    let d = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Square(a) => {
                    let d = self.value(*a) * 2.0;
                    acc(&mut grads, *a, &g * &d);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.shape(*a), k));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut full = Mat::zeros(self.shape(*a));
                    let h = g.nrows();
                    full.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let mut full = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    full.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::Gather(a, index) => {
                    let mut full = Mat::zeros(self.shape(*a));
                    for (r, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            let mut row = full.row_mut(*i);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut grads, *a, full);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = &gy - &(y * &dot);
                    acc(&mut grads, *a, dx);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut dx = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.sum() / d;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for ((o, gv), yv) in dx.row_mut(i).iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Unfold(a, kernel) => {
                    let (n, d) = self.shape(*a);
                    acc(&mut grads, *a, fold_grad(&g, n, d, *kernel));
                }
            }
            grads[idx] = Some(g);
        }

        Grads {
            nodes: grads,
            params: self.param_nodes.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(store: &ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Mat {
        let eps = 1e-6;
        let mut g = Mat::zeros(store.get(id).dim());
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = store.clone();
            plus.get_mut(id)[[r, c]] += eps;
            let mut minus = store.clone();
            minus.get_mut(id)[[r, c]] -= eps;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let norm = a.mapv(|x| x * x).sum().sqrt() + b.mapv(|x| x * x).sum().sqrt();
        if norm == 0.0 {
            0.0
        } else {
            diff / norm
        }
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        let mut init = Init::new(3);
        let mut store = ParamStore::new();
        let a = store.add("a", init.normal(3, 4, 1.0));
        let b = store.add("b", init.normal(4, 5, 1.0));
        let r = store.add("r", init.normal(1, 5, 1.0));

        let build = |tape: &mut Tape| -> Var {
            let va = tape.param(a);
            let vb = tape.param(b);
            let vr = tape.param(r);
            let m = tape.matmul(va, vb).unwrap();
            let m = tape.mul_row(m, vr).unwrap();
            let ln = tape.layer_norm(m, 1e-5);
            let u = tape.unfold(ln, 3).unwrap();
            let t = tape.tanh(u);
            let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
            let sm = tape.masked_softmax(t, &mask).unwrap();
            let g = tape.gather_rows(sm, &[Some(2), None, Some(0), Some(2)]).unwrap();
            let sq = tape.square(g);
            let sg = tape.sigmoid(sq);
            tape.sum_all(sg)
        };
        let f = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let out = build(&mut t);
            t.scalar(out)
        };
        let mut tape = Tape::new(&store);
        let out = build(&mut tape);
        let grads = tape.backward(out);
        for id in [a, b, r] {
            let num = numeric_grad(&store, id, &f);
            let err = rel_err(grads.param(id).unwrap(), &num);
            assert!(err < 1e-5, "{} rel err {err}", store.name(id));
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let scores = Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let w = masked_softmax_rows(&scores, &[true, false, true]).unwrap();
        for row in w.rows() {
            assert_eq!(row[1], 0.0);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            masked_softmax_rows(&scores, &[false; 3]),
            Err(Error::AllKeysMasked)
        ));
    }

    #[test]
    fn untouched_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Mat::ones((1, 2)));
        let unused = store.add("unused", Mat::ones((1, 2)));
        let mut tape = Tape::new(&store);
        let v = tape.param(used);
        let s = tape.sum_all(v);
        let grads = tape.backward(s);
        assert!(grads.param(used).is_some());
        assert!(grads.param(unused).is_none());
    }

    #[test]
    fn unfold_rejects_even_kernel() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Mat::zeros((3, 2)));
        assert!(tape.unfold(x, 2).is_err());
    }
}

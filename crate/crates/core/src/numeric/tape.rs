//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in evaluation order. Calling
//! [`Tape::backward`] walks the tape in reverse, accumulates gradients of
//! every parameter leaf into the [`ParameterSet`] and clears the tape.

use super::params::{ParamId, ParameterSet};
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Guard for every norm division.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Recip(Var),
    Exp(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    ReduceSum(Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmaxRows(Var),
    Squash(Var, usize),
    L2Normalize(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    RowDot(Var, Var),
    Pick(Var, Vec<usize>),
    CorrelationWeights {
        scores: Var,
        groups: Vec<usize>,
        n_groups: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Iteration layout for the slices of a matrix along `axis`.
/// Returns `(lane count, lane length, lane start stride, element stride)`.
fn lanes(shape: [usize; 2], axis: usize) -> (usize, usize, usize, usize) {
    let [rows, cols] = shape;
    if axis == 1 {
        (rows, cols, cols, 1)
    } else {
        (cols, rows, 1, cols)
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(op, &t.shape(), &[axis]));
    }
    let (_, len, _, _) = lanes(t.shape(), axis);
    if len == 0 {
        return Err(Error::shape(op, &t.shape(), &[axis]));
    }
    Ok(())
}

/// `x · n / (1 + n²)`: direction of `x`, length `n² / (1 + n²)`.
fn squash_factor(n: f64) -> f64 {
    n / (1.0 + n * n)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reject NaN/Inf produced by any subsequent operation.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entry count of the largest value recorded so far.
    pub fn largest_value_len(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).max().unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient flows back into `params` on [`Tape::backward`].
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b)).map_err(|_| {
            Error::shape("add", &self.shape(a), &self.shape(b))
        })?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b)).map_err(|_| {
            Error::shape("sub", &self.shape(a), &self.shape(b))
        })?;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::shape("mul", &self.shape(a), &self.shape(b)))?;
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(bias) != [1, c] {
            return Err(Error::shape("add_row", &[r, c], &self.shape(bias)));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (x, y) in value.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies row `i` of `a` by `col[i]` where `col` is `r × 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let [r, _] = self.shape(a);
        if self.shape(col) != [r, 1] {
            return Err(Error::shape("mul_col", &self.shape(a), &self.shape(col)));
        }
        let mut value = self.value(a).clone();
        let s = self.value(col).data().to_vec();
        for (i, &si) in s.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|x| *x *= si);
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let rows = self.shape(first)[0];
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(Error::shape("concat_cols", &self.shape(first), &self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start > end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let value = Tensor::new(end - start, c, data)?;
        self.push(value, Op::SliceRows(a, start))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        self.push(value, Op::Reshape(a))
    }

    /// Sum along `axis`: 0 collapses rows (`1 × c`), 1 collapses columns (`r × 1`).
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis > 1 {
            return Err(Error::shape("reduce_sum", &t.shape(), &[axis]));
        }
        let [r, c] = t.shape();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            Tensor::new(1, c, out)?
        } else {
            Tensor::new(r, 1, (0..r).map(|i| t.row(i).iter().sum()).collect())?
        };
        self.push(value, Op::ReduceSum(a, axis))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Numerically stable softmax over the slices along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("softmax", t, axis)?;
        let value = softmax_value(t, axis);
        self.push(value, Op::Softmax(a, axis))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_axis("log_softmax_rows", t, 1)?;
        let mut value = t.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Capsule squash of every slice along `axis`: same direction, length `n² / (1 + n²)`.
    pub fn squash(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("squash", t, axis)?;
        let mut value = t.clone();
        let (n_lanes, len, start_stride, stride) = lanes(t.shape(), axis);
        let d = value.data_mut();
        for lane in 0..n_lanes {
            let base = lane * start_stride;
            let n = (0..len).map(|i| d[base + i * stride].powi(2)).sum::<f64>().sqrt();
            let f = squash_factor(n);
            for i in 0..len {
                d[base + i * stride] *= f;
            }
        }
        self.push(value, Op::Squash(a, axis))
    }

    /// Unit L2 norm for every slice along `axis`; zero slices stay zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("l2_normalize", t, axis)?;
        let mut value = t.clone();
        let (n_lanes, len, start_stride, stride) = lanes(t.shape(), axis);
        let d = value.data_mut();
        for lane in 0..n_lanes {
            let base = lane * start_stride;
            let n = (0..len).map(|i| d[base + i * stride].powi(2)).sum::<f64>().sqrt();
            let inv = 1.0 / n.max(NORM_EPS);
            for i in 0..len {
                d[base + i * stride] *= inv;
            }
        }
        self.push(value, Op::L2Normalize(a, axis))
    }

    /// Row `index[e]` of `a` for every `e`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(index.len(), c, data)?;
        self.push(value, Op::GatherRows(a, index.to_vec()))
    }

    /// `out[index[e]] += weight[e] · a[e]`, producing `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: &[usize],
        out_rows: usize,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        if index.len() != r {
            return Err(Error::shape("scatter_add_rows", &[r, c], &[index.len()]));
        }
        if let Some(w) = weights {
            if w.len() != r {
                return Err(Error::shape("scatter_add_rows", &[r, c], &[w.len()]));
            }
        }
        let mut out = Tensor::zeros(out_rows, c);
        for (e, &dst) in index.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::Index {
                    what: "scatter_add_rows",
                    index: dst,
                    len: out_rows,
                });
            }
            let w = weights.map_or(1.0, |w| w[e]);
            let src = t.row(e);
            for (o, x) in out.row_mut(dst).iter_mut().zip(src) {
                *o += w * x;
            }
        }
        self.push(
            out,
            Op::ScatterAddRows {
                x: a,
                index: index.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
        )
    }

    /// Per-row inner products, `r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_dot", &ta.shape(), &tb.shape()));
        }
        let data = (0..ta.rows())
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Tensor::new(ta.rows(), 1, data)?;
        self.push(value, Op::RowDot(a, b))
    }

    /// `a[i, index[i]]` for every row, `r × 1`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        if index.len() != r {
            return Err(Error::shape("pick", &[r, c], &[index.len()]));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(Error::Index {
                    what: "pick",
                    index: j,
                    len: c,
                });
            }
            data.push(t.get(i, j));
        }
        let value = Tensor::new(r, 1, data)?;
        self.push(value, Op::Pick(a, index.to_vec()))
    }

    /// Grouped correlation weights `exp(s_e) / Σ_{i ∈ g(e)} sqrt(exp(s_i))`.
    ///
    /// `scores` is `E × 1`; `groups[e]` names the group of entry `e`. The
    /// weights within a group are positive but do not sum to one.
    pub fn correlation_weights(&mut self, scores: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let s = self.value(scores);
        if s.cols() != 1 || s.rows() != groups.len() {
            return Err(Error::shape("correlation_weights", &s.shape(), &[groups.len(), 1]));
        }
        let value = correlation_weights_value(s.data(), groups, n_groups)?;
        self.push(
            Tensor::new(groups.len(), 1, value.weights)?,
            Op::CorrelationWeights {
                scores,
                groups: groups.to_vec(),
                n_groups,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates gradients of `root` into `params` and clears the tape.
    pub fn backward(&mut self, root: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.gradients(root)?;
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[idx].as_ref()) {
                params.accumulate_grad(*id, g);
            }
        }
        self.clear();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [n, k] = ta.shape();
                let p = tb.cols();
                // dA = G · Bᵀ
                let mut da = Tensor::zeros(n, k);
                let bt = tb.transpose();
                matmul_into(g.data(), bt.data(), da.data_mut(), n, p, k);
                accumulate(grads, *a, da);
                // dB = Aᵀ · G
                let mut db = Tensor::zeros(k, p);
                let at = ta.transpose();
                matmul_into(at.data(), g.data(), db.data_mut(), k, n, p);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(tb, |x, y| x * y).expect("same shape"));
                accumulate(grads, *b, g.zip_map(ta, |x, y| x * y).expect("same shape"));
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g.clone());
                let c = g.cols();
                let mut db = vec![0.0; c];
                for i in 0..g.rows() {
                    for (d, x) in db.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                accumulate(grads, *bias, Tensor::row_vector(&db));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let mut da = g.clone();
                let mut dc = vec![0.0; ta.rows()];
                for i in 0..ta.rows() {
                    let s = tc.get(i, 0);
                    da.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    dc[i] = g.row(i).iter().zip(ta.row(i)).map(|(x, y)| x * y).sum();
                }
                accumulate(grads, *a, da);
                accumulate(grads, *col, Tensor::column_vector(&dc));
            }
            Op::Recip(a) => {
                accumulate(grads, *a, g.zip_map(out, |gi, y| -gi * y * y).expect("same shape"));
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.zip_map(out, |gi, y| gi * y).expect("same shape"));
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, g.zip_map(ta, |gi, x| gi / x).expect("same shape"));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let mut dp = Tensor::zeros(r, c);
                    for i in 0..r {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, dp);
                }
            }
            Op::SliceRows(a, start) => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                let [r, c] = self.shape(*a);
                accumulate(grads, *a, g.reshape(r, c).expect("same length"));
            }
            Op::ReduceSum(a, axis) => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = if *axis == 0 { g.get(0, j) } else { g.get(i, 0) };
                        da.set(i, j, v);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape(*a);
                accumulate(grads, *a, Tensor::full(r, c, g.get(0, 0)));
            }
            Op::Softmax(a, axis) => {
                let mut da = g.clone();
                let (n_lanes, len, start_stride, stride) = lanes(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let d = da.data_mut();
                for lane in 0..n_lanes {
                    let base = lane * start_stride;
                    let dot: f64 = (0..len)
                        .map(|i| gd[base + i * stride] * y[base + i * stride])
                        .sum();
                    for i in 0..len {
                        let k = base + i * stride;
                        d[k] = y[k] * (gd[k] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = g.clone();
                for i in 0..out.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    let y = out.row(i);
                    for (d, &yi) in da.row_mut(i).iter_mut().zip(y) {
                        *d -= yi.exp() * gsum;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Squash(a, axis) => {
                let x = self.value(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                let (n_lanes, len, start_stride, stride) = lanes(x.shape(), *axis);
                let (xd, gd) = (x.data(), g.data());
                let d = da.data_mut();
                for lane in 0..n_lanes {
                    let base = lane * start_stride;
                    let n = (0..len).map(|i| xd[base + i * stride].powi(2)).sum::<f64>().sqrt();
                    let f = squash_factor(n);
                    // f'(n) / n, with f'(n) = (1 - n²) / (1 + n²)²
                    let fp_over_n = (1.0 - n * n) / (1.0 + n * n).powi(2) / n.max(NORM_EPS);
                    let xg: f64 = (0..len)
                        .map(|i| xd[base + i * stride] * gd[base + i * stride])
                        .sum();
                    for i in 0..len {
                        let k = base + i * stride;
                        d[k] = f * gd[k] + fp_over_n * xg * xd[k];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::L2Normalize(a, axis) => {
                let x = self.value(*a);
                let mut da = Tensor::zeros(x.rows(), x.cols());
                let (n_lanes, len, start_stride, stride) = lanes(x.shape(), *axis);
                let (xd, y, gd) = (x.data(), out.data(), g.data());
                let d = da.data_mut();
                for lane in 0..n_lanes {
                    let base = lane * start_stride;
                    let n = (0..len).map(|i| xd[base + i * stride].powi(2)).sum::<f64>().sqrt();
                    if n < NORM_EPS {
                        for i in 0..len {
                            let k = base + i * stride;
                            d[k] = gd[k] / NORM_EPS;
                        }
                        continue;
                    }
                    let yg: f64 = (0..len)
                        .map(|i| y[base + i * stride] * gd[base + i * stride])
                        .sum();
                    for i in 0..len {
                        let k = base + i * stride;
                        d[k] = (gd[k] - y[k] * yg) / n;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::GatherRows(a, index) => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for (e, &i) in index.iter().enumerate() {
                    for (d, x) in da.row_mut(i).iter_mut().zip(g.row(e)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ScatterAddRows { x, index, weights } => {
                let [r, c] = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (e, &dst) in index.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[e]);
                    for (d, gv) in dx.row_mut(e).iter_mut().zip(g.row(dst)) {
                        *d = w * gv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = tb.clone();
                let mut db = ta.clone();
                for i in 0..ta.rows() {
                    let gi = g.get(i, 0);
                    da.row_mut(i).iter_mut().for_each(|x| *x *= gi);
                    db.row_mut(i).iter_mut().for_each(|x| *x *= gi);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Pick(a, index) => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for (i, &j) in index.iter().enumerate() {
                    da.set(i, j, g.get(i, 0));
                }
                accumulate(grads, *a, da);
            }
            Op::CorrelationWeights {
                scores,
                groups,
                n_groups,
            } => {
                let s = self.value(*scores).data();
                let cw = correlation_weights_value(s, groups, *n_groups).expect("validated in forward");
                // ∂a_j/∂s_i = δ_ij a_j − a_j · exp(s_i/2) / (2 D_g)
                let a = out.data();
                let gd = g.data();
                let mut ga = vec![0.0; *n_groups];
                for (e, &grp) in groups.iter().enumerate() {
                    ga[grp] += gd[e] * a[e];
                }
                let ds: Vec<f64> = groups
                    .iter()
                    .enumerate()
                    .map(|(e, &grp)| gd[e] * a[e] - 0.5 * cw.half_share[e] * ga[grp])
                    .collect();
                accumulate(grads, *scores, Tensor::column_vector(&ds));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::AddScalar(_) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::MulCol(..) => "mul_col",
        Op::Recip(_) => "recip",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::Reshape(_) => "reshape",
        Op::ReduceSum(..) => "reduce_sum",
        Op::SumAll(_) => "sum_all",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::Squash(..) => "squash",
        Op::L2Normalize(..) => "l2_normalize",
        Op::GatherRows(..) => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::RowDot(..) => "row_dot",
        Op::Pick(..) => "pick",
        Op::CorrelationWeights { .. } => "correlation_weights",
    }
}

fn softmax_value(t: &Tensor, axis: usize) -> Tensor {
    let mut value = t.clone();
    let (n_lanes, len, start_stride, stride) = lanes(t.shape(), axis);
    let d = value.data_mut();
    for lane in 0..n_lanes {
        let base = lane * start_stride;
        let max = (0..len)
            .map(|i| d[base + i * stride])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..len {
            let k = base + i * stride;
            d[k] = (d[k] - max).exp();
            sum += d[k];
        }
        for i in 0..len {
            d[base + i * stride] /= sum;
        }
    }
    value
}

struct CorrelationValue {
    weights: Vec<f64>,
    /// `exp(s_e / 2) / D_g` for each entry.
    half_share: Vec<f64>,
}

fn correlation_weights_value(s: &[f64], groups: &[usize], n_groups: usize) -> Result<CorrelationValue> {
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (&se, &g) in s.iter().zip(groups) {
        if g >= n_groups {
            return Err(Error::Index {
                what: "correlation group",
                index: g,
                len: n_groups,
            });
        }
        max[g] = max[g].max(se);
    }
    // D'_g = Σ exp(s_i/2 − c_g/2) with c_g the group max; a_e = exp(s_e − c_g/2) / D'_g.
    let mut denom = vec![0.0; n_groups];
    for (&se, &g) in s.iter().zip(groups) {
        denom[g] += (0.5 * (se - max[g])).exp();
    }
    let mut weights = Vec::with_capacity(s.len());
    let mut half_share = Vec::with_capacity(s.len());
    for (&se, &g) in s.iter().zip(groups) {
        weights.push((se - 0.5 * max[g]).exp() / denom[g]);
        half_share.push((0.5 * (se - max[g])).exp() / denom[g]);
    }
    Ok(CorrelationValue { weights, half_share })
}

//! Reverse-mode differentiation over batched dense arrays.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! node list in reverse and accumulates vector-Jacobian products. Loss
//! nodes with constant targets (`weighted_sq_err`, `quantile_huber`,
//! `softmax_xent`) are fused so their backward pass is a single sweep.

use std::collections::BTreeMap;

use super::array::DenseArray;
use super::kernels;
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>),
    TileRows(Var, usize),
    BlockMean(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Minimum(Var, Var),
    SumCols(Var),
    MeanAll(Var),
    WeightedSqErr { pred: Var, target: DenseArray, weights: Vec<f64> },
    QuantileHuber { pred: Var, targets: DenseArray, fractions: Vec<f64>, kappa: f64, scale: f64 },
    SoftmaxXent { logits: Var, target: DenseArray },
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter names bound to leaf nodes of a tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} not bound on tape")))
    }
}

fn shape_err(op: &str, a: &DenseArray, b: &DenseArray) -> Error {
    Error::Config(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params.iter().map(|(k, v)| (k.clone(), self.leaf(v.clone()))).collect();
        BoundParams { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = kernels::matmul(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let out = kernels::add_row(xv, bv);
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.len() != xv.cols() {
            return Err(shape_err("mul_row", xv, gv));
        }
        let out = kernels::mul_row(xv, gv);
        Ok(self.push(out, Op::MulRow(x, g)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (out, inv) = kernels::layer_norm(self.value(x));
        self.push(out, Op::LayerNorm(x, inv))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&DenseArray> = parts.iter().map(|&p| self.value(p)).collect();
        if vals.is_empty() || vals.iter().any(|v| v.rows() != vals[0].rows()) {
            return Err(Error::Config("concat_cols: row counts differ".into()));
        }
        let out = kernels::concat_cols(&vals);
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Stacks `k` copies of `x` vertically: row `i + j * n` is row `i` of `x`.
    pub fn tile_rows(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * k);
        for _ in 0..k {
            data.extend_from_slice(xv.data());
        }
        let out = DenseArray::from_parts(xv.rows() * k, xv.cols(), data);
        self.push(out, Op::TileRows(x, k))
    }

    /// Inverse of `tile_rows` in the averaging sense: `(n*k) x m -> n x m`.
    pub fn block_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if k == 0 || xv.rows() % k != 0 {
            return Err(Error::Config(format!("block_mean: {} rows not divisible by {k}", xv.rows())));
        }
        let n = xv.rows() / k;
        let m = xv.cols();
        let mut data = vec![0.0; n * m];
        for j in 0..k {
            for (o, v) in data.iter_mut().zip(&xv.data()[j * n * m..(j + 1) * n * m]) {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o /= k as f64;
        }
        let out = DenseArray::from_parts(n, m, data);
        Ok(self.push(out, Op::BlockMean(x, k)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(DenseArray::from_parts(av.rows(), av.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "minimum", f64::min)?;
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// `n x m -> n x 1` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.cols();
        let data = xv.data().chunks_exact(m).map(|r| r.iter().sum()).collect();
        let out = DenseArray::from_parts(xv.rows(), 1, data);
        self.push(out, Op::SumCols(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = DenseArray::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(out, Op::MeanAll(x))
    }

    /// `sum_i w_i * ||pred_i - target_i||^2 / rows` with constant targets and
    /// weights.
    pub fn weighted_sq_err(&mut self, pred: Var, target: DenseArray, weights: Vec<f64>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.rows() != target.rows() || weights.len() != pv.rows() {
            return Err(shape_err("weighted_sq_err", pv, &target));
        }
        let m = pv.cols();
        let mut total = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let s: f64 = pv.row_slice(i)
                .iter()
                .zip(&target.data()[i * m..(i + 1) * m])
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += w * s;
        }
        let out = DenseArray::scalar(total / pv.rows() as f64);
        Ok(self.push(out, Op::WeightedSqErr { pred, target, weights }))
    }

    /// Pairwise quantile Huber loss. `pred` is `R x 1` (one quantile value per
    /// row at fraction `fractions[r]`), `targets` is `R x m`. The result is
    /// `scale * sum_r mean_j rho(u_r, targets[r, j] - pred[r])`.
    pub fn quantile_huber(
        &mut self,
        pred: Var,
        targets: DenseArray,
        fractions: Vec<f64>,
        kappa: f64,
        scale: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 1 || targets.rows() != pv.rows() || fractions.len() != pv.rows() {
            return Err(shape_err("quantile_huber", pv, &targets));
        }
        if !(kappa > 0.0) {
            return Err(Error::Config(format!("quantile Huber threshold must be > 0, got {kappa}")));
        }
        let m = targets.cols();
        let mut total = 0.0;
        for r in 0..pv.rows() {
            let p = pv.data()[r];
            let s: f64 = targets
                .row_slice(r)
                .iter()
                .map(|&y| kernels::quantile_huber(fractions[r], y - p, kappa).0)
                .sum();
            total += s / m as f64;
        }
        let out = DenseArray::scalar(scale * total);
        Ok(self.push(out, Op::QuantileHuber { pred, targets, fractions, kappa, scale }))
    }

    /// Mean over rows of the cross-entropy `-sum_j p_j log softmax(logits)_j`.
    pub fn softmax_xent(&mut self, logits: Var, target: DenseArray) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.same_shape(&target) {
            return Err(shape_err("softmax_xent", lv, &target));
        }
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let ls = kernels::log_softmax_row(lv.row_slice(r));
            total -= ls.iter().zip(target.row_slice(r)).map(|(l, p)| l * p).sum::<f64>();
        }
        let out = DenseArray::scalar(total / lv.rows() as f64);
        Ok(self.push(out, Op::SoftmaxXent { logits, target }))
    }

    /// Propagates `seed` (same shape as `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: DenseArray) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != seed.len() {
            return Err(shape_err("backward seed", out_val, &seed));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseArray::from_parts(out_val.rows(), out_val.cols(), seed.into_data()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = kernels::matmul_nt(&g, self.value(*b));
                    let db = kernels::matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, DenseArray::new(bshape, db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::MulRow(x, s) => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let m = g.cols();
                    let mut ds = vec![0.0; m];
                    for (grow, xrow) in g.data().chunks_exact(m).zip(xv.data().chunks_exact(m)) {
                        for j in 0..m {
                            ds[j] += grow[j] * xrow[j];
                        }
                    }
                    let dx = kernels::mul_row(&g, sv);
                    accumulate(&mut grads, *s, DenseArray::new(sv.shape().to_vec(), ds)?);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data().iter().zip(xv.data()).map(|(gv, xv)| gv * kernels::gelu_grad(*xv)).collect();
                    accumulate(&mut grads, *x, DenseArray::from_parts(g.rows(), g.cols(), data));
                }
                Op::LayerNorm(x, inv) => {
                    let y = &node.value;
                    let m = g.cols();
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, yrow)) in g.data().chunks_exact(m).zip(y.data().chunks_exact(m)).enumerate() {
                        let mean_g = grow.iter().sum::<f64>() / m as f64;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx.push(inv[r] * (grow[j] - mean_g - yrow[j] * mean_gy));
                        }
                    }
                    accumulate(&mut grads, *x, DenseArray::from_parts(g.rows(), m, dx));
                }
                Op::Concat(parts) => {
                    let n = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, *p, DenseArray::from_parts(n, w, d));
                        offset += w;
                    }
                }
                Op::TileRows(x, k) => {
                    let xv = self.value(*x);
                    let len = xv.len();
                    let mut d = vec![0.0; len];
                    for j in 0..*k {
                        for (o, v) in d.iter_mut().zip(&g.data()[j * len..(j + 1) * len]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, DenseArray::from_parts(xv.rows(), xv.cols(), d));
                }
                Op::BlockMean(x, k) => {
                    let mut d = Vec::with_capacity(g.len() * k);
                    for _ in 0..*k {
                        d.extend(g.data().iter().map(|v| v / *k as f64));
                    }
                    accumulate(&mut grads, *x, DenseArray::from_parts(g.rows() * k, g.cols(), d));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        // ties route to the first argument
                        if av.data()[i] <= bv.data()[i] {
                            da[i] = g.data()[i];
                        } else {
                            db[i] = g.data()[i];
                        }
                    }
                    accumulate(&mut grads, *a, DenseArray::from_parts(g.rows(), g.cols(), da));
                    accumulate(&mut grads, *b, DenseArray::from_parts(g.rows(), g.cols(), db));
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let m = xv.cols();
                    let d = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(m)).collect();
                    accumulate(&mut grads, *x, DenseArray::from_parts(xv.rows(), m, d));
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0] / xv.len() as f64;
                    accumulate(&mut grads, *x, DenseArray::from_parts(xv.rows(), xv.cols(), vec![s; xv.len()]));
                }
                Op::WeightedSqErr { pred, target, weights } => {
                    let pv = self.value(*pred);
                    let m = pv.cols();
                    let c = 2.0 * g.data()[0] / pv.rows() as f64;
                    let d = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(i, (p, t))| c * weights[i / m] * (p - t))
                        .collect();
                    accumulate(&mut grads, *pred, DenseArray::from_parts(pv.rows(), m, d));
                }
                Op::QuantileHuber { pred, targets, fractions, kappa, scale } => {
                    let pv = self.value(*pred);
                    let m = targets.cols();
                    let c = g.data()[0] * scale / m as f64;
                    let d = (0..pv.rows())
                        .map(|r| {
                            let p = pv.data()[r];
                            let s: f64 = targets
                                .row_slice(r)
                                .iter()
                                .map(|&y| kernels::quantile_huber(fractions[r], y - p, *kappa).1)
                                .sum();
                            -c * s
                        })
                        .collect();
                    accumulate(&mut grads, *pred, DenseArray::from_parts(pv.rows(), 1, d));
                }
                Op::SoftmaxXent { logits, target } => {
                    let lv = self.value(*logits);
                    let c = g.data()[0] / lv.rows() as f64;
                    let mut d = Vec::with_capacity(lv.len());
                    for r in 0..lv.rows() {
                        let ls = kernels::log_softmax_row(lv.row_slice(r));
                        let trow = target.row_slice(r);
                        let mass: f64 = trow.iter().sum();
                        for (l, p) in ls.iter().zip(trow) {
                            d.push(c * (l.exp() * mass - p));
                        }
                    }
                    accumulate(&mut grads, *logits, DenseArray::from_parts(lv.rows(), lv.cols(), d));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], v: Var, g: DenseArray) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`]: gradients of the seeded output with respect
/// to leaf nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a bound parameter set; untouched parameters get zeros.
    pub fn params(&self, bound: &BoundParams, like: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, value) in like.iter() {
            let v = bound.var(name)?;
            let g = match self.get(v) {
                Some(g) => DenseArray::new(value.shape().to_vec(), g.data().to_vec())?,
                None => DenseArray::zeros(value.shape()),
            };
            out.insert(name.clone(), g)?;
        }
        Ok(out)
    }
}

//! Minimal reverse-mode tape over dense matrices.
//!
//! Every operation appends a node holding the forward value and a backward
//! closure that scatters the node's adjoint into its inputs. Nodes are
//! addressed by [`Var`] indices, so a forward value can feed any number of
//! later operations. The contract is gradient fidelity only: each op's
//! backward is exercised against central finite differences in the tests.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::matrix::{sq_dist, Matrix};
use crate::numerics::mlp::Activation;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Matrix, &mut [Matrix])>;

struct Node {
    value: Matrix,
    back: Option<BackFn>,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Matrix>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> &Matrix {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a leaf (parameter or constant). Leaves receive adjoints but
    /// have no backward of their own.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        if m.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "expected scalar node, got {:?}",
                m.shape()
            )));
        }
        Ok(m.get(0, 0))
    }

    fn push(&self, value: Matrix, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns one adjoint per node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward root must be scalar, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Matrix> = nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].fill(1.0);
        for i in (0..=root.0).rev() {
            if let Some(back) = &nodes[i].back {
                // Inputs of a node always precede it, so grads[i] is final
                // by the time we visit i. Take it out to avoid aliasing.
                let g = std::mem::replace(&mut grads[i], Matrix::zeros(0, 0));
                back(&g, &mut grads);
                grads[i] = g;
            }
        }
        Ok(Grads { grads })
    }

    // ----- arithmetic -----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads[a.0].add_assign(g).unwrap();
                grads[b.0].add_assign(g).unwrap();
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads[a.0].add_assign(g).unwrap();
                grads[b.0].add_assign(&g.scale(-1.0)).unwrap();
            })),
        ))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads[a.0].add_assign(&g.scale(k)).unwrap();
            })),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul(&bv)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads[a.0]
                    .add_assign(&g.matmul(&bv.transpose()).unwrap())
                    .unwrap();
                grads[b.0]
                    .add_assign(&av.transpose().matmul(g).unwrap())
                    .unwrap();
            })),
        ))
    }

    /// Add a 1 x d bias row to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + bias {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bv.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads[a.0].add_assign(g).unwrap();
                let gb = &mut grads[bias.0];
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = gb.get(0, c) + g.get(r, c);
                        gb.set(0, c, v);
                    }
                }
            })),
        ))
    }

    /// Tile a 1 x d row into n identical rows.
    pub fn repeat_rows(&self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::Dimension(format!(
                "repeat_rows expects a row vector, got {:?}",
                av.shape()
            )));
        }
        let mut out = Matrix::zeros(n, av.cols());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(av.row(0));
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = ga.get(0, c) + g.get(r, c);
                        ga.set(0, c, v);
                    }
                }
            })),
        ))
    }

    pub fn activation(&self, a: Var, act: Activation) -> Var {
        let av = self.value(a);
        let out = av.map(|v| act.apply(v));
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for (i, gv) in g.data().iter().enumerate() {
                    ga.data_mut()[i] += gv * act.derivative(av.data()[i]);
                }
            })),
        )
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rows() != bv.rows() {
            return Err(Error::Dimension(format!(
                "concat_cols row mismatch: {} vs {}",
                av.rows(),
                bv.rows()
            )));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Matrix::zeros(n, ca + cb);
        for r in 0..n {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for r in 0..n {
                    for c in 0..ca {
                        let v = grads[a.0].get(r, c) + g.get(r, c);
                        grads[a.0].set(r, c, v);
                    }
                    for c in 0..cb {
                        let v = grads[b.0].get(r, c) + g.get(r, ca + c);
                        grads[b.0].set(r, c, v);
                    }
                }
            })),
        ))
    }

    /// Stack several matrices with equal column counts on top of each other.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("stack_rows of zero vars".into()));
        }
        let values: Vec<Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Matrix> = values.iter().collect();
        let out = Matrix::vstack(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let row_counts: Vec<usize> = values.iter().map(|m| m.rows()).collect();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut offset = 0;
                for (idx, &id) in ids.iter().enumerate() {
                    let rows = row_counts[idx];
                    for r in 0..rows {
                        for c in 0..g.cols() {
                            let v = grads[id].get(r, c) + g.get(offset + r, c);
                            grads[id].set(r, c, v);
                        }
                    }
                    offset += rows;
                }
            })),
        ))
    }

    /// Select rows by index (repeats allowed), result indices.len() x d.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if indices.is_empty() {
            return Err(Error::Argument("gather_rows with no indices".into()));
        }
        for &i in indices {
            if i >= av.rows() {
                return Err(Error::Argument(format!(
                    "row {i} out of range for {} rows",
                    av.rows()
                )));
            }
        }
        let mut out = Matrix::zeros(indices.len(), av.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let idx = indices.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..g.cols() {
                        let v = ga.get(i, c) + g.get(r, c);
                        ga.set(i, c, v);
                    }
                }
            })),
        ))
    }

    /// Mean over rows, result 1 x d.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let out = av.mean_rows();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for c in 0..g.cols() {
                        let v = ga.get(r, c) + g.get(0, c) * inv;
                        ga.set(r, c, v);
                    }
                }
            })),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum();
        let (rows, cols) = av.shape();
        self.push(
            Matrix::from_vec(1, 1, vec![s]).unwrap(),
            Some(Box::new(move |g, grads| {
                let gv = g.get(0, 0);
                let ga = &mut grads[a.0];
                for r in 0..rows {
                    for c in 0..cols {
                        let v = ga.get(r, c) + gv;
                        ga.set(r, c, v);
                    }
                }
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let count = (av.rows() * av.cols()) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count)
    }

    /// Reinterpret the data in row-major order under a new shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() * av.cols() != rows * cols {
            return Err(Error::Dimension(format!(
                "reshape {:?} to {rows}x{cols}",
                av.shape()
            )));
        }
        let out = Matrix::from_vec(rows, cols, av.data().to_vec())?;
        let (orig_r, orig_c) = av.shape();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let back = Matrix::from_vec(orig_r, orig_c, g.data().to_vec()).unwrap();
                grads[a.0].add_assign(&back).unwrap();
            })),
        ))
    }

    /// Extract column `j` as an n x 1 matrix.
    pub fn col(&self, a: Var, j: usize) -> Result<Var> {
        let av = self.value(a);
        if j >= av.cols() {
            return Err(Error::Argument(format!(
                "column {j} out of range for {:?}",
                av.shape()
            )));
        }
        let n = av.rows();
        let mut out = Matrix::zeros(n, 1);
        for r in 0..n {
            out.set(r, 0, av.get(r, j));
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for r in 0..n {
                    let v = ga.get(r, j) + g.get(r, 0);
                    ga.set(r, j, v);
                }
            })),
        ))
    }

    /// Row-wise log-sum-exp, result n x 1. Stable under large logits.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let mut out = Matrix::zeros(n, 1);
        for r in 0..n {
            out.set(r, 0, logsumexp(av.row(r)));
        }
        let lse = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for r in 0..n {
                    let gr = g.get(r, 0);
                    let l = lse.get(r, 0);
                    for c in 0..av.cols() {
                        let p = (av.get(r, c) - l).exp();
                        let v = ga.get(r, c) + gr * p;
                        ga.set(r, c, v);
                    }
                }
            })),
        )
    }

    /// Sum of Gaussian kernel values over all row pairs of `a` and `b`:
    /// sum_ij exp(-0.5 ||a_i - b_j||^2). `a` and `b` may be the same node.
    pub fn gauss_kernel_sum(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.cols() != bv.cols() {
            return Err(Error::Dimension(format!(
                "kernel sum over {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut total = 0.0;
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                total += (-0.5 * sq_dist(av.row(i), bv.row(j))).exp();
            }
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total]).unwrap(),
            Some(Box::new(move |g, grads| {
                let gv = g.get(0, 0);
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let k = (-0.5 * sq_dist(av.row(i), bv.row(j))).exp();
                        for c in 0..av.cols() {
                            let diff = av.get(i, c) - bv.get(j, c);
                            // d/da_i = k * (b_j - a_i), d/db_j = k * (a_i - b_j)
                            let va = grads[a.0].get(i, c) - gv * k * diff;
                            grads[a.0].set(i, c, va);
                            let vb = grads[b.0].get(j, c) + gv * k * diff;
                            grads[b.0].set(j, c, vb);
                        }
                    }
                }
            })),
        ))
    }

    /// m x m matrix of squared Euclidean distances between rows of `a`.
    pub fn pairwise_sqdist(&self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.rows();
        let mut out = Matrix::zeros(m, m);
        for e in 0..m {
            for j in (e + 1)..m {
                let d = sq_dist(av.row(e), av.row(j));
                out.set(e, j, d);
                out.set(j, e, d);
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ga = &mut grads[a.0];
                for e in 0..m {
                    for j in 0..m {
                        if e == j {
                            continue;
                        }
                        // out_ej depends on rows e and j.
                        let gv = g.get(e, j);
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..av.cols() {
                            let diff = av.get(e, c) - av.get(j, c);
                            let ve = ga.get(e, c) + gv * 2.0 * diff;
                            ga.set(e, c, ve);
                            let vj = ga.get(j, c) - gv * 2.0 * diff;
                            ga.set(j, c, vj);
                        }
                    }
                }
            })),
        )
    }

    /// Per-row cosine distances between matching rows of `a` and `b`,
    /// result n x 1. A zero-norm row on either side contributes distance 1
    /// with zero gradient.
    pub fn row_cosine_distance(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "row_cosine_distance {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.rows();
        let mut out = Matrix::zeros(n, 1);
        for r in 0..n {
            out.set(r, 0, cosine_distance_slices(av.row(r), bv.row(r)));
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for r in 0..n {
                    let gr = g.get(r, 0);
                    if gr == 0.0 {
                        continue;
                    }
                    let u = av.row(r);
                    let v = bv.row(r);
                    let nu = norm(u);
                    let nv = norm(v);
                    if nu == 0.0 || nv == 0.0 {
                        continue;
                    }
                    let c: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                    for i in 0..u.len() {
                        // d(1 - cos)/du_i = -(v_i/(nu*nv) - c*u_i/(nu^3*nv))
                        let du = -(v[i] / (nu * nv) - c * u[i] / (nu * nu * nu * nv));
                        let dv = -(u[i] / (nu * nv) - c * v[i] / (nu * nv * nv * nv));
                        let va = grads[a.0].get(r, i) + gr * du;
                        grads[a.0].set(r, i, va);
                        let vb = grads[b.0].get(r, i) + gr * dv;
                        grads[b.0].set(r, i, vb);
                    }
                }
            })),
        ))
    }

    /// Weighted softmax cross-entropy over rows, averaged by row count:
    /// (1/n) sum_i w[y_i] * (logsumexp(x_i) - x_i[y_i]).
    pub fn softmax_cross_entropy(
        &self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let xv = self.value(logits);
        let n = xv.rows();
        if labels.len() != n {
            return Err(Error::Argument(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if class_weights.len() != xv.cols() {
            return Err(Error::Argument(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                xv.cols()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= xv.cols() {
                return Err(Error::Argument(format!(
                    "label {y} at row {i} out of range for {} classes",
                    xv.cols()
                )));
            }
        }
        if class_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Argument("class weights must be >= 0".into()));
        }
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        let mut total = 0.0;
        let mut lses = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let lse = logsumexp(xv.row(i));
            lses.push(lse);
            total += weights[y] * (lse - xv.get(i, y));
        }
        total /= n as f64;
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total]).unwrap(),
            Some(Box::new(move |g, grads| {
                let gv = g.get(0, 0) / n as f64;
                let gx = &mut grads[logits.0];
                for (i, &y) in labels.iter().enumerate() {
                    let w = weights[y];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..xv.cols() {
                        let p = (xv.get(i, c) - lses[i]).exp();
                        let delta = if c == y { 1.0 } else { 0.0 };
                        let v = gx.get(i, c) + gv * w * (p - delta);
                        gx.set(i, c, v);
                    }
                }
            })),
        ))
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine distance 1 - u.v/(|u||v|) with the zero-norm case defined as 1.
pub(crate) fn cosine_distance_slices(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    let c: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    1.0 - c / (nu * nv)
}

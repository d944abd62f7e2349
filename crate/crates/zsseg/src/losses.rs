//! Training objectives. Every loss returns its scalar value together with
//! exact gradients with respect to the differentiable inputs; all of them
//! are also available as tape expressions for end-to-end training.

use crate::error::{Error, Result};
use crate::numerics::matrix::{sq_dist, Matrix};
use crate::numerics::tape::{cosine_distance_slices, Tape, Var};

/// Gaussian kernel exp(-0.5 ||x-y||^2), in (0, 1].
pub fn gaussian_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "kernel over {} vs {} dims",
            x.len(),
            y.len()
        )));
    }
    Ok((-0.5 * sq_dist(x, y)).exp())
}

/// Cosine distance 1 - cos(u, v) in [0, 2]; zero-norm inputs give 1.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "cosine distance over {} vs {} dims",
            u.len(),
            v.len()
        )));
    }
    Ok(cosine_distance_slices(u, v))
}

/// Whether the MMD double sums stay literal or are divided by pair counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdNormalization {
    /// Literal double sums, self-pairs included.
    Unnormalized,
    /// Biased estimator: terms divided by n^2, m^2 and n*m.
    Biased,
}

/// MMD between two feature sets as a tape expression:
/// sum mu(x,x') + sum mu(xh,xh') - 2 sum sum mu(x,xh).
pub fn mmd_tape(tape: &Tape, real: Var, synth: Var, norm: MmdNormalization) -> Result<Var> {
    let (n, _) = tape.shape(real);
    let (m, _) = tape.shape(synth);
    if n == 0 || m == 0 {
        return Err(Error::Argument("MMD of an empty set".into()));
    }
    let rr = tape.gauss_kernel_sum(real, real)?;
    let ss = tape.gauss_kernel_sum(synth, synth)?;
    let rs = tape.gauss_kernel_sum(real, synth)?;
    let (rr, ss, rs) = match norm {
        MmdNormalization::Unnormalized => (rr, ss, rs),
        MmdNormalization::Biased => (
            tape.scale(rr, 1.0 / (n * n) as f64),
            tape.scale(ss, 1.0 / (m * m) as f64),
            tape.scale(rs, 1.0 / (n * m) as f64),
        ),
    };
    tape.sub(tape.add(rr, ss)?, tape.scale(rs, 2.0))
}

/// MMD loss with gradient with respect to the synthetic features.
pub fn mmd_loss(real: &Matrix, synth: &Matrix) -> Result<(f64, Matrix)> {
    mmd_loss_with(real, synth, MmdNormalization::Unnormalized)
}

pub fn mmd_loss_with(
    real: &Matrix,
    synth: &Matrix,
    norm: MmdNormalization,
) -> Result<(f64, Matrix)> {
    if real.cols() != synth.cols() {
        return Err(Error::Dimension(format!(
            "MMD over {:?} vs {:?}",
            real.shape(),
            synth.shape()
        )));
    }
    let tape = Tape::new();
    let r = tape.leaf(real.clone());
    let s = tape.leaf(synth.clone());
    let out = mmd_tape(&tape, r, s, norm)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(s).clone()))
}

/// InfoNCE as a tape expression. `centroids` holds the positive centroid in
/// row 0 followed by the negatives; logits are dot products scaled by 1/tau,
/// and the loss is averaged over synthetic rows.
pub fn infonce_tape(tape: &Tape, synth: Var, centroids: &Matrix, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("temperature {tau} must be > 0")));
    }
    let c_t = tape.leaf(centroids.transpose());
    let logits = tape.scale(tape.matmul(synth, c_t)?, 1.0 / tau);
    let lse = tape.logsumexp_rows(logits);
    let pos = tape.col(logits, 0)?;
    Ok(tape.mean_all(tape.sub(lse, pos)?))
}

/// InfoNCE loss with gradient with respect to the synthetic features.
pub fn infonce_loss(
    synth: &Matrix,
    positive_centroid: &[f64],
    negative_centroids: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if synth.rows() == 0 {
        return Err(Error::Argument("InfoNCE over an empty set".into()));
    }
    if positive_centroid.len() != synth.cols()
        || negative_centroids.iter().any(|n| n.len() != synth.cols())
    {
        return Err(Error::Dimension("centroid width mismatch".into()));
    }
    let mut rows = vec![positive_centroid.to_vec()];
    rows.extend(negative_centroids.iter().cloned());
    let centroids = Matrix::from_rows(&rows)?;
    let tape = Tape::new();
    let s = tape.leaf(synth.clone());
    let out = infonce_tape(&tape, s, &centroids, tau)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(s).clone()))
}

/// Mean cosine distance between each prototype row and the mapped semantic
/// prototype, as a tape expression. `sigma_t` is a 1 x d node.
pub fn align_tape(tape: &Tape, prototypes: Var, sigma_t: Var) -> Result<Var> {
    let (b, _) = tape.shape(prototypes);
    let rep = tape.repeat_rows(sigma_t, b)?;
    let d = tape.row_cosine_distance(prototypes, rep)?;
    Ok(tape.mean_all(d))
}

/// Alignment loss with gradients for both the prototypes and sigma(t).
pub fn align_loss(prototypes: &Matrix, sigma_t: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if prototypes.rows() == 0 {
        return Err(Error::Argument("alignment over zero prototypes".into()));
    }
    if sigma_t.rows() != 1 || sigma_t.cols() != prototypes.cols() {
        return Err(Error::Dimension(format!(
            "sigma(t) shape {:?} vs prototypes {:?}",
            sigma_t.shape(),
            prototypes.shape()
        )));
    }
    let tape = Tape::new();
    let p = tape.leaf(prototypes.clone());
    let s = tape.leaf(sigma_t.clone());
    let out = align_tape(&tape, p, s)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(p).clone(), grads.wrt(s).clone()))
}

/// Squared-distance relation matrices over matching semantic and visual
/// prototype sets. Both are symmetric with zero diagonals.
#[derive(Clone, Debug)]
pub struct RelationMatrices {
    pub w: Matrix,
    pub v: Matrix,
    visual_set: Matrix,
}

impl RelationMatrices {
    pub fn size(&self) -> usize {
        self.w.rows()
    }

    pub fn visual_set(&self) -> &Matrix {
        &self.visual_set
    }
}

fn pairwise_sqdist_matrix(set: &Matrix) -> Matrix {
    let m = set.rows();
    let mut out = Matrix::zeros(m, m);
    for e in 0..m {
        for j in (e + 1)..m {
            let d = sq_dist(set.row(e), set.row(j));
            out.set(e, j, d);
            out.set(j, e, d);
        }
    }
    out
}

pub fn relation_matrices(semantic_set: &Matrix, visual_set: &Matrix) -> Result<RelationMatrices> {
    if semantic_set.rows() != visual_set.rows() {
        return Err(Error::Argument(format!(
            "{} semantic vs {} visual prototypes",
            semantic_set.rows(),
            visual_set.rows()
        )));
    }
    if semantic_set.rows() < 2 {
        return Err(Error::Argument(
            "relation matrices need at least two prototypes".into(),
        ));
    }
    Ok(RelationMatrices {
        w: pairwise_sqdist_matrix(semantic_set),
        v: pairwise_sqdist_matrix(visual_set),
        visual_set: visual_set.clone(),
    })
}

/// How the consistency loss compares the two relation matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyMode {
    /// Cosine distance between matching rows, summed over rows.
    RowWise,
    /// Single cosine distance between the flattened matrices.
    Flattened,
}

/// Consistency between semantic and visual relation structure as a tape
/// expression; `w` is constant, `visual_set` is the differentiable input.
pub fn consistency_tape(
    tape: &Tape,
    w: &Matrix,
    visual_set: Var,
    mode: ConsistencyMode,
) -> Result<Var> {
    let v = tape.pairwise_sqdist(visual_set);
    let w_leaf = tape.leaf(w.clone());
    match mode {
        ConsistencyMode::RowWise => {
            let d = tape.row_cosine_distance(w_leaf, v)?;
            Ok(tape.sum_all(d))
        }
        ConsistencyMode::Flattened => {
            let m = w.rows();
            let wf = tape.reshape(w_leaf, 1, m * m)?;
            let vf = tape.reshape(v, 1, m * m)?;
            let d = tape.row_cosine_distance(wf, vf)?;
            Ok(tape.sum_all(d))
        }
    }
}

/// Consistency loss with gradient with respect to the visual prototype set.
pub fn consistency_loss(r: &RelationMatrices) -> Result<(f64, Matrix)> {
    consistency_loss_with(r, ConsistencyMode::RowWise)
}

pub fn consistency_loss_with(r: &RelationMatrices, mode: ConsistencyMode) -> Result<(f64, Matrix)> {
    let tape = Tape::new();
    let vs = tape.leaf(r.visual_set.clone());
    let out = consistency_tape(&tape, &r.w, vs, mode)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(vs).clone()))
}

/// Weighted cross-entropy with gradient with respect to the logits:
/// -(1/n) sum_i w[y_i] log softmax(logits_i)[y_i].
pub fn cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Matrix)> {
    let tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let out = tape.softmax_cross_entropy(x, labels, class_weights)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(x).clone()))
}

/// Per-class contributions to the joint generator objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub mmd: f64,
    pub con: f64,
    pub align: f64,
    pub cst: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.mmd.is_finite()
            && self.con.is_finite()
            && self.align.is_finite()
            && self.cst.is_finite()
    }
}

/// Joint generator loss for one class: mmd + con + align + alpha * cst.
pub fn generator_loss(parts: &LossParts, alpha: f64) -> f64 {
    parts.mmd + parts.con + parts.align + alpha * parts.cst
}

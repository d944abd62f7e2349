//! Point-feature geometry: farthest point sampling, nearest-anchor
//! assignment, and the prototype-construction strategies.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::matrix::{sq_dist, Matrix};
use crate::rng;

/// How the first FPS anchor is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartRule {
    /// Index 0.
    FirstIndex,
    /// Row with the largest l2 norm; ties to the lowest index.
    MaxNorm,
}

/// How the anchor count `n * r` is turned into an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    Floor,
    Nearest,
}

impl Rounding {
    /// Anchor count for `n` points at ratio `r`, clamped to at least 1.
    pub fn anchor_count(self, n: usize, r: f64) -> usize {
        let raw = n as f64 * r;
        let k = match self {
            Rounding::Floor => raw.floor(),
            Rounding::Nearest => raw.round(),
        };
        (k as usize).clamp(1, n)
    }
}

/// Mapping of every point to its nearest anchor.
#[derive(Clone, Debug)]
pub struct AnchorAssignment {
    pub anchor_indices: Vec<usize>,
    /// Position (into `anchor_indices`) of the nearest anchor, per point.
    pub point_anchor: Vec<usize>,
}

/// Greedy max-min farthest point sampling over rows of `features`.
///
/// Each selection maximizes the minimum l2 distance to the points already
/// selected; ties break to the lowest index.
pub fn fps(features: &Matrix, k: usize, start: StartRule) -> Result<Vec<usize>> {
    let n = features.rows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("fps: k = {k} outside 1..={n}")));
    }
    let first = match start {
        StartRule::FirstIndex => 0,
        StartRule::MaxNorm => {
            let mut best = 0;
            let mut best_norm = f64::NEG_INFINITY;
            for i in 0..n {
                let nm: f64 = features.row(i).iter().map(|v| v * v).sum();
                if nm > best_norm {
                    best_norm = nm;
                    best = i;
                }
            }
            best
        }
    };
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    selected.push(first);
    taken[first] = true;
    // min squared distance from each point to the selected set
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(first)))
        .collect();
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        taken[best] = true;
        for i in 0..n {
            let d = sq_dist(features.row(i), features.row(best));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(selected)
}

/// Assign every point to its nearest anchor (l2; ties to the lowest anchor
/// position). A point that is itself an anchor always lands in its own
/// region, so every region contains at least its anchor even when anchors
/// coincide.
pub fn assign_to_anchors(features: &Matrix, anchor_indices: &[usize]) -> Result<AnchorAssignment> {
    if anchor_indices.is_empty() {
        return Err(Error::Argument("assign_to_anchors: no anchors".into()));
    }
    for &a in anchor_indices {
        if a >= features.rows() {
            return Err(Error::Argument(format!(
                "anchor index {a} out of range for {} points",
                features.rows()
            )));
        }
    }
    let mut point_anchor = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        if let Some(own) = anchor_indices.iter().position(|&a| a == i) {
            point_anchor.push(own);
            continue;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (pos, &a) in anchor_indices.iter().enumerate() {
            let d = sq_dist(features.row(i), features.row(a));
            if d < best_d {
                best_d = d;
                best = pos;
            }
        }
        point_anchor.push(best);
    }
    Ok(AnchorAssignment {
        anchor_indices: anchor_indices.to_vec(),
        point_anchor,
    })
}

/// Neighbor-aware prototypes: FPS anchors at ratio `r`, nearest-anchor
/// regions, and the mean of each region. Result is `anchor_count x d`.
pub fn neighbor_aware_prototypes(
    features: &Matrix,
    r: f64,
    start: StartRule,
    rounding: Rounding,
) -> Result<Matrix> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Argument("prototypes of an empty set".into()));
    }
    let k = rounding.anchor_count(n, r);
    let anchors = fps(features, k, start)?;
    let assignment = assign_to_anchors(features, &anchors)?;
    region_means(features, &assignment, k)
}

/// Mean of each anchor region. Regions are non-empty whenever anchors were
/// selected from the data, since an anchor is nearest to itself.
pub fn region_means(
    features: &Matrix,
    assignment: &AnchorAssignment,
    num_anchors: usize,
) -> Result<Matrix> {
    let d = features.cols();
    let mut sums = Matrix::zeros(num_anchors, d);
    let mut counts = vec![0usize; num_anchors];
    for (i, &a) in assignment.point_anchor.iter().enumerate() {
        if a >= num_anchors {
            return Err(Error::Argument(format!(
                "anchor id {a} out of range for {num_anchors} anchors"
            )));
        }
        counts[a] += 1;
        for c in 0..d {
            let v = sums.get(a, c) + features.get(i, c);
            sums.set(a, c, v);
        }
    }
    for (a, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            return Err(Error::State(format!("anchor {a} has an empty region")));
        }
        for c in 0..d {
            let v = sums.get(a, c) / cnt as f64;
            sums.set(a, c, v);
        }
    }
    Ok(sums)
}

/// Arithmetic mean over rows, as a 1 x d matrix.
pub fn simple_average_prototype(features: &Matrix) -> Result<Matrix> {
    if features.rows() == 0 {
        return Err(Error::Argument("average of an empty set".into()));
    }
    Ok(features.mean_rows())
}

/// Lloyd's algorithm with seeded initial centers drawn without replacement
/// from the rows. An empty cluster is re-seeded to the point farthest from
/// that cluster's previous center.
pub fn kmeans_prototypes(features: &Matrix, k: usize, iters: usize, seed: u64) -> Result<Matrix> {
    let n = features.rows();
    let d = features.cols();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("kmeans: k = {k} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, "kmeans");
    order.shuffle(&mut rng);
    let mut centers = Matrix::zeros(k, d);
    for (c, &i) in order.iter().take(k).enumerate() {
        centers.row_mut(c).copy_from_slice(features.row(i));
    }
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(features.row(i), centers.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let a = assignment[i];
            counts[a] += 1;
            for c in 0..d {
                let v = sums.get(a, c) + features.get(i, c);
                sums.set(a, c, v);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from the stale center
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for i in 0..n {
                    let dist = sq_dist(features.row(i), centers.row(c));
                    if dist > far_d {
                        far_d = dist;
                        far = i;
                    }
                }
                centers.row_mut(c).copy_from_slice(features.row(far));
            } else {
                for j in 0..d {
                    centers.set(c, j, sums.get(c, j) / counts[c] as f64);
                }
            }
        }
    }
    Ok(centers)
}

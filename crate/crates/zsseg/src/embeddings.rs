//! Semantic-embedding management: word-vector loading, concatenation,
//! synthetic class embeddings, per-point replication, and random masking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::rng::Stream;

/// Per-class semantic embedding vectors with a seen/unseen partition.
/// Immutable after construction; shared reads are safe.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTable {
    names: Vec<String>,
    vectors: Matrix,
    seen: Vec<bool>,
}

impl SemanticTable {
    pub fn new(names: Vec<String>, vectors: Matrix, seen: Vec<bool>) -> Result<Self> {
        if names.len() != vectors.rows() || names.len() != seen.len() {
            return Err(Error::Argument(format!(
                "{} names, {} vectors, {} flags",
                names.len(),
                vectors.rows(),
                seen.len()
            )));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Argument("duplicate class names".into()));
        }
        Ok(SemanticTable {
            names,
            vectors,
            seen,
        })
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, class_id: usize) -> Result<&[f64]> {
        if class_id >= self.class_count() {
            return Err(Error::Lookup(format!("class id {class_id}")));
        }
        Ok(self.vectors.row(class_id))
    }

    pub fn is_seen(&self, class_id: usize) -> bool {
        self.seen[class_id]
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.class_count()).filter(|&c| self.seen[c]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.class_count()).filter(|&c| !self.seen[c]).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("class `{name}`")))
    }

    /// Replace the seen/unseen partition.
    pub fn set_seen_flags(&mut self, seen: Vec<bool>) -> Result<()> {
        if seen.len() != self.class_count() {
            return Err(Error::Argument(format!(
                "{} flags for {} classes",
                seen.len(),
                self.class_count()
            )));
        }
        self.seen = seen;
        Ok(())
    }

    /// Both partitions non-empty, as required for generalized zero-shot runs.
    pub fn check_gzsl(&self) -> Result<()> {
        if self.seen_ids().is_empty() || self.unseen_ids().is_empty() {
            return Err(Error::Argument(
                "table needs at least one seen and one unseen class".into(),
            ));
        }
        Ok(())
    }

    /// Serialize in the checkpoint format, one `class:<name>:<s|u>` row
    /// vector per class.
    pub fn to_checkpoint_string(&self) -> String {
        let mut items: Vec<(String, Matrix)> = Vec::with_capacity(self.class_count());
        for c in 0..self.class_count() {
            let tag = if self.seen[c] { 's' } else { 'u' };
            let mut name = String::new();
            write!(name, "class:{}:{}", self.names[c], tag).unwrap();
            items.push((name, self.vectors.row_matrix(c)));
        }
        checkpoint::matrices_to_string(items.iter().map(|(n, m)| (n.as_str(), m)))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let items = checkpoint::parse_matrices(text)?;
        let mut names = Vec::new();
        let mut seen = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (name, m) in items {
            let rest = name
                .strip_prefix("class:")
                .ok_or_else(|| Error::format_at(0, format!("unexpected entry `{name}`")))?;
            let (cls, tag) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::format_at(0, format!("missing seen tag in `{name}`")))?;
            let flag = match tag {
                "s" => true,
                "u" => false,
                _ => return Err(Error::format_at(0, format!("bad seen tag `{tag}`"))),
            };
            if m.rows() != 1 {
                return Err(Error::format_at(
                    0,
                    format!("class `{cls}` is not a row vector"),
                ));
            }
            names.push(cls.to_string());
            seen.push(flag);
            rows.push(m.row(0).to_vec());
        }
        if names.is_empty() {
            return Err(Error::format_at(0, "table with no classes"));
        }
        let vectors = Matrix::from_rows(&rows)?;
        SemanticTable::new(names, vectors, seen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

/// Parse word vectors from text: one `token v1 v2 ... vD` per line, `D`
/// inferred from the first line. All classes are marked seen; callers set
/// the partition afterwards.
pub fn parse_word_vectors(text: &str, class_names: &[String]) -> Result<SemanticTable> {
    let mut dim: Option<usize> = None;
    let mut tokens: Vec<(&str, Vec<f64>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let mut vec = Vec::new();
        for tok in parts {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format_at(lineno, format!("bad decimal `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::format_at(
                    lineno,
                    format!("non-finite value `{tok}`"),
                ));
            }
            vec.push(v);
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(Error::format_at(
                    lineno,
                    format!("vector has {} dims, expected {d}", vec.len()),
                ))
            }
            _ => {}
        }
        if tokens.iter().all(|(t, _)| *t != token) {
            tokens.push((token, vec));
        }
    }
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let found = tokens
            .iter()
            .find(|(t, _)| t == name)
            .ok_or_else(|| Error::Lookup(format!("class `{name}` not in word-vector file")))?;
        rows.push(found.1.clone());
    }
    if rows.is_empty() {
        return Err(Error::Argument("no classes requested".into()));
    }
    let vectors = Matrix::from_rows(&rows)?;
    let seen = vec![true; class_names.len()];
    SemanticTable::new(class_names.to_vec(), vectors, seen)
}

pub fn load_word_vectors(path: &Path, class_names: &[String]) -> Result<SemanticTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, class_names)
}

/// Row-wise concatenation of two tables over the same class list.
pub fn concat_embeddings(a: &SemanticTable, b: &SemanticTable) -> Result<SemanticTable> {
    if a.names != b.names {
        return Err(Error::Argument(
            "concat requires identical class lists in the same order".into(),
        ));
    }
    if a.seen != b.seen {
        return Err(Error::Argument(
            "concat requires matching seen flags".into(),
        ));
    }
    let mut rows = Vec::with_capacity(a.class_count());
    for c in 0..a.class_count() {
        let mut row = a.vectors.row(c).to_vec();
        row.extend_from_slice(b.vectors.row(c));
        rows.push(row);
    }
    // concatenating with a zero-dim table is the identity
    let vectors = if a.dim() + b.dim() == 0 {
        Matrix::zeros(a.class_count(), 0)
    } else {
        Matrix::from_rows(&rows)?
    };
    SemanticTable::new(a.names.clone(), vectors, a.seen.clone())
}

/// Deterministic synthetic table: unit-norm vectors with pairwise cosine
/// similarity at most cos(min_angle_deg). Classes are named `class00`,
/// `class01`, ... and all marked seen.
pub fn synth_embeddings(
    num_classes: usize,
    dim: usize,
    seed: u64,
    min_angle_deg: f64,
) -> Result<SemanticTable> {
    if num_classes < 2 {
        return Err(Error::Argument("need at least two classes".into()));
    }
    if dim == 0 {
        return Err(Error::Argument(
            "embedding dimension must be positive".into(),
        ));
    }
    let threshold = min_angle_deg.to_radians().cos();
    let mut rng = crate::rng::stream(seed, "synth-embeddings");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    const MAX_TRIES: usize = 20_000;
    for c in 0..num_classes {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let cand = random_unit(&mut rng, dim);
            let ok = rows.iter().all(|r| dot(r, &cand) <= threshold + 1e-12);
            if ok {
                rows.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Argument(format!(
                "could not place class {c} of {num_classes} with min angle {min_angle_deg} deg in {dim} dims"
            )));
        }
    }
    let names = (0..num_classes).map(|c| format!("class{c:02}")).collect();
    let vectors = Matrix::from_rows(&rows)?;
    SemanticTable::new(names, vectors, vec![true; num_classes])
}

fn random_unit(rng: &mut Stream, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// n identical copies of a class embedding, one per point.
pub fn replicate_per_point(t: &[f64], n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("replication count must be >= 1".into()));
    }
    let mut m = Matrix::zeros(n, t.len());
    for r in 0..n {
        m.row_mut(r).copy_from_slice(t);
    }
    Ok(m)
}

/// Granularity of the random masking operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Each entry independently zeroed with probability q.
    Elementwise,
    /// Each row entirely zeroed with probability q.
    PerPoint,
}

/// Zero out parts of the replicated semantics with probability `q`.
/// Unmasked entries pass through unchanged.
pub fn mask_semantics(t: &Matrix, q: f64, rng: &mut Stream, mode: MaskMode) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Argument(format!(
            "mask probability {q} outside [0,1]"
        )));
    }
    let mut out = t.clone();
    match mode {
        MaskMode::Elementwise => {
            for v in out.data_mut() {
                if rng.random::<f64>() < q {
                    *v = 0.0;
                }
            }
        }
        MaskMode::PerPoint => {
            for r in 0..out.rows() {
                if rng.random::<f64>() < q {
                    out.row_mut(r).fill(0.0);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_single_class() {
        let t = parse_word_vectors("chair 1.0 2.0\n", &names(&["chair"])).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.vector(0).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_token_is_lookup_error() {
        let err = parse_word_vectors("chair 1.0 2.0\n", &names(&["sofa"])).unwrap_err();
        assert!(
            matches!(err, Error::Lookup(ref m) if m.contains("sofa")),
            "{err}"
        );
    }

    #[test]
    fn inconsistent_dims_carry_line_number() {
        let text = "chair 1.0 2.0\nsofa 1.0 2.0 3.0\n";
        let err = parse_word_vectors(text, &names(&["chair"])).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn concat_doubles_dimension() {
        let a = parse_word_vectors("chair 1.0 2.0\nsofa 3.0 4.0\n", &names(&["chair", "sofa"]))
            .unwrap();
        let b = parse_word_vectors("chair 5.0\nsofa 6.0\n", &names(&["chair", "sofa"])).unwrap();
        let c = concat_embeddings(&a, &b).unwrap();
        assert_eq!(c.dim(), 3);
        assert_eq!(c.vector(0).unwrap(), &[1.0, 2.0, 5.0]);
        assert_eq!(c.vector(1).unwrap(), &[3.0, 4.0, 6.0]);
    }

    #[test]
    fn concat_with_zero_dim_is_identity() {
        let a = parse_word_vectors("chair 1.0 2.0\n", &names(&["chair"])).unwrap();
        let empty = SemanticTable::new(names(&["chair"]), Matrix::zeros(1, 0), vec![true]).unwrap();
        let c = concat_embeddings(&a, &empty).unwrap();
        assert_eq!(c.vectors(), a.vectors());
    }

    #[test]
    fn concat_positions_by_index_arithmetic() {
        let mut rng = stream(5, "concat-test");
        use rand::Rng;
        let da = 7;
        let db = 4;
        let mut ra = Vec::new();
        let mut rb = Vec::new();
        for _ in 0..3 {
            ra.push(
                (0..da)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
            rb.push(
                (0..db)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
        }
        let cls = names(&["a", "b", "c"]);
        let ta = SemanticTable::new(cls.clone(), Matrix::from_rows(&ra).unwrap(), vec![true; 3])
            .unwrap();
        let tb = SemanticTable::new(cls, Matrix::from_rows(&rb).unwrap(), vec![true; 3]).unwrap();
        let c = concat_embeddings(&ta, &tb).unwrap();
        for cls_id in 0..3 {
            for j in 0..da + db {
                let expect = if j < da {
                    ra[cls_id][j]
                } else {
                    rb[cls_id][j - da]
                };
                assert_eq!(c.vector(cls_id).unwrap()[j], expect);
            }
        }
    }

    #[test]
    fn concat_of_two_300d_tables_is_600d() {
        let mk_line = |token: &str, offset: f64| {
            let vals: Vec<String> = (0..300).map(|i| (offset + i as f64).to_string()).collect();
            format!("{token} {}", vals.join(" "))
        };
        let glove = format!("{}\n{}\n", mk_line("chair", 0.0), mk_line("sofa", 1.5));
        let w2v = format!(
            "{}\n{}\n",
            mk_line("chair", 1000.0),
            mk_line("sofa", 2000.0)
        );
        let cls = names(&["chair", "sofa"]);
        let a = parse_word_vectors(&glove, &cls).unwrap();
        let b = parse_word_vectors(&w2v, &cls).unwrap();
        assert_eq!((a.dim(), b.dim()), (300, 300));
        let c = concat_embeddings(&a, &b).unwrap();
        assert_eq!(c.dim(), 600);
        assert_eq!(c.vector(0).unwrap()[0], 0.0);
        assert_eq!(c.vector(0).unwrap()[300], 1000.0);
    }

    #[test]
    fn synth_orthogonal_pair() {
        let t = synth_embeddings(2, 2, 9, 90.0).unwrap();
        let sim = dot(t.vector(0).unwrap(), t.vector(1).unwrap());
        assert!(sim <= 1e-9, "similarity {sim}");
    }

    #[test]
    fn synth_deterministic_per_seed() {
        let a = synth_embeddings(6, 5, 42, 30.0).unwrap();
        let b = synth_embeddings(6, 5, 42, 30.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_pairwise_threshold_holds() {
        let t = synth_embeddings(10, 8, 7, 25.0).unwrap();
        let thr = 25.0_f64.to_radians().cos();
        for i in 0..10 {
            let vi = t.vector(i).unwrap();
            assert!((dot(vi, vi) - 1.0).abs() < 1e-12);
            for j in 0..i {
                let s = dot(vi, t.vector(j).unwrap());
                assert!(s <= thr + 1e-9, "pair ({i},{j}) similarity {s}");
            }
        }
    }

    #[test]
    fn synth_infeasible_angle_fails() {
        assert!(synth_embeddings(5, 2, 1, 120.0).is_err());
    }

    #[test]
    fn replicate_rows_are_equal() {
        let m = replicate_per_point(&[1.0, -2.0], 5).unwrap();
        assert_eq!(m.rows(), 5);
        for r in 0..5 {
            assert_eq!(m.row(r), &[1.0, -2.0]);
        }
        assert!(replicate_per_point(&[1.0], 0).is_err());
    }

    #[test]
    fn mask_q_zero_and_one() {
        let t = replicate_per_point(&[1.0, 2.0, 3.0], 4).unwrap();
        let mut rng = stream(1, "mask");
        let same = mask_semantics(&t, 0.0, &mut rng, MaskMode::Elementwise).unwrap();
        assert_eq!(same, t);
        let zero = mask_semantics(&t, 1.0, &mut rng, MaskMode::Elementwise).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(mask_semantics(&t, 1.5, &mut rng, MaskMode::Elementwise).is_err());
    }

    #[test]
    fn mask_only_zeroes_entries() {
        let t = replicate_per_point(&[1.0, -1.0, 0.5, 2.0], 50).unwrap();
        let mut rng = stream(2, "mask");
        let masked = mask_semantics(&t, 0.3, &mut rng, MaskMode::Elementwise).unwrap();
        for (a, b) in t.data().iter().zip(masked.data()) {
            assert!(*b == *a || *b == 0.0);
        }
    }

    #[test]
    fn mask_per_point_zeroes_whole_rows() {
        let t = replicate_per_point(&[1.0, 2.0], 200).unwrap();
        let mut rng = stream(3, "mask");
        let masked = mask_semantics(&t, 0.5, &mut rng, MaskMode::PerPoint).unwrap();
        let mut zero_rows = 0;
        for r in 0..200 {
            let row = masked.row(r);
            let all_zero = row.iter().all(|&v| v == 0.0);
            let untouched = row == t.row(r);
            assert!(all_zero || untouched);
            if all_zero {
                zero_rows += 1;
            }
        }
        assert!(zero_rows > 50 && zero_rows < 150);
    }

    #[test]
    fn mask_fraction_within_three_sigma() {
        let t = replicate_per_point(&vec![1.0; 100], 100).unwrap();
        let mut rng = stream(4, "mask");
        let masked = mask_semantics(&t, 0.2, &mut rng, MaskMode::Elementwise).unwrap();
        let zeros = masked.data().iter().filter(|&&v| v == 0.0).count();
        let n: f64 = 10_000.0;
        let sigma = (n * 0.2 * 0.8).sqrt();
        assert!(
            (zeros as f64 - 0.2 * n).abs() <= 3.0 * sigma,
            "zeros {zeros} outside 3 sigma"
        );
    }

    #[test]
    fn table_checkpoint_round_trip() {
        let mut t = synth_embeddings(5, 4, 11, 20.0).unwrap();
        t.set_seen_flags(vec![true, true, true, false, false])
            .unwrap();
        let text = t.to_checkpoint_string();
        let back = SemanticTable::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, t);
    }
}

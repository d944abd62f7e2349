//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantities. Oracle references here are written
//! independently of the library's implementation paths.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use zsseg::config::ExperimentConfig;
use zsseg::embeddings::{mask_semantics, replicate_per_point, MaskMode};
use zsseg::geometry::{assign_to_anchors, fps, neighbor_aware_prototypes, Rounding, StartRule};
use zsseg::losses;
use zsseg::metrics::hmiou;
use zsseg::numerics::gradcheck::finite_diff_check;
use zsseg::numerics::mlp::{bind_params, mlp_forward_tape, Activation, MlpSpec, ParamStore};
use zsseg::numerics::tape::Tape;
use zsseg::rng::stream;
use zsseg::runner::run_full_pipeline;
use zsseg::Matrix;

fn random_matrix(rows: usize, cols: usize, rng: &mut zsseg::rng::Stream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    m
}

// ---------- criterion 1 ----------

#[test]
fn criterion_1_hmiou_arithmetic() {
    let cases = [
        (34.5, 14.3, 20.2),
        (32.8, 7.7, 12.5),
        (58.9, 9.7, 16.7),
        (46.4, 12.8, 20.1),
    ];
    for (s, u, expected) in cases {
        let h = hmiou(s, u);
        assert!(
            (h - expected).abs() <= 0.05,
            "hmiou({s},{u}) = {h}, expected {expected} +- 0.05"
        );
    }
    println!(
        "[PASS] criterion 1: HmIoU arithmetic reproduces all four reference rows within +-0.05"
    );
}

// ---------- criterion 2 ----------

#[test]
fn criterion_2_gradient_suite() {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut r = stream(20_201, "acceptance-grad");
    let mut worst_overall = 0.0_f64;

    // MMD, gradient w.r.t. synthetic features
    for _ in 0..10 {
        let real = random_matrix(6, 3, &mut r);
        let point = random_matrix(5, 3, &mut r);
        let err = finite_diff_check(|s| losses::mmd_loss(&real, s), &point, H).unwrap();
        assert!(err < TOL, "mmd gradient error {err}");
        worst_overall = worst_overall.max(err);
    }
    // InfoNCE. The temperature here keeps the softmax away from hard
    // saturation, where the quadratic truncation term of the central
    // difference itself (not the analytic gradient) dominates the error.
    for _ in 0..10 {
        let pos: Vec<f64> = random_matrix(1, 4, &mut r).row(0).to_vec();
        let negs: Vec<Vec<f64>> = (0..3)
            .map(|_| random_matrix(1, 4, &mut r).row(0).to_vec())
            .collect();
        let point = random_matrix(5, 4, &mut r);
        let err =
            finite_diff_check(|s| losses::infonce_loss(s, &pos, &negs, 0.3), &point, H).unwrap();
        assert!(err < TOL, "infonce gradient error {err}");
        worst_overall = worst_overall.max(err);
    }
    // alignment, both inputs
    for _ in 0..10 {
        let sigma = random_matrix(1, 4, &mut r);
        let point = random_matrix(5, 4, &mut r);
        let err = finite_diff_check(
            |p| losses::align_loss(p, &sigma).map(|(v, g, _)| (v, g)),
            &point,
            H,
        )
        .unwrap();
        assert!(err < TOL, "align gradient (prototypes) error {err}");
        let protos = random_matrix(5, 4, &mut r);
        let sp = random_matrix(1, 4, &mut r);
        let err2 = finite_diff_check(
            |s| losses::align_loss(&protos, s).map(|(v, _, g)| (v, g)),
            &sp,
            H,
        )
        .unwrap();
        assert!(err2 < TOL, "align gradient (sigma) error {err2}");
        worst_overall = worst_overall.max(err).max(err2);
    }
    // consistency, gradient w.r.t. the visual set
    for _ in 0..10 {
        let sem = random_matrix(5, 6, &mut r);
        let point = random_matrix(5, 3, &mut r);
        let err = finite_diff_check(
            |vis| {
                let rel = losses::relation_matrices(&sem, vis)?;
                losses::consistency_loss(&rel)
            },
            &point,
            H,
        )
        .unwrap();
        assert!(err < TOL, "consistency gradient error {err}");
        worst_overall = worst_overall.max(err);
    }
    // weighted cross-entropy
    for case in 0..10usize {
        let classes = 3 + case % 4;
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..classes)).collect();
        let weights: Vec<f64> = (0..classes).map(|_| r.random_range(0.25..2.0)).collect();
        let point = random_matrix(6, classes, &mut r);
        let err =
            finite_diff_check(|l| losses::cross_entropy(l, &labels, &weights), &point, H).unwrap();
        assert!(err < TOL, "cross-entropy gradient error {err}");
        worst_overall = worst_overall.max(err);
    }
    // MLP stack, every parameter of a two-hidden-layer net
    for _ in 0..10 {
        let spec = MlpSpec::new(vec![4, 6, 5, 3], Activation::LeakyRelu(0.01)).unwrap();
        let mut store = ParamStore::new();
        store.init_mlp("net", &spec, &mut r).unwrap();
        let input = random_matrix(4, 4, &mut r);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let point = store.get(&name).unwrap().clone();
            let err = finite_diff_check(
                |candidate| {
                    let mut probe = store.clone();
                    *probe.get_mut(&name)? = candidate.clone();
                    let tape = Tape::new();
                    let bound = bind_params(&tape, &probe);
                    let x = tape.leaf(input.clone());
                    let y = mlp_forward_tape(&tape, &bound, &spec, "net", x)?;
                    let lse = tape.logsumexp_rows(y);
                    let loss = tape.sum_all(lse);
                    let value = tape.scalar(loss)?;
                    let grads = tape.backward(loss)?;
                    Ok((value, grads.wrt(bound.var(&name)?).clone()))
                },
                &point,
                H,
            )
            .unwrap();
            assert!(err < TOL, "mlp gradient error {err} for {name}");
            worst_overall = worst_overall.max(err);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient suite took {elapsed:?}, budget 30 s"
    );
    println!(
        "[PASS] criterion 2: gradient suite, worst relative error {worst_overall:.3e} < 1e-4 in {elapsed:.2?}"
    );
}

// ---------- criterion 3 ----------

/// Naive triple-loop MMD, written directly from the double-sum definition.
fn mmd_triple_loop(x: &Matrix, y: &Matrix) -> f64 {
    let kernel = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        (-0.5 * s).exp()
    };
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            total += kernel(x.row(i), x.row(j));
        }
    }
    for i in 0..y.rows() {
        for j in 0..y.rows() {
            total += kernel(y.row(i), y.row(j));
        }
    }
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            total -= 2.0 * kernel(x.row(i), y.row(j));
        }
    }
    total
}

/// O(n^2 k) greedy reference: recompute each candidate's min distance to
/// the selected set from scratch.
fn fps_quadratic(features: &Matrix, k: usize, start: StartRule) -> Vec<usize> {
    let n = features.rows();
    let sq = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        s
    };
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
    let mut selected = vec![first];
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            let min_d = selected
                .iter()
                .map(|&s| sq(features.row(i), features.row(s)))
                .fold(f64::INFINITY, f64::min);
            if min_d > best_d {
                best_d = min_d;
                best = i;
            }
        }
        selected.push(best);
    }
    selected
}

#[test]
fn criterion_3_oracle_suite() {
    let start = Instant::now();
    let mut r = stream(30_303, "acceptance-oracle");

    let mut worst_mmd = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(1..=10);
        let m = r.random_range(1..=10);
        let d = r.random_range(1..=5);
        let x = random_matrix(n, d, &mut r);
        let y = random_matrix(m, d, &mut r);
        let (v, _) = losses::mmd_loss(&x, &y).unwrap();
        worst_mmd = worst_mmd.max((v - mmd_triple_loop(&x, &y)).abs());
    }
    assert!(worst_mmd <= 1e-10, "mmd deviation {worst_mmd}");

    for case in 0..200u64 {
        let n = r.random_range(1..=64usize);
        let d = r.random_range(1..=6);
        let k = r.random_range(1..=n);
        let feats = random_matrix(n, d, &mut r);
        let rule = if case % 2 == 0 {
            StartRule::FirstIndex
        } else {
            StartRule::MaxNorm
        };
        assert_eq!(
            fps(&feats, k, rule).unwrap(),
            fps_quadratic(&feats, k, rule),
            "fps mismatch at case {case} (n={n}, k={k})"
        );
    }

    let mut worst_proto = 0.0_f64;
    for _ in 0..50 {
        let n = r.random_range(10..=80usize);
        let d = r.random_range(2..=6);
        let feats = random_matrix(n, d, &mut r);
        let ratio = r.random_range(0.03..0.3);
        let protos =
            neighbor_aware_prototypes(&feats, ratio, StartRule::MaxNorm, Rounding::Floor).unwrap();
        let k = protos.rows();
        let anchors = fps(&feats, k, StartRule::MaxNorm).unwrap();
        let assignment = assign_to_anchors(&feats, &anchors).unwrap();
        for b in 0..k {
            let members: Vec<usize> = (0..n)
                .filter(|&i| assignment.point_anchor[i] == b)
                .collect();
            for c in 0..d {
                let mean: f64 =
                    members.iter().map(|&i| feats.get(i, c)).sum::<f64>() / members.len() as f64;
                worst_proto = worst_proto.max((protos.get(b, c) - mean).abs());
            }
        }
    }
    assert!(worst_proto <= 1e-12, "prototype deviation {worst_proto}");

    let mut worst_rel = 0.0_f64;
    for _ in 0..50 {
        let m = r.random_range(2..=8);
        let sem = random_matrix(m, 6, &mut r);
        let vis = random_matrix(m, 4, &mut r);
        let rel = losses::relation_matrices(&sem, &vis).unwrap();
        for e in 0..m {
            for j in 0..m {
                let dw: f64 = sem
                    .row(e)
                    .iter()
                    .zip(sem.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dv: f64 = vis
                    .row(e)
                    .iter()
                    .zip(vis.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                worst_rel = worst_rel.max((rel.w.get(e, j) - dw).abs());
                worst_rel = worst_rel.max((rel.v.get(e, j) - dv).abs());
            }
        }
    }
    assert!(worst_rel <= 1e-12, "relation matrix deviation {worst_rel}");

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "oracle suite took {elapsed:?}, budget 60 s"
    );
    println!(
        "[PASS] criterion 3: oracle suite (mmd {worst_mmd:.1e}, fps exact, prototypes {worst_proto:.1e}, relations {worst_rel:.1e}) in {elapsed:.2?}"
    );
}

// ---------- criterion 4 ----------

#[test]
fn criterion_4_closed_forms() {
    let mut r = stream(40_404, "acceptance-closed");
    // mmd(X, X) vanishes
    let x = random_matrix(8, 3, &mut r);
    let (same, _) = losses::mmd_loss(&x, &x).unwrap();
    assert!(same.abs() <= 1e-9, "mmd(X,X) = {same}");

    // singletons at squared distance 2
    let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let (single, _) = losses::mmd_loss(&a, &b).unwrap();
    let expect = 2.0 - 2.0 * (-1.0f64).exp();
    assert!((single - expect).abs() <= 1e-12, "singleton mmd {single}");

    // InfoNCE with K = 3 equal logits
    let synth = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let pos = vec![1.0, 0.0];
    let negs = vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![-1.0, 2.0]];
    let (nce, _) = losses::infonce_loss(&synth, &pos, &negs, 0.07).unwrap();
    assert!((nce - 4.0f64.ln()).abs() <= 1e-9, "uniform InfoNCE {nce}");

    // consistency of (W, kappa W) vanishes for kappa in {1, 3}
    let sem = random_matrix(5, 4, &mut r);
    for kappa in [1.0f64, 3.0] {
        let vis = sem.scale(kappa.sqrt());
        let rel = losses::relation_matrices(&sem, &vis).unwrap();
        // V really is kappa * W
        for e in 0..5 {
            for j in 0..5 {
                assert!((rel.v.get(e, j) - kappa * rel.w.get(e, j)).abs() < 1e-9);
            }
        }
        let (cst, _) = losses::consistency_loss(&rel).unwrap();
        assert!(cst.abs() <= 1e-9, "consistency(W, {kappa}W) = {cst}");
    }
    println!("[PASS] criterion 4: closed forms (mmd(X,X) = {same:.1e}, singleton, ln 4, scale invariance)");
}

// ---------- criteria 5 and 6: shared multi-seed protocol ----------

struct VariantStats {
    median_unseen: f64,
    median_hmiou: f64,
    seconds: f64,
}

struct Protocol {
    baseline: VariantStats,
    cl_only: VariantStats,
    mcl: VariantStats,
    full: VariantStats,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_variant(mask: bool, contrast: bool, hpa: bool, rtc: bool) -> VariantStats {
    let seeds = [1u64, 2, 3, 4, 5];
    let start = Instant::now();
    let mut unseen = Vec::new();
    let mut hm = Vec::new();
    for &seed in &seeds {
        let mut cfg = ExperimentConfig::default();
        cfg.train.seed = seed;
        cfg.train.mcl_mask = mask;
        cfg.train.mcl_contrast = contrast;
        cfg.train.hpa = hpa;
        cfg.train.rtc = rtc;
        let out = run_full_pipeline(&cfg).expect("pipeline run failed");
        unseen.push(out.report.miou_unseen);
        hm.push(out.report.hmiou);
    }
    VariantStats {
        median_unseen: median(unseen),
        median_hmiou: median(hm),
        seconds: start.elapsed().as_secs_f64(),
    }
}

static PROTOCOL: OnceLock<Protocol> = OnceLock::new();

fn protocol() -> &'static Protocol {
    PROTOCOL.get_or_init(|| Protocol {
        baseline: run_variant(false, false, false, false),
        cl_only: run_variant(false, true, false, false),
        mcl: run_variant(true, true, false, false),
        full: run_variant(true, true, true, true),
    })
}

#[test]
fn criterion_5_end_to_end_toy_transfer() {
    let p = protocol();
    let chance = 1.0 / 12.0;
    assert!(
        p.full.median_unseen > chance,
        "full median unseen mIoU {} <= chance {chance}",
        p.full.median_unseen
    );
    assert!(
        p.full.median_unseen > p.baseline.median_unseen,
        "full unseen {} <= baseline unseen {}",
        p.full.median_unseen,
        p.baseline.median_unseen
    );
    assert!(
        p.full.median_hmiou > p.baseline.median_hmiou,
        "full HmIoU {} <= baseline HmIoU {}",
        p.full.median_hmiou,
        p.baseline.median_hmiou
    );
    let budget = p.full.seconds + p.baseline.seconds;
    assert!(
        budget < 300.0,
        "full+baseline protocol took {budget:.1} s, budget 300 s"
    );
    println!(
        "[PASS] criterion 5: toy transfer, median unseen mIoU full {:.4} > chance {:.4} and > baseline {:.4}; median HmIoU full {:.4} > baseline {:.4} ({:.0} s)",
        p.full.median_unseen, chance, p.baseline.median_unseen, p.full.median_hmiou, p.baseline.median_hmiou, budget
    );
}

#[test]
fn criterion_6_ablation_monotonic_sanity() {
    let p = protocol();
    assert!(
        p.mcl.median_hmiou >= p.baseline.median_hmiou,
        "adding MCL decreased median HmIoU: {} < {}",
        p.mcl.median_hmiou,
        p.baseline.median_hmiou
    );
    assert!(
        p.cl_only.median_hmiou > p.baseline.median_hmiou,
        "contrastive learning alone did not improve median HmIoU: {} <= {}",
        p.cl_only.median_hmiou,
        p.baseline.median_hmiou
    );
    println!(
        "[PASS] criterion 6: ablation direction, median HmIoU baseline {:.4} -> CL {:.4} -> MCL {:.4}",
        p.baseline.median_hmiou, p.cl_only.median_hmiou, p.mcl.median_hmiou
    );
}

// ---------- criterion 7 ----------

#[test]
fn criterion_7_masking_statistics() {
    let t = replicate_per_point(&vec![1.0; 100], 100).unwrap();
    let mut rng = stream(70_707, "acceptance-mask");
    let masked = mask_semantics(&t, 0.2, &mut rng, MaskMode::Elementwise).unwrap();
    let zeros = masked.data().iter().filter(|&&v| v == 0.0).count() as f64;
    let n = 10_000.0;
    let sigma = (n * 0.2 * 0.8f64).sqrt();
    assert!(
        (zeros - 0.2 * n).abs() <= 3.0 * sigma,
        "zero fraction {} outside 3 sigma of 0.2",
        zeros / n
    );
    let same = mask_semantics(&t, 0.0, &mut rng, MaskMode::Elementwise).unwrap();
    assert_eq!(same, t, "q = 0 must be exact identity");
    let all = mask_semantics(&t, 1.0, &mut rng, MaskMode::Elementwise).unwrap();
    assert!(
        all.data().iter().all(|&v| v == 0.0),
        "q = 1 must zero everything"
    );
    println!(
        "[PASS] criterion 7: masking statistics, zero fraction {:.4} within 3 sigma of 0.2; q = 0 and q = 1 exact",
        zeros / n
    );
}

// ---------- criterion 9 (criterion 8 lives in tests/cli.rs) ----------

#[test]
fn criterion_9_inductive_purity() {
    let mut cfg = ExperimentConfig::default();
    // smaller instance; purity is structural, not statistical
    cfg.points_per_class = 15;
    cfg.train_scenes = 6;
    cfg.test_scenes = 2;
    cfg.train.backbone_epochs = 2;
    cfg.train.generator_epochs = 2;
    cfg.train.final_iters = 10;
    cfg.train.seed = 909;
    let outcome = run_full_pipeline(&cfg).unwrap();
    let touched = &outcome.trace.touched_labels;
    assert!(!touched.is_empty(), "trace recorded no labels");
    let overlap: Vec<i64> = outcome
        .bundle
        .unseen_ids
        .iter()
        .map(|&c| c as i64)
        .filter(|c| touched.contains(c))
        .collect();
    assert!(
        overlap.is_empty(),
        "stages a/b touched unseen labels {overlap:?}"
    );
    println!(
        "[PASS] criterion 9: inductive purity, {} labels touched during stages a/b, none unseen",
        touched.len()
    );
}

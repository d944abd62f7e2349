//! Experiment driver: stage orchestration over the on-disk layout, the
//! ablation matrix, hyper-parameter sweeps, and the gradient/oracle check
//! suites behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::{EmbeddingSource, ExperimentConfig};
use crate::datagen::{make_splits, make_toy_world, PointScene};
use crate::embeddings::{concat_embeddings, load_word_vectors, synth_embeddings, SemanticTable};
use crate::error::{Error, Result};
use crate::geometry::{assign_to_anchors, fps, neighbor_aware_prototypes, StartRule};
use crate::losses;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::numerics::gradcheck::finite_diff_check;
use crate::numerics::matrix::{sq_dist, Matrix};
use crate::numerics::mlp::{bind_params, mlp_forward_tape, Activation, MlpSpec, ParamStore};
use crate::numerics::tape::Tape;
use crate::pipeline::{
    calibrate, mean_seen_class_count, predict, synth_unseen_set, train_backbone,
    train_final_classifier, train_generator, CalibrationResult, ModelBundle, SynthStreams,
    TrainTrace,
};
use crate::rng;

/// Everything a finished run leaves behind in memory.
pub struct RunOutcome {
    pub report: MetricsReport,
    pub trace: TrainTrace,
    pub calibration: Option<CalibrationResult>,
    pub bundle: ModelBundle,
    pub table: SemanticTable,
}

/// Semantic table per the config: synthetic embeddings with the last
/// `classes_unseen` ids unseen, or word-vector files with the named
/// classes unseen.
pub fn build_table(cfg: &ExperimentConfig) -> Result<SemanticTable> {
    match cfg.embedding_source {
        EmbeddingSource::Synthetic => {
            let total = cfg.classes_seen + cfg.classes_unseen;
            let mut table = synth_embeddings(total, cfg.d_sem, cfg.train.seed, cfg.min_angle_deg)?;
            let flags: Vec<bool> = (0..total).map(|c| c < cfg.classes_seen).collect();
            table.set_seen_flags(flags)?;
            Ok(table)
        }
        EmbeddingSource::Files => {
            let mut table = match (cfg.glove_path.is_empty(), cfg.word2vec_path.is_empty()) {
                (false, true) => load_word_vectors(Path::new(&cfg.glove_path), &cfg.class_names)?,
                (true, false) => {
                    load_word_vectors(Path::new(&cfg.word2vec_path), &cfg.class_names)?
                }
                (false, false) => {
                    let a = load_word_vectors(Path::new(&cfg.glove_path), &cfg.class_names)?;
                    let b = load_word_vectors(Path::new(&cfg.word2vec_path), &cfg.class_names)?;
                    concat_embeddings(&a, &b)?
                }
                (true, true) => return Err(Error::config("embedding_source=files needs a path")),
            };
            let mut flags = vec![true; table.class_count()];
            for name in &cfg.unseen_class_names {
                let idx = table.index_of(name).map_err(|_| {
                    Error::config(format!("unseen class `{name}` not in class_names"))
                })?;
                flags[idx] = false;
            }
            table.set_seen_flags(flags)?;
            Ok(table)
        }
    }
}

/// Full in-memory pipeline on a prebuilt dataset.
pub fn run_pipeline_on(
    table: &SemanticTable,
    train_scenes: &[PointScene],
    test_scenes: &[PointScene],
    cfg: &ExperimentConfig,
) -> Result<RunOutcome> {
    let d_in = train_scenes
        .first()
        .ok_or_else(|| Error::Argument("no training scenes".into()))?
        .points
        .cols();
    let mut bundle = ModelBundle::init(table, d_in, &cfg.train)?;
    let mut trace = TrainTrace::default();
    train_backbone(&mut bundle, train_scenes, &cfg.train, &mut trace)?;
    train_generator(&mut bundle, train_scenes, table, &cfg.train, &mut trace)?;

    let calibration = if cfg.calibrate {
        Some(calibrate(
            &bundle,
            train_scenes,
            table,
            &cfg.train,
            &cfg.gamma_grid,
            &cfg.weight_grid,
        )?)
    } else {
        None
    };
    let (gamma, unseen_weight) = match &calibration {
        Some(c) => (c.gamma, c.unseen_weight),
        None => (cfg.train.gamma, cfg.train.unseen_weight),
    };

    let per_class = if cfg.train.synth_per_class > 0 {
        cfg.train.synth_per_class
    } else {
        mean_seen_class_count(train_scenes, &bundle)
    };
    let mut streams = SynthStreams::new(cfg.train.seed ^ 0xf17a1);
    let (sf, sl) = synth_unseen_set(&bundle, table, per_class, &cfg.train, &mut streams)?;
    let mut weights = vec![1.0; table.class_count()];
    for &cu in &bundle.unseen_ids.clone() {
        weights[cu] = unseen_weight;
    }
    train_final_classifier(&mut bundle, train_scenes, &sf, &sl, &weights, &cfg.train)?;
    bundle.gamma = gamma;

    let report = evaluate(&bundle, test_scenes, table)?;
    Ok(RunOutcome {
        report,
        trace,
        calibration,
        bundle,
        table: table.clone(),
    })
}

/// Build world and splits from the config, then run the pipeline.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let table = build_table(cfg)?;
    let world = make_toy_world(&table, cfg.d_in, cfg.rho, cfg.world_noise, cfg.train.seed)?;
    let (train, test) = make_splits(
        &world,
        cfg.train_scenes,
        cfg.test_scenes,
        cfg.points_per_class,
        cfg.train.seed,
    )?;
    run_pipeline_on(&table, &train, &test, cfg)
}

/// Confusion-matrix evaluation of a trained bundle over scenes.
pub fn evaluate(
    bundle: &ModelBundle,
    scenes: &[PointScene],
    table: &SemanticTable,
) -> Result<MetricsReport> {
    let mut conf = ConfusionMatrix::new(table.seen_flags().to_vec());
    for scene in scenes {
        let preds = predict(bundle, scene, bundle.gamma)?;
        conf.update(&preds, &scene.labels)?;
    }
    MetricsReport::from_confusion(&conf, table.names())
}

// ---------- on-disk layout ----------

fn table_path(out: &Path) -> PathBuf {
    out.join("table.ckpt")
}

fn scene_dir(out: &Path, split: &str) -> PathBuf {
    out.join(split)
}

fn backbone_path(out: &Path) -> PathBuf {
    out.join("backbone.ckpt")
}

fn generator_path(out: &Path) -> PathBuf {
    out.join("generator.ckpt")
}

fn final_path(out: &Path) -> PathBuf {
    out.join("final.ckpt")
}

fn write_scenes(dir: &Path, scenes: &[PointScene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, scene) in scenes.iter().enumerate() {
        scene.save(&dir.join(format!("scene_{i:03}.txt")))?;
    }
    Ok(())
}

fn read_scenes(dir: &Path, missing_stage: &str) -> Result<Vec<PointScene>> {
    if !dir.is_dir() {
        return Err(Error::StageOrder(format!(
            "{missing_stage} has not run: missing {}",
            dir.display()
        )));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "txt").unwrap_or(false))
        .collect();
    names.sort();
    let mut scenes = Vec::with_capacity(names.len());
    for p in names {
        scenes.push(PointScene::load(&p)?);
    }
    if scenes.is_empty() {
        return Err(Error::StageOrder(format!(
            "{missing_stage} has not run: {} holds no scenes",
            dir.display()
        )));
    }
    Ok(scenes)
}

fn load_table_checked(out: &Path) -> Result<SemanticTable> {
    let p = table_path(out);
    if !p.is_file() {
        return Err(Error::StageOrder(format!(
            "gen-data has not run: missing {}",
            p.display()
        )));
    }
    SemanticTable::load(&p)
}

fn load_bundle_through(
    out: &Path,
    cfg: &ExperimentConfig,
    table: &SemanticTable,
    d_in: usize,
    need_backbone: bool,
    need_generator: bool,
    need_final: bool,
) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::init(table, d_in, &cfg.train)?;
    if need_backbone {
        let p = backbone_path(out);
        if !p.is_file() {
            return Err(Error::StageOrder(format!(
                "train-backbone has not run: missing {}",
                p.display()
            )));
        }
        bundle.load_backbone(&p)?;
    }
    if need_generator {
        let p = generator_path(out);
        if !p.is_file() {
            return Err(Error::StageOrder(format!(
                "train-generator has not run: missing {}",
                p.display()
            )));
        }
        bundle.load_generator(&p)?;
    }
    if need_final {
        let p = final_path(out);
        if !p.is_file() {
            return Err(Error::StageOrder(format!(
                "train-classifier has not run: missing {}",
                p.display()
            )));
        }
        bundle.load_final(&p)?;
    }
    Ok(bundle)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table = build_table(cfg)?;
    let world = make_toy_world(&table, cfg.d_in, cfg.rho, cfg.world_noise, cfg.train.seed)?;
    let (train, test) = make_splits(
        &world,
        cfg.train_scenes,
        cfg.test_scenes,
        cfg.points_per_class,
        cfg.train.seed,
    )?;
    table.save(&table_path(out))?;
    write_scenes(&scene_dir(out, "train"), &train)?;
    write_scenes(&scene_dir(out, "test"), &test)?;
    println!(
        "gen-data: {} classes ({} seen), {} train scenes, {} test scenes -> {}",
        table.class_count(),
        table.seen_ids().len(),
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train_backbone(cfg: &ExperimentConfig) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    let table = load_table_checked(out)?;
    let train = read_scenes(&scene_dir(out, "train"), "gen-data")?;
    let d_in = train[0].points.cols();
    let mut bundle = ModelBundle::init(&table, d_in, &cfg.train)?;
    let mut trace = TrainTrace::default();
    train_backbone(&mut bundle, &train, &cfg.train, &mut trace)?;
    bundle.save_backbone(&backbone_path(out))?;
    println!("train-backbone: saved {}", backbone_path(out).display());
    Ok(())
}

pub fn cmd_train_generator(cfg: &ExperimentConfig) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    let table = load_table_checked(out)?;
    let train = read_scenes(&scene_dir(out, "train"), "gen-data")?;
    let d_in = train[0].points.cols();
    let mut bundle = load_bundle_through(out, cfg, &table, d_in, true, false, false)?;
    let mut trace = TrainTrace::default();
    train_generator(&mut bundle, &train, &table, &cfg.train, &mut trace)?;
    bundle.save_generator(&generator_path(out))?;
    println!("train-generator: saved {}", generator_path(out).display());
    Ok(())
}

pub fn cmd_train_classifier(cfg: &ExperimentConfig) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    let table = load_table_checked(out)?;
    let train = read_scenes(&scene_dir(out, "train"), "gen-data")?;
    let d_in = train[0].points.cols();
    let mut bundle = load_bundle_through(out, cfg, &table, d_in, true, true, false)?;
    let (gamma, unseen_weight) = if cfg.calibrate {
        let c = calibrate(
            &bundle,
            &train,
            &table,
            &cfg.train,
            &cfg.gamma_grid,
            &cfg.weight_grid,
        )?;
        println!(
            "calibrate: gamma = {}, unseen weight = {} (pseudo HmIoU {:.4})",
            c.gamma, c.unseen_weight, c.best_hmiou
        );
        (c.gamma, c.unseen_weight)
    } else {
        (cfg.train.gamma, cfg.train.unseen_weight)
    };
    let per_class = if cfg.train.synth_per_class > 0 {
        cfg.train.synth_per_class
    } else {
        mean_seen_class_count(&train, &bundle)
    };
    let mut streams = SynthStreams::new(cfg.train.seed ^ 0xf17a1);
    let (sf, sl) = synth_unseen_set(&bundle, &table, per_class, &cfg.train, &mut streams)?;
    let mut weights = vec![1.0; table.class_count()];
    for &cu in &bundle.unseen_ids.clone() {
        weights[cu] = unseen_weight;
    }
    train_final_classifier(&mut bundle, &train, &sf, &sl, &weights, &cfg.train)?;
    bundle.gamma = gamma;
    bundle.save_final(&final_path(out))?;
    println!("train-classifier: saved {}", final_path(out).display());
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let out = Path::new(&cfg.out_dir);
    let table = load_table_checked(out)?;
    let test = read_scenes(&scene_dir(out, "test"), "gen-data")?;
    let d_in = test[0].points.cols();
    let bundle = load_bundle_through(out, cfg, &table, d_in, true, true, true)?;
    let report = evaluate(&bundle, &test, &table)?;
    emit_results(&report, &out.join("metrics.csv"))?;
    println!(
        "eval: mIoU seen {:.4}, unseen {:.4}, all {:.4}, HmIoU {:.4} -> {}",
        report.miou_seen,
        report.miou_unseen,
        report.miou_all,
        report.hmiou,
        out.join("metrics.csv").display()
    );
    Ok(report)
}

/// Write a metrics report as CSV.
pub fn emit_results(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// The flag matrix: every combination from the module ablation plus the
/// contrastive-only row.
pub fn ablation_rows() -> Vec<(bool, bool, bool, bool)> {
    vec![
        (false, false, false, false),
        (false, false, true, false),
        (false, false, false, true),
        (false, false, true, true),
        (true, true, false, false),
        (true, true, true, false),
        (true, true, false, true),
        (true, true, true, true),
        (false, true, false, false),
    ]
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Run the 9-row ablation matrix; one CSV row per configuration, plus the
/// per-row checkpoints under `<out>/ablate/row_<i>/`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("mcl_mask,mcl_contrast,hpa,rtc,miou_s,miou_u,miou_all,hmiou\n");
    for (i, (mask, contrast, hpa, rtc)) in ablation_rows().into_iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.train.mcl_mask = mask;
        row_cfg.train.mcl_contrast = contrast;
        row_cfg.train.hpa = hpa;
        row_cfg.train.rtc = rtc;
        let outcome = run_full_pipeline(&row_cfg)?;
        let row_dir = out.join("ablate").join(format!("row_{i}"));
        fs::create_dir_all(&row_dir).map_err(|e| Error::io(&row_dir, e))?;
        outcome
            .bundle
            .save_backbone(&row_dir.join("backbone.ckpt"))?;
        outcome
            .bundle
            .save_generator(&row_dir.join("generator.ckpt"))?;
        outcome.bundle.save_final(&row_dir.join("final.ckpt"))?;
        let r = &outcome.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            mask as u8,
            contrast as u8,
            hpa as u8,
            rtc as u8,
            fmt6(r.miou_seen),
            fmt6(r.miou_unseen),
            fmt6(r.miou_all),
            fmt6(r.hmiou)
        ));
        println!(
            "ablate row {i}: mask={} contrast={} hpa={} rtc={} -> HmIoU {:.4}",
            mask as u8, contrast as u8, hpa as u8, rtc as u8, r.hmiou
        );
    }
    let path = out.join("ablate.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Sweep q over its grid (r fixed), then r over its grid (q fixed).
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("param,value,miou_s,miou_u,miou_all,hmiou\n");
    for &q in &cfg.q_grid {
        let mut row_cfg = cfg.clone();
        row_cfg.train.q = q;
        let outcome = run_full_pipeline(&row_cfg)?;
        let r = &outcome.report;
        csv.push_str(&format!(
            "q,{q},{},{},{},{}\n",
            fmt6(r.miou_seen),
            fmt6(r.miou_unseen),
            fmt6(r.miou_all),
            fmt6(r.hmiou)
        ));
        println!("sweep q={q}: HmIoU {:.4}", r.hmiou);
    }
    for &rv in &cfg.r_grid {
        let mut row_cfg = cfg.clone();
        row_cfg.train.r = rv;
        let outcome = run_full_pipeline(&row_cfg)?;
        let r = &outcome.report;
        csv.push_str(&format!(
            "r,{rv},{},{},{},{}\n",
            fmt6(r.miou_seen),
            fmt6(r.miou_unseen),
            fmt6(r.miou_all),
            fmt6(r.hmiou)
        ));
        println!("sweep r={rv}: HmIoU {:.4}", r.hmiou);
    }
    let path = out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------- check suites ----------

/// One named pass/fail outcome.
pub struct CheckOutcome {
    pub name: String,
    pub detail: String,
    pub pass: bool,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut crate::rng::Stream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    m
}

/// Finite-difference checks for every loss and the MLP stack, ten random
/// points each, threshold 1e-4 at h = 1e-5.
pub fn grad_check_suite(seed: u64) -> Vec<CheckOutcome> {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let mut out = Vec::new();
    let mut push = |name: &str, max_err: f64| {
        out.push(CheckOutcome {
            name: name.to_string(),
            detail: format!("max relative error {max_err:.3e} (tolerance {TOL:.0e})"),
            pass: max_err < TOL,
        });
    };

    let mut r = rng::stream(seed, "gradcheck");
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let real = random_matrix(6, 3, &mut r);
        let point = random_matrix(5, 3, &mut r);
        let err = finite_diff_check(|s| losses::mmd_loss(&real, s), &point, H).unwrap();
        worst = worst.max(err);
    }
    push("mmd_loss", worst);

    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let pos: Vec<f64> = random_matrix(1, 4, &mut r).row(0).to_vec();
        let negs: Vec<Vec<f64>> = (0..3)
            .map(|_| random_matrix(1, 4, &mut r).row(0).to_vec())
            .collect();
        let point = random_matrix(5, 4, &mut r);
        let err =
            finite_diff_check(|s| losses::infonce_loss(s, &pos, &negs, 0.3), &point, H).unwrap();
        worst = worst.max(err);
    }
    push("infonce_loss", worst);

    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let sigma = random_matrix(1, 4, &mut r);
        let point = random_matrix(5, 4, &mut r);
        let err = finite_diff_check(
            |p| losses::align_loss(p, &sigma).map(|(v, g, _)| (v, g)),
            &point,
            H,
        )
        .unwrap();
        let protos = random_matrix(5, 4, &mut r);
        let point_s = random_matrix(1, 4, &mut r);
        let err_s = finite_diff_check(
            |s| losses::align_loss(&protos, s).map(|(v, _, g)| (v, g)),
            &point_s,
            H,
        )
        .unwrap();
        worst = worst.max(err).max(err_s);
    }
    push("align_loss", worst);

    let mut worst = 0.0_f64;
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
        worst = worst.max(err);
    }
    push("consistency_loss", worst);

    let mut worst = 0.0_f64;
    for case in 0..10usize {
        let classes = 3 + case % 3;
        let rows = 5;
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let weights: Vec<f64> = (0..classes).map(|_| r.random_range(0.25..2.0)).collect();
        let point = random_matrix(rows, classes, &mut r);
        let err =
            finite_diff_check(|l| losses::cross_entropy(l, &labels, &weights), &point, H).unwrap();
        worst = worst.max(err);
    }
    push("weighted_cross_entropy", worst);

    // MLP stack: gradient with respect to every parameter of a two-hidden
    // layer net under a nonlinear scalarizer
    let mut worst = 0.0_f64;
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
            worst = worst.max(err);
        }
    }
    push("mlp_stack", worst);

    out
}

/// Reference greedy FPS recomputing min distances from scratch: O(n^2 k).
pub fn fps_reference(features: &Matrix, k: usize, start: StartRule) -> Vec<usize> {
    let n = features.rows();
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
                .map(|&s| sq_dist(features.row(i), features.row(s)))
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

/// Naive triple-loop MMD evaluation.
pub fn mmd_reference(x: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            total += (-0.5 * can_sq(x.row(i), x.row(j))).exp();
        }
    }
    for i in 0..y.rows() {
        for j in 0..y.rows() {
            total += (-0.5 * can_sq(y.row(i), y.row(j))).exp();
        }
    }
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            total -= 2.0 * (-0.5 * can_sq(x.row(i), y.row(j))).exp();
        }
    }
    total
}

fn can_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Implementation-versus-oracle equivalence: MMD against the triple loop,
/// FPS against the quadratic reference, neighbor-aware prototypes against
/// recomputed region means, relation matrices against direct recomputation.
pub fn oracle_check_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut r = rng::stream(seed, "oraclecheck");

    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(1..=10);
        let m = r.random_range(1..=10);
        let d = r.random_range(1..=5);
        let x = random_matrix(n, d, &mut r);
        let y = random_matrix(m, d, &mut r);
        let (v, _) = losses::mmd_loss(&x, &y).unwrap();
        worst = worst.max((v - mmd_reference(&x, &y)).abs());
    }
    out.push(CheckOutcome {
        name: "mmd_vs_triple_loop".into(),
        detail: format!("max abs deviation {worst:.3e} over 100 instances (tolerance 1e-10)"),
        pass: worst <= 1e-10,
    });

    let mut mismatches = 0usize;
    for case in 0..200 {
        let n = r.random_range(1..=64usize);
        let d = r.random_range(1..=6);
        let k = r.random_range(1..=n);
        let feats = random_matrix(n, d, &mut r);
        let rule = if case % 2 == 0 {
            StartRule::FirstIndex
        } else {
            StartRule::MaxNorm
        };
        if fps(&feats, k, rule).unwrap() != fps_reference(&feats, k, rule) {
            mismatches += 1;
        }
    }
    out.push(CheckOutcome {
        name: "fps_vs_quadratic_reference".into(),
        detail: format!("{mismatches} mismatches over 200 instances"),
        pass: mismatches == 0,
    });

    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = r.random_range(10..=80usize);
        let d = r.random_range(2..=6);
        let feats = random_matrix(n, d, &mut r);
        let ratio = r.random_range(0.03..0.3);
        let protos = neighbor_aware_prototypes(
            &feats,
            ratio,
            StartRule::MaxNorm,
            crate::geometry::Rounding::Floor,
        )
        .unwrap();
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
                worst = worst.max((protos.get(b, c) - mean).abs());
            }
        }
    }
    out.push(CheckOutcome {
        name: "prototypes_vs_region_means".into(),
        detail: format!("max abs deviation {worst:.3e} over 50 instances (tolerance 1e-12)"),
        pass: worst <= 1e-12,
    });

    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let m = r.random_range(2..=8);
        let sem = random_matrix(m, 6, &mut r);
        let vis = random_matrix(m, 4, &mut r);
        let rel = losses::relation_matrices(&sem, &vis).unwrap();
        for e in 0..m {
            for j in 0..m {
                let expect_w = can_sq(sem.row(e), sem.row(j));
                let expect_v = can_sq(vis.row(e), vis.row(j));
                worst = worst.max((rel.w.get(e, j) - expect_w).abs());
                worst = worst.max((rel.v.get(e, j) - expect_v).abs());
            }
        }
    }
    out.push(CheckOutcome {
        name: "relation_matrices_vs_pairwise".into(),
        detail: format!("max abs deviation {worst:.3e} over 50 instances (tolerance 1e-12)"),
        pass: worst <= 1e-12,
    });

    out
}

/// Print one line per check; error if any failed.
pub fn report_checks(label: &str, checks: &[CheckOutcome]) -> Result<()> {
    let mut failed = 0;
    for c in checks {
        println!(
            "[{}] {label}: {} - {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} {label} check(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(seed: u64) -> ExperimentConfig {
        let train = crate::pipeline::TrainConfig {
            backbone_epochs: 3,
            generator_epochs: 2,
            final_iters: 15,
            feature_dim: 8,
            noise_dim: 8,
            backbone_hidden: vec![12],
            generator_hidden: vec![12, 12],
            seed,
            ..Default::default()
        };
        ExperimentConfig {
            train,
            classes_seen: 4,
            classes_unseen: 2,
            d_sem: 8,
            d_in: 6,
            points_per_class: 10,
            train_scenes: 4,
            test_scenes: 2,
            gamma_grid: vec![0.0, 1.0],
            weight_grid: vec![1.0],
            ..Default::default()
        }
    }

    #[test]
    fn full_pipeline_runs_and_evaluates() {
        let cfg = quick_cfg(5);
        let outcome = run_full_pipeline(&cfg).unwrap();
        assert!(outcome.report.hmiou >= 0.0);
        assert!(outcome.bundle.stage.final_trained);
        // inductive purity triple-checked by the trace
        for &cu in &outcome.bundle.unseen_ids {
            assert!(!outcome.trace.touched_labels.contains(&(cu as i64)));
        }
    }

    #[test]
    fn stage_commands_enforce_order_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(6);
        cfg.out_dir = dir.path().to_str().unwrap().to_string();
        // eval without anything
        let err = cmd_eval(&cfg).unwrap_err();
        assert!(matches!(err, Error::StageOrder(_)), "{err}");
        // generator before backbone
        cmd_gen_data(&cfg).unwrap();
        let err = cmd_train_generator(&cfg).unwrap_err();
        assert!(
            matches!(err, Error::StageOrder(ref m) if m.contains("train-backbone")),
            "{err}"
        );
        // full chain works
        cmd_train_backbone(&cfg).unwrap();
        cmd_train_generator(&cfg).unwrap();
        cmd_train_classifier(&cfg).unwrap();
        let report = cmd_eval(&cfg).unwrap();
        assert!(dir.path().join("metrics.csv").is_file());
        assert!(report.hmiou >= 0.0);
    }

    #[test]
    fn ablation_matrix_has_nine_rows() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 9);
        // the CL-only row is present
        assert!(rows.contains(&(false, true, false, false)));
        // full row present
        assert!(rows.contains(&(true, true, true, true)));
    }

    #[test]
    fn grad_and_oracle_suites_pass() {
        let checks = grad_check_suite(11);
        assert!(checks.iter().all(|c| c.pass), "gradient checks failed");
        assert_eq!(checks.len(), 6);
        let checks = oracle_check_suite(12);
        assert!(checks.iter().all(|c| c.pass), "oracle checks failed");
        assert_eq!(checks.len(), 4);
    }
}

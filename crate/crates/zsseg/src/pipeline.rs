//! Three-stage training and inference.
//!
//! Stage a trains the per-point backbone and a seen-class head on seen
//! scenes only; the backbone is frozen afterwards. Stage b trains the
//! generator and the semantic projection against the frozen backbone's
//! features, combining distribution matching with the masked-contrastive,
//! prototype-alignment and relational-consistency terms. Stage c trains
//! the final classifier on real seen features plus synthetic unseen
//! features, and prediction applies calibrated stacking.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::datagen::PointScene;
use crate::embeddings::{mask_semantics, replicate_per_point, MaskMode, SemanticTable};
use crate::error::{Error, Result};
use crate::geometry::{
    assign_to_anchors, fps, kmeans_prototypes, neighbor_aware_prototypes, simple_average_prototype,
    Rounding, StartRule,
};
use crate::losses::{
    align_tape, consistency_tape, infonce_tape, mmd_tape, ConsistencyMode, LossParts,
    MmdNormalization,
};
use crate::metrics::IGNORE_LABEL;
use crate::numerics::adam::{adam_step, poly_lr, AdamState};
use crate::numerics::matrix::Matrix;
use crate::numerics::mlp::{
    bind_params, mlp_forward, mlp_forward_tape, Activation, MlpSpec, ParamStore,
};
use crate::numerics::tape::{Tape, Var};
use crate::rng::{self, Stream};

/// Prototype construction strategies compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeStrategy {
    SimpleAverage,
    KMeans,
    NeighborAware,
}

/// Hyper-parameters and ablation switches for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Mask probability for the semantic inputs during generator training.
    pub q: f64,
    /// Ratio of visual prototypes to points.
    pub r: f64,
    /// Weight of the relational consistency term.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub lr_backbone: f64,
    pub lr_generator: f64,
    pub lr_final: f64,
    pub backbone_epochs: usize,
    pub generator_epochs: usize,
    /// Full-batch iterations for the final classifier.
    pub final_iters: usize,
    pub poly_power: f64,
    /// Synthetic unseen features per class; 0 means the mean per-class
    /// seen point count of the training set.
    pub synth_per_class: usize,
    /// Calibrated-stacking offset subtracted from seen logits.
    pub gamma: f64,
    /// Training weight for unseen classes in the final classifier.
    pub unseen_weight: f64,
    pub mcl_mask: bool,
    pub mcl_contrast: bool,
    pub hpa: bool,
    pub rtc: bool,
    pub hpa_strategy: PrototypeStrategy,
    pub rtc_strategy: PrototypeStrategy,
    pub mask_mode: MaskMode,
    pub rounding: Rounding,
    pub consistency_mode: ConsistencyMode,
    pub mmd_normalization: MmdNormalization,
    pub fps_start: StartRule,
    /// Noise width appended to the semantic vector; 0 disables noise.
    pub noise_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub leaky_slope: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            q: 0.2,
            r: 0.04,
            alpha: 0.4,
            tau: 0.07,
            lr_backbone: 7e-3,
            lr_generator: 2e-4,
            lr_final: 7e-2,
            backbone_epochs: 8,
            generator_epochs: 12,
            final_iters: 60,
            poly_power: 0.9,
            synth_per_class: 0,
            gamma: 0.0,
            unseen_weight: 1.0,
            mcl_mask: true,
            mcl_contrast: true,
            hpa: true,
            rtc: true,
            hpa_strategy: PrototypeStrategy::NeighborAware,
            rtc_strategy: PrototypeStrategy::SimpleAverage,
            mask_mode: MaskMode::Elementwise,
            rounding: Rounding::Floor,
            consistency_mode: ConsistencyMode::RowWise,
            mmd_normalization: MmdNormalization::Unnormalized,
            fps_start: StartRule::MaxNorm,
            noise_dim: 16,
            backbone_hidden: vec![32],
            generator_hidden: vec![32, 32],
            feature_dim: 16,
            leaky_slope: 0.01,
            kmeans_iters: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::config(format!("q = {} outside [0,1]", self.q)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::config(format!("r = {} outside (0,1)", self.r)));
        }
        if self.alpha < 0.0 {
            return Err(Error::config(format!("alpha = {} negative", self.alpha)));
        }
        if self.tau <= 0.0 {
            return Err(Error::config(format!("tau = {} must be > 0", self.tau)));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.unseen_weight < 0.0 {
            return Err(Error::config("unseen_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Which stages have completed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageFlags {
    pub backbone_trained: bool,
    pub generator_trained: bool,
    pub final_trained: bool,
}

/// All trainable parts plus the class partition they were built for.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub backbone: ParamStore,
    pub backbone_spec: MlpSpec,
    pub f_seen: ParamStore,
    pub f_seen_spec: MlpSpec,
    pub generator: ParamStore,
    pub generator_spec: MlpSpec,
    pub sigma: ParamStore,
    pub sigma_spec: MlpSpec,
    pub f_final: ParamStore,
    pub f_final_spec: MlpSpec,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    pub stage: StageFlags,
    /// Calibration results stored alongside the final classifier.
    pub gamma: f64,
    pub class_weights: Vec<f64>,
}

/// Labels observed by the training stages, for inductive-purity audits.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub touched_labels: BTreeSet<i64>,
    pub skipped_scenes: usize,
}

impl ModelBundle {
    /// Fresh bundle with seeded initialization; widths come from the config,
    /// input/semantic dimensions from the data.
    pub fn init(table: &SemanticTable, d_in: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        table.check_gzsl()?;
        let seen_ids = table.seen_ids();
        let unseen_ids = table.unseen_ids();
        let act = Activation::LeakyRelu(cfg.leaky_slope);

        let mut widths = vec![d_in];
        widths.extend(&cfg.backbone_hidden);
        widths.push(cfg.feature_dim);
        let backbone_spec = MlpSpec::new(widths, act)?;

        let f_seen_spec = MlpSpec::new(vec![cfg.feature_dim, seen_ids.len()], act)?;

        let mut gwidths = vec![table.dim() + cfg.noise_dim];
        gwidths.extend(&cfg.generator_hidden);
        gwidths.push(cfg.feature_dim);
        let generator_spec = MlpSpec::new(gwidths, act)?;

        let sigma_spec = MlpSpec::new(vec![table.dim(), cfg.feature_dim], act)?;
        let f_final_spec = MlpSpec::new(vec![cfg.feature_dim, table.class_count()], act)?;

        let mut rng = rng::stream(cfg.seed, "init");
        let mut backbone = ParamStore::new();
        backbone.init_mlp("theta", &backbone_spec, &mut rng)?;
        let mut f_seen = ParamStore::new();
        f_seen.init_mlp("fseen", &f_seen_spec, &mut rng)?;
        let mut generator = ParamStore::new();
        generator.init_mlp("gen", &generator_spec, &mut rng)?;
        let mut sigma = ParamStore::new();
        sigma.init_mlp("sigma", &sigma_spec, &mut rng)?;
        let mut f_final = ParamStore::new();
        f_final.init_mlp("ffinal", &f_final_spec, &mut rng)?;

        let class_weights = vec![1.0; table.class_count()];
        Ok(ModelBundle {
            backbone,
            backbone_spec,
            f_seen,
            f_seen_spec,
            generator,
            generator_spec,
            sigma,
            sigma_spec,
            f_final,
            f_final_spec,
            seen_ids,
            unseen_ids,
            stage: StageFlags::default(),
            gamma: 0.0,
            class_weights,
        })
    }

    /// Frozen-backbone features for a matrix of raw points.
    pub fn embed(&self, points: &Matrix) -> Result<Matrix> {
        mlp_forward(&self.backbone, &self.backbone_spec, "theta", points)
    }

    /// sigma(t) for one class, as a 1 x feature_dim matrix.
    pub fn sigma_t(&self, table: &SemanticTable, class_id: usize) -> Result<Matrix> {
        let t = Matrix::row_vector(table.vector(class_id)?);
        mlp_forward(&self.sigma, &self.sigma_spec, "sigma", &t)
    }

    fn seen_index(&self, class_id: i64) -> Option<usize> {
        self.seen_ids.iter().position(|&c| c as i64 == class_id)
    }

    pub fn save_backbone(&self, path: &Path) -> Result<()> {
        let items: Vec<(&str, &Matrix)> = self
            .backbone
            .iter()
            .chain(self.f_seen.iter())
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        checkpoint::write_matrices(path, items)
    }

    pub fn save_generator(&self, path: &Path) -> Result<()> {
        let items: Vec<(&str, &Matrix)> = self
            .generator
            .iter()
            .chain(self.sigma.iter())
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        checkpoint::write_matrices(path, items)
    }

    pub fn save_final(&self, path: &Path) -> Result<()> {
        let gamma = Matrix::from_vec(1, 1, vec![self.gamma])?;
        let weights = Matrix::row_vector(&self.class_weights);
        let mut items: Vec<(String, Matrix)> = self
            .f_final
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        items.push(("calib.gamma".into(), gamma));
        items.push(("calib.weights".into(), weights));
        checkpoint::write_matrices(path, items.iter().map(|(n, m)| (n.as_str(), m)))
    }

    fn load_into(target: &mut ParamStore, items: &[(String, Matrix)], what: &str) -> Result<()> {
        for p in target.iter_mut() {
            let found = items
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::config(format!("{what}: missing {}", p.name)))?;
            if found.1.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "{what}: {} has shape {:?}, expected {:?}",
                    p.name,
                    found.1.shape(),
                    p.value.shape()
                )));
            }
            p.value = found.1.clone();
            p.grad.fill(0.0);
        }
        Ok(())
    }

    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let items = checkpoint::read_matrices(path)?;
        Self::load_into(&mut self.backbone, &items, "backbone checkpoint")?;
        Self::load_into(&mut self.f_seen, &items, "backbone checkpoint")?;
        self.stage.backbone_trained = true;
        Ok(())
    }

    pub fn load_generator(&mut self, path: &Path) -> Result<()> {
        let items = checkpoint::read_matrices(path)?;
        Self::load_into(&mut self.generator, &items, "generator checkpoint")?;
        Self::load_into(&mut self.sigma, &items, "generator checkpoint")?;
        self.stage.generator_trained = true;
        Ok(())
    }

    pub fn load_final(&mut self, path: &Path) -> Result<()> {
        let items = checkpoint::read_matrices(path)?;
        Self::load_into(&mut self.f_final, &items, "final checkpoint")?;
        let gamma = items
            .iter()
            .find(|(n, _)| n == "calib.gamma")
            .ok_or_else(|| Error::config("final checkpoint: missing calib.gamma"))?;
        let weights = items
            .iter()
            .find(|(n, _)| n == "calib.weights")
            .ok_or_else(|| Error::config("final checkpoint: missing calib.weights"))?;
        if weights.1.cols() != self.class_weights.len() {
            return Err(Error::config(
                "final checkpoint: weight vector size mismatch",
            ));
        }
        self.gamma = gamma.1.get(0, 0);
        self.class_weights = weights.1.row(0).to_vec();
        self.stage.final_trained = true;
        Ok(())
    }
}

/// Reject scenes whose labels stray outside the seen partition.
fn check_inductive(scene: &PointScene, bundle: &ModelBundle) -> Result<()> {
    for &y in &scene.labels {
        if y == IGNORE_LABEL {
            continue;
        }
        if bundle.seen_index(y).is_none() {
            return Err(Error::Argument(format!(
                "data contamination: label {y} is not a seen class"
            )));
        }
    }
    Ok(())
}

/// Stage a: backbone plus seen-class head via per-point cross-entropy on
/// seen scenes only. The backbone is frozen afterwards.
pub fn train_backbone(
    bundle: &mut ModelBundle,
    scenes: &[PointScene],
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    for scene in scenes {
        check_inductive(scene, bundle)?;
    }
    let mut adam_theta = AdamState::new(&bundle.backbone, cfg.lr_backbone);
    let mut adam_head = AdamState::new(&bundle.f_seen, cfg.lr_backbone);
    let unit_weights = vec![1.0; bundle.seen_ids.len()];
    for _ in 0..cfg.backbone_epochs {
        for scene in scenes {
            let keep: Vec<usize> = (0..scene.len())
                .filter(|&i| scene.labels[i] != IGNORE_LABEL)
                .collect();
            if keep.is_empty() {
                trace.skipped_scenes += 1;
                continue;
            }
            let points = scene.gather(&keep);
            let labels: Vec<usize> = keep
                .iter()
                .map(|&i| {
                    trace.touched_labels.insert(scene.labels[i]);
                    bundle.seen_index(scene.labels[i]).unwrap()
                })
                .collect();
            let tape = Tape::new();
            let bound_theta = bind_params(&tape, &bundle.backbone);
            let bound_head = bind_params(&tape, &bundle.f_seen);
            let x = tape.leaf(points);
            let feats = mlp_forward_tape(&tape, &bound_theta, &bundle.backbone_spec, "theta", x)?;
            let logits = mlp_forward_tape(&tape, &bound_head, &bundle.f_seen_spec, "fseen", feats)?;
            let loss = tape.softmax_cross_entropy(logits, &labels, &unit_weights)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("backbone loss {value}")));
            }
            let grads = tape.backward(loss)?;
            bound_theta.accumulate_into(&grads, &mut bundle.backbone)?;
            bound_head.accumulate_into(&grads, &mut bundle.f_seen)?;
            adam_step(&mut adam_theta, &mut bundle.backbone, cfg.lr_backbone)?;
            adam_step(&mut adam_head, &mut bundle.f_seen, cfg.lr_backbone)?;
        }
    }
    bundle.stage.backbone_trained = true;
    Ok(())
}

/// Standard-normal noise block.
fn noise_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Matrix {
    let mut z = Matrix::zeros(rows, cols);
    for v in z.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    z
}

/// Generator input for one class: masked replicated semantics joined with
/// fresh noise.
#[allow(clippy::too_many_arguments)]
fn synth_input(
    table: &SemanticTable,
    class_id: usize,
    n: usize,
    q: f64,
    mask_mode: MaskMode,
    noise_dim: usize,
    rng_mask: &mut Stream,
    rng_noise: &mut Stream,
) -> Result<Matrix> {
    let t = replicate_per_point(table.vector(class_id)?, n)?;
    let masked = mask_semantics(&t, q, rng_mask, mask_mode)?;
    let z = noise_matrix(n, noise_dim, rng_noise);
    let mut out = Matrix::zeros(n, masked.cols() + noise_dim);
    for r in 0..n {
        out.row_mut(r)[..masked.cols()].copy_from_slice(masked.row(r));
        out.row_mut(r)[masked.cols()..].copy_from_slice(z.row(r));
    }
    Ok(out)
}

/// Synthesize raw features for one class with the trained generator.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_features(
    bundle: &ModelBundle,
    table: &SemanticTable,
    class_id: usize,
    n: usize,
    q: f64,
    cfg: &TrainConfig,
    rng_mask: &mut Stream,
    rng_noise: &mut Stream,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("synthesis count must be >= 1".into()));
    }
    let input = synth_input(
        table,
        class_id,
        n,
        q,
        cfg.mask_mode,
        cfg.noise_dim,
        rng_mask,
        rng_noise,
    )?;
    mlp_forward(&bundle.generator, &bundle.generator_spec, "gen", &input)
}

/// Row-wise addition of sigma(t) onto synthesized features.
pub fn enhance(feats: &Matrix, sigma_t: &Matrix) -> Result<Matrix> {
    if sigma_t.rows() != 1 || sigma_t.cols() != feats.cols() {
        return Err(Error::Dimension(format!(
            "enhance: features {:?} vs sigma(t) {:?}",
            feats.shape(),
            sigma_t.shape()
        )));
    }
    let mut out = feats.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let v = out.get(r, c) + sigma_t.get(0, c);
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Visual prototypes of real features under the configured strategy.
pub fn build_prototypes(
    features: &Matrix,
    strategy: PrototypeStrategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Matrix> {
    match strategy {
        PrototypeStrategy::SimpleAverage => simple_average_prototype(features),
        PrototypeStrategy::NeighborAware => {
            neighbor_aware_prototypes(features, cfg.r, cfg.fps_start, cfg.rounding)
        }
        PrototypeStrategy::KMeans => {
            let k = cfg.rounding.anchor_count(features.rows(), cfg.r);
            kmeans_prototypes(features, k, cfg.kmeans_iters, seed)
        }
    }
}

/// Differentiable per-class representative of synthetic features. The
/// grouping (anchors or clusters) is decided on values; the means stay on
/// the tape so gradients reach the generator.
fn class_representative_tape(
    tape: &Tape,
    feats: Var,
    strategy: PrototypeStrategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Var> {
    match strategy {
        PrototypeStrategy::SimpleAverage => Ok(tape.mean_rows(feats)),
        PrototypeStrategy::NeighborAware => {
            let values = tape.value(feats);
            let k = cfg.rounding.anchor_count(values.rows(), cfg.r);
            let anchors = fps(&values, k, cfg.fps_start)?;
            let assignment = assign_to_anchors(&values, &anchors)?;
            let mut group_means = Vec::with_capacity(k);
            for b in 0..k {
                let members: Vec<usize> = (0..values.rows())
                    .filter(|&i| assignment.point_anchor[i] == b)
                    .collect();
                let gathered = tape.gather_rows(feats, &members)?;
                group_means.push(tape.mean_rows(gathered));
            }
            let stacked = tape.stack_rows(&group_means)?;
            Ok(tape.mean_rows(stacked))
        }
        PrototypeStrategy::KMeans => {
            let values = tape.value(feats);
            let k = cfg.rounding.anchor_count(values.rows(), cfg.r);
            let centers = kmeans_prototypes(&values, k, cfg.kmeans_iters, seed)?;
            // final assignment to the converged centers
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
            for i in 0..values.rows() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d = crate::numerics::matrix::sq_dist(values.row(i), centers.row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                groups[best].push(i);
            }
            let mut group_means = Vec::new();
            for members in groups.iter().filter(|g| !g.is_empty()) {
                let gathered = tape.gather_rows(feats, members)?;
                group_means.push(tape.mean_rows(gathered));
            }
            let stacked = tape.stack_rows(&group_means)?;
            Ok(tape.mean_rows(stacked))
        }
    }
}

/// RNG streams used by generator training and synthesis.
pub struct SynthStreams {
    pub mask: Stream,
    pub noise: Stream,
}

impl SynthStreams {
    pub fn new(seed: u64) -> Self {
        SynthStreams {
            mask: rng::stream(seed, "mask"),
            noise: rng::stream(seed, "noise"),
        }
    }
}

/// One generator update on one scene. Returns the per-scene loss breakdown,
/// or `None` when the scene holds no seen class (skipped with a notice in
/// the trace).
#[allow(clippy::too_many_arguments)]
pub fn generator_training_step(
    bundle: &mut ModelBundle,
    scene: &PointScene,
    table: &SemanticTable,
    cfg: &TrainConfig,
    streams: &mut SynthStreams,
    adam_gen: &mut AdamState,
    adam_sigma: &mut AdamState,
    trace: &mut TrainTrace,
) -> Result<Option<LossParts>> {
    if !bundle.stage.backbone_trained {
        return Err(Error::StageOrder(
            "generator training requires a trained, frozen backbone".into(),
        ));
    }
    let seen_in_scene: Vec<usize> = scene
        .present_classes()
        .into_iter()
        .inspect(|&y| {
            trace.touched_labels.insert(y);
        })
        .filter_map(|y| {
            if y >= 0 && bundle.seen_ids.contains(&(y as usize)) {
                Some(y as usize)
            } else {
                None
            }
        })
        .collect();
    if seen_in_scene.is_empty() {
        trace.skipped_scenes += 1;
        return Ok(None);
    }

    // real features and centroids per class, frozen backbone
    let mut real_feats: Vec<(usize, Matrix)> = Vec::with_capacity(seen_in_scene.len());
    for &c in &seen_in_scene {
        let idx = scene.class_indices(c as i64);
        let feats = bundle.embed(&scene.gather(&idx))?;
        real_feats.push((c, feats));
    }
    let centroids: Vec<(usize, Matrix)> = real_feats
        .iter()
        .map(|(c, f)| (*c, f.mean_rows()))
        .collect();

    let tape = Tape::new();
    let bound_gen = bind_params(&tape, &bundle.generator);
    let bound_sigma = bind_params(&tape, &bundle.sigma);

    let mut totals = LossParts::default();
    let mut loss_terms: Vec<Var> = Vec::new();

    for (c, feats_c) in &real_feats {
        let n_c = feats_c.rows();
        let q = if cfg.mcl_mask { cfg.q } else { 0.0 };
        let input = synth_input(
            table,
            *c,
            n_c,
            q,
            cfg.mask_mode,
            cfg.noise_dim,
            &mut streams.mask,
            &mut streams.noise,
        )?;
        let x = tape.leaf(input);
        let f_hat = mlp_forward_tape(&tape, &bound_gen, &bundle.generator_spec, "gen", x)?;

        let t_row = tape.leaf(Matrix::row_vector(table.vector(*c)?));
        let sigma_t = mlp_forward_tape(&tape, &bound_sigma, &bundle.sigma_spec, "sigma", t_row)?;

        // HPA: align real prototypes with sigma(t), then enhance
        let enhanced = if cfg.hpa {
            let protos = build_prototypes(feats_c, cfg.hpa_strategy, cfg, cfg.seed ^ *c as u64)?;
            let protos_leaf = tape.leaf(protos);
            let align_term = align_tape(&tape, protos_leaf, sigma_t)?;
            totals.align += tape.scalar(align_term)?;
            loss_terms.push(align_term);
            let rep = tape.repeat_rows(sigma_t, n_c)?;
            tape.add(f_hat, rep)?
        } else {
            f_hat
        };

        let real_leaf = tape.leaf(feats_c.clone());
        let mmd_term = mmd_tape(&tape, real_leaf, enhanced, cfg.mmd_normalization)?;
        totals.mmd += tape.scalar(mmd_term)?;
        loss_terms.push(mmd_term);

        if cfg.mcl_contrast {
            let mut rows = vec![centroids
                .iter()
                .find(|(cc, _)| cc == c)
                .unwrap()
                .1
                .row(0)
                .to_vec()];
            for (k, centroid) in &centroids {
                if k != c {
                    rows.push(centroid.row(0).to_vec());
                }
            }
            let centroid_matrix = Matrix::from_rows(&rows)?;
            let con_term = infonce_tape(&tape, f_hat, &centroid_matrix, cfg.tau)?;
            totals.con += tape.scalar(con_term)?;
            loss_terms.push(con_term);
        }

        if cfg.rtc {
            // synthetic representative for the seen class (same batch)
            let seen_rep =
                class_representative_tape(&tape, f_hat, cfg.rtc_strategy, cfg, cfg.seed ^ 0x5eed)?;
            let mut sem_rows = vec![table.vector(*c)?.to_vec()];
            let mut reps = vec![seen_rep];
            for &cu in &bundle.unseen_ids {
                let u_input = synth_input(
                    table,
                    cu,
                    n_c,
                    0.0,
                    cfg.mask_mode,
                    cfg.noise_dim,
                    &mut streams.mask,
                    &mut streams.noise,
                )?;
                let xu = tape.leaf(u_input);
                let f_hat_u =
                    mlp_forward_tape(&tape, &bound_gen, &bundle.generator_spec, "gen", xu)?;
                let rep = class_representative_tape(
                    &tape,
                    f_hat_u,
                    cfg.rtc_strategy,
                    cfg,
                    cfg.seed ^ cu as u64,
                )?;
                sem_rows.push(table.vector(cu)?.to_vec());
                reps.push(rep);
            }
            let w = {
                let sem = Matrix::from_rows(&sem_rows)?;
                let mut wm = Matrix::zeros(sem.rows(), sem.rows());
                for e in 0..sem.rows() {
                    for j in (e + 1)..sem.rows() {
                        let d = crate::numerics::matrix::sq_dist(sem.row(e), sem.row(j));
                        wm.set(e, j, d);
                        wm.set(j, e, d);
                    }
                }
                wm
            };
            let visual_set = tape.stack_rows(&reps)?;
            let cst_term = consistency_tape(&tape, &w, visual_set, cfg.consistency_mode)?;
            totals.cst += tape.scalar(cst_term)?;
            loss_terms.push(tape.scale(cst_term, cfg.alpha));
        }
    }

    // joint loss over the scene's seen classes, one Adam update
    let mut total = loss_terms[0];
    for term in &loss_terms[1..] {
        total = tape.add(total, *term)?;
    }
    let value = tape.scalar(total)?;
    if !value.is_finite() || !totals.is_finite() {
        return Err(Error::Numeric(format!("generator loss {value}")));
    }
    let grads = tape.backward(total)?;
    bound_gen.accumulate_into(&grads, &mut bundle.generator)?;
    bound_sigma.accumulate_into(&grads, &mut bundle.sigma)?;
    adam_step(adam_gen, &mut bundle.generator, cfg.lr_generator)?;
    adam_step(adam_sigma, &mut bundle.sigma, cfg.lr_generator)?;
    Ok(Some(totals))
}

/// Stage b: train generator and semantic projection over all scenes.
pub fn train_generator(
    bundle: &mut ModelBundle,
    scenes: &[PointScene],
    table: &SemanticTable,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    if !bundle.stage.backbone_trained {
        return Err(Error::StageOrder(
            "train-generator requires train-backbone first".into(),
        ));
    }
    let mut streams = SynthStreams::new(cfg.seed);
    let mut adam_gen = AdamState::new(&bundle.generator, cfg.lr_generator);
    let mut adam_sigma = AdamState::new(&bundle.sigma, cfg.lr_generator);
    for _ in 0..cfg.generator_epochs {
        for scene in scenes {
            generator_training_step(
                bundle,
                scene,
                table,
                cfg,
                &mut streams,
                &mut adam_gen,
                &mut adam_sigma,
                trace,
            )?;
        }
    }
    bundle.stage.generator_trained = true;
    Ok(())
}

/// Enhanced synthetic features with labels for every unseen class.
/// Masking is disabled; enhancement follows the HPA flag.
pub fn synth_unseen_set(
    bundle: &ModelBundle,
    table: &SemanticTable,
    per_class_count: usize,
    cfg: &TrainConfig,
    streams: &mut SynthStreams,
) -> Result<(Matrix, Vec<i64>)> {
    if !bundle.stage.generator_trained {
        return Err(Error::StageOrder(
            "unseen synthesis requires a trained generator".into(),
        ));
    }
    if per_class_count == 0 {
        return Ok((Matrix::zeros(0, cfg.feature_dim), Vec::new()));
    }
    let mut parts: Vec<Matrix> = Vec::new();
    let mut labels = Vec::new();
    for &cu in &bundle.unseen_ids {
        let raw = synthesize_features(
            bundle,
            table,
            cu,
            per_class_count,
            0.0,
            cfg,
            &mut streams.mask,
            &mut streams.noise,
        )?;
        let feats = if cfg.hpa {
            enhance(&raw, &bundle.sigma_t(table, cu)?)?
        } else {
            raw
        };
        parts.push(feats);
        labels.extend(std::iter::repeat_n(cu as i64, per_class_count));
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok((Matrix::vstack(&refs)?, labels))
}

/// Mean per-class seen point count over the whole training set; the
/// default synthetic-unseen count, so each unseen class enters the final
/// classifier with as many rows as an average seen class.
pub fn mean_seen_class_count(scenes: &[PointScene], bundle: &ModelBundle) -> usize {
    let mut total = 0usize;
    let mut present: BTreeSet<usize> = BTreeSet::new();
    for scene in scenes {
        for &c in &bundle.seen_ids {
            let n = scene.class_indices(c as i64).len();
            if n > 0 {
                total += n;
                present.insert(c);
            }
        }
    }
    if present.is_empty() {
        1
    } else {
        (total / present.len()).max(1)
    }
}

/// Stage c: final classifier over real seen features plus synthetic unseen
/// features, weighted cross-entropy, poly-scheduled full-batch Adam.
pub fn train_final_classifier(
    bundle: &mut ModelBundle,
    scenes: &[PointScene],
    synth_features: &Matrix,
    synth_labels: &[i64],
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<()> {
    if !bundle.stage.backbone_trained || !bundle.stage.generator_trained {
        return Err(Error::StageOrder(
            "train-classifier requires train-backbone and train-generator first".into(),
        ));
    }
    if class_weights.len() != bundle.class_weights.len() {
        return Err(Error::config("class weight vector has wrong length"));
    }
    for &cu in &bundle.unseen_ids {
        if !synth_labels.contains(&(cu as i64)) {
            return Err(Error::config(format!(
                "synthetic set missing unseen class {cu}"
            )));
        }
    }
    // real seen features, embedded once under the frozen backbone
    let mut feat_parts: Vec<Matrix> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for scene in scenes {
        let keep: Vec<usize> = (0..scene.len())
            .filter(|&i| scene.labels[i] != IGNORE_LABEL)
            .collect();
        if keep.is_empty() {
            continue;
        }
        feat_parts.push(bundle.embed(&scene.gather(&keep))?);
        labels.extend(keep.iter().map(|&i| scene.labels[i] as usize));
    }
    if synth_features.rows() != synth_labels.len() {
        return Err(Error::Argument("synthetic feature/label mismatch".into()));
    }
    if synth_features.rows() > 0 {
        feat_parts.push(synth_features.clone());
        labels.extend(synth_labels.iter().map(|&y| y as usize));
    }
    let refs: Vec<&Matrix> = feat_parts.iter().collect();
    let features = Matrix::vstack(&refs)?;

    let mut adam = AdamState::new(&bundle.f_final, cfg.lr_final);
    for it in 0..cfg.final_iters {
        let lr = poly_lr(it, cfg.final_iters, cfg.lr_final, cfg.poly_power)?;
        let tape = Tape::new();
        let bound = bind_params(&tape, &bundle.f_final);
        let x = tape.leaf(features.clone());
        let logits = mlp_forward_tape(&tape, &bound, &bundle.f_final_spec, "ffinal", x)?;
        let loss = tape.softmax_cross_entropy(logits, &labels, class_weights)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("classifier loss {value}")));
        }
        let grads = tape.backward(loss)?;
        bound.accumulate_into(&grads, &mut bundle.f_final)?;
        adam_step(&mut adam, &mut bundle.f_final, lr)?;
    }
    bundle.class_weights = class_weights.to_vec();
    bundle.stage.final_trained = true;
    Ok(())
}

/// Raw final-classifier logits for a matrix of points.
pub fn final_logits(bundle: &ModelBundle, points: &Matrix) -> Result<Matrix> {
    let feats = bundle.embed(points)?;
    mlp_forward(&bundle.f_final, &bundle.f_final_spec, "ffinal", &feats)
}

/// Seen classes held out as pseudo-unseen for cross-validation:
/// max(2, ceil(0.2 * n_seen)).
pub fn pseudo_unseen_count(n_seen: usize) -> usize {
    let twenty_pct = (0.2 * n_seen as f64).ceil() as usize;
    twenty_pct.max(2)
}

/// One evaluated grid point of the calibration search.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationPoint {
    pub gamma: f64,
    pub unseen_weight: f64,
    pub hmiou: f64,
}

/// Outcome of the calibration grid search.
#[derive(Clone, Debug)]
pub struct CalibrationResult {
    pub gamma: f64,
    pub unseen_weight: f64,
    pub best_hmiou: f64,
    pub grid: Vec<CalibrationPoint>,
    pub pseudo_unseen: Vec<usize>,
}

/// Grid search for the stacking offset and the unseen class weight.
///
/// A deterministic pseudo-split holds out max(2, ceil(0.2 * |seen|)) seen
/// classes as pseudo-unseen. A fresh generator is trained on the kept-seen
/// points only, so its pseudo-unseen synthesis measures genuine transfer
/// rather than recall; for every candidate weight a classifier is trained
/// on kept-seen real features plus those synthetic features, every
/// candidate gamma is evaluated on the validation scenes, and the pair
/// maximizing HmIoU wins. Ties break to the smallest gamma, then the
/// smallest weight.
pub fn calibrate(
    bundle: &ModelBundle,
    validation_scenes: &[PointScene],
    table: &SemanticTable,
    cfg: &TrainConfig,
    gamma_grid: &[f64],
    weight_grid: &[f64],
) -> Result<CalibrationResult> {
    if gamma_grid.is_empty() || weight_grid.is_empty() {
        return Err(Error::Argument(
            "calibration grids must be non-empty".into(),
        ));
    }
    if !bundle.stage.backbone_trained || !bundle.stage.generator_trained {
        return Err(Error::StageOrder(
            "calibration requires trained backbone and generator".into(),
        ));
    }
    let n_seen = bundle.seen_ids.len();
    let holdout = pseudo_unseen_count(n_seen);
    if holdout >= n_seen {
        return Err(Error::Argument(format!(
            "cannot hold out {holdout} of {n_seen} seen classes"
        )));
    }
    let mut shuffled = bundle.seen_ids.clone();
    let mut calib_rng = rng::stream(cfg.seed, "calib");
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut calib_rng);
    let pseudo_unseen: Vec<usize> = {
        let mut p = shuffled[..holdout].to_vec();
        p.sort_unstable();
        p
    };
    let kept: Vec<usize> = bundle
        .seen_ids
        .iter()
        .copied()
        .filter(|c| !pseudo_unseen.contains(c))
        .collect();

    // kept-seen real features from the validation scenes
    let mut feat_parts: Vec<Matrix> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for scene in validation_scenes {
        let keep: Vec<usize> = (0..scene.len())
            .filter(|&i| {
                let y = scene.labels[i];
                y != IGNORE_LABEL && kept.contains(&(y as usize))
            })
            .collect();
        if keep.is_empty() {
            continue;
        }
        feat_parts.push(bundle.embed(&scene.gather(&keep))?);
        labels.extend(keep.iter().map(|&i| scene.labels[i] as usize));
    }
    if feat_parts.is_empty() {
        return Err(Error::Argument(
            "validation scenes hold no kept-seen points".into(),
        ));
    }

    // pseudo world: kept classes seen, everything else unseen; scenes
    // filtered down to kept-seen points
    let mut pseudo_bundle = bundle.clone();
    pseudo_bundle.seen_ids = kept.clone();
    pseudo_bundle.unseen_ids = (0..table.class_count())
        .filter(|c| !kept.contains(c))
        .collect();
    pseudo_bundle.stage.generator_trained = false;
    {
        let mut init_rng = rng::stream(cfg.seed, "calib-init");
        let mut generator = ParamStore::new();
        generator.init_mlp("gen", &bundle.generator_spec, &mut init_rng)?;
        let mut sigma = ParamStore::new();
        sigma.init_mlp("sigma", &bundle.sigma_spec, &mut init_rng)?;
        pseudo_bundle.generator = generator;
        pseudo_bundle.sigma = sigma;
    }
    let mut pseudo_scenes: Vec<PointScene> = Vec::new();
    for scene in validation_scenes {
        let keep: Vec<usize> = (0..scene.len())
            .filter(|&i| {
                let y = scene.labels[i];
                y != IGNORE_LABEL && kept.contains(&(y as usize))
            })
            .collect();
        if keep.is_empty() {
            continue;
        }
        let labels: Vec<i64> = keep.iter().map(|&i| scene.labels[i]).collect();
        pseudo_scenes.push(PointScene::new(scene.gather(&keep), labels)?);
    }
    let mut pseudo_cfg = cfg.clone();
    pseudo_cfg.seed = cfg.seed ^ 0xca11b;
    let mut pseudo_trace = TrainTrace::default();
    train_generator(
        &mut pseudo_bundle,
        &pseudo_scenes,
        table,
        &pseudo_cfg,
        &mut pseudo_trace,
    )?;

    // synthetic features for the pseudo-unseen classes from the pseudo
    // generator (masking off)
    let per_class = if cfg.synth_per_class > 0 {
        cfg.synth_per_class
    } else {
        mean_seen_class_count(validation_scenes, bundle)
    };
    let mut streams = SynthStreams::new(cfg.seed ^ 0xca11b);
    let mut synth_parts: Vec<Matrix> = Vec::new();
    let mut synth_labels: Vec<usize> = Vec::new();
    for &c in &pseudo_unseen {
        let raw = synthesize_features(
            &pseudo_bundle,
            table,
            c,
            per_class,
            0.0,
            cfg,
            &mut streams.mask,
            &mut streams.noise,
        )?;
        let feats = if cfg.hpa {
            enhance(&raw, &pseudo_bundle.sigma_t(table, c)?)?
        } else {
            raw
        };
        synth_parts.push(feats);
        synth_labels.extend(std::iter::repeat_n(c, per_class));
    }
    let mut all_parts: Vec<&Matrix> = feat_parts.iter().collect();
    all_parts.extend(synth_parts.iter());
    let features = Matrix::vstack(&all_parts)?;
    let mut all_labels = labels;
    all_labels.extend(&synth_labels);

    // per-scene validation features, embedded once
    let scene_feats: Vec<(Matrix, &PointScene)> = validation_scenes
        .iter()
        .map(|s| Ok((bundle.embed(&s.points)?, s)))
        .collect::<Result<_>>()?;

    let allowed: Vec<usize> = kept.iter().chain(pseudo_unseen.iter()).copied().collect();
    let mut grid = Vec::with_capacity(weight_grid.len() * gamma_grid.len());
    for &w in weight_grid {
        if w < 0.0 {
            return Err(Error::Argument(format!("weight {w} must be >= 0")));
        }
        let mut weights = vec![1.0; table.class_count()];
        for &c in &pseudo_unseen {
            weights[c] = w;
        }
        let mut head = ParamStore::new();
        let mut head_rng = rng::stream(cfg.seed, "calib-head");
        head.init_mlp("ffinal", &bundle.f_final_spec, &mut head_rng)?;
        fit_classifier_head(
            &mut head,
            &bundle.f_final_spec,
            &features,
            &all_labels,
            &weights,
            cfg,
        )?;
        for &gamma in gamma_grid {
            let mut conf = crate::metrics::ConfusionMatrix::new(
                (0..table.class_count())
                    .map(|c| !pseudo_unseen.contains(&c))
                    .collect(),
            );
            for (feats, scene) in &scene_feats {
                let logits = mlp_forward(&head, &bundle.f_final_spec, "ffinal", feats)?;
                let preds = predict_calibrated(&logits, gamma, &kept, &allowed);
                conf.update(&preds, &scene.labels)?;
            }
            let s = conf.miou(crate::metrics::Subset::Seen)?;
            let u = conf.miou(crate::metrics::Subset::Unseen)?;
            grid.push(CalibrationPoint {
                gamma,
                unseen_weight: w,
                hmiou: crate::metrics::hmiou(s, u),
            });
        }
    }
    let best = select_calibration_point(&grid);
    Ok(CalibrationResult {
        gamma: best.gamma,
        unseen_weight: best.unseen_weight,
        best_hmiou: best.hmiou,
        grid,
        pseudo_unseen,
    })
}

/// Maximal HmIoU; ties to the smallest gamma, then the smallest weight.
pub fn select_calibration_point(grid: &[CalibrationPoint]) -> CalibrationPoint {
    let mut best = grid[0];
    for p in &grid[1..] {
        let better = p.hmiou > best.hmiou
            || (p.hmiou == best.hmiou
                && (p.gamma < best.gamma
                    || (p.gamma == best.gamma && p.unseen_weight < best.unseen_weight)));
        if better {
            best = *p;
        }
    }
    best
}

/// Weighted-CE Adam fit of a classifier head on fixed features.
fn fit_classifier_head(
    head: &mut ParamStore,
    spec: &MlpSpec,
    features: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<()> {
    let mut adam = AdamState::new(head, cfg.lr_final);
    for it in 0..cfg.final_iters {
        let lr = poly_lr(it, cfg.final_iters, cfg.lr_final, cfg.poly_power)?;
        let tape = Tape::new();
        let bound = bind_params(&tape, head);
        let x = tape.leaf(features.clone());
        let logits = mlp_forward_tape(&tape, &bound, spec, "ffinal", x)?;
        let loss = tape.softmax_cross_entropy(logits, labels, class_weights)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("calibration loss {value}")));
        }
        let grads = tape.backward(loss)?;
        bound.accumulate_into(&grads, head)?;
        adam_step(&mut adam, head, lr)?;
    }
    Ok(())
}

/// Argmax after subtracting `gamma` from the logits of `stacked` classes,
/// restricted to `allowed` classes; ties go to the lowest class id.
pub fn predict_calibrated(
    logits: &Matrix,
    gamma: f64,
    stacked: &[usize],
    allowed: &[usize],
) -> Vec<usize> {
    let mut out = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let mut best = allowed[0];
        let mut best_v = f64::NEG_INFINITY;
        for &c in allowed {
            let mut v = logits.get(r, c);
            if stacked.contains(&c) {
                v -= gamma;
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.push(best);
    }
    out
}

/// Per-point class predictions with calibrated stacking against the seen
/// classes.
pub fn predict(bundle: &ModelBundle, scene: &PointScene, gamma: f64) -> Result<Vec<usize>> {
    if !bundle.stage.final_trained {
        return Err(Error::StageOrder(
            "predict requires a trained bundle".into(),
        ));
    }
    let logits = final_logits(bundle, &scene.points)?;
    let allowed: Vec<usize> = (0..bundle.class_weights.len()).collect();
    Ok(predict_calibrated(
        &logits,
        gamma,
        &bundle.seen_ids,
        &allowed,
    ))
}

//! Experiment configuration: line-based `key = value` text with `#`
//! comments, documented defaults for every key, and strict rejection of
//! unknown keys.

use std::fs;
use std::path::Path;

use crate::embeddings::MaskMode;
use crate::error::{Error, Result};
use crate::geometry::{Rounding, StartRule};
use crate::losses::{ConsistencyMode, MmdNormalization};
use crate::pipeline::{PrototypeStrategy, TrainConfig};

/// Where the semantic table comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Synthetic unit vectors with a minimum pairwise angle.
    Synthetic,
    /// Word-vector text files, concatenated when both paths are given.
    Files,
}

/// Everything a run needs: training hyper-parameters, toy-world geometry,
/// split sizes, sweep grids and output location.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    // toy world
    pub classes_seen: usize,
    pub classes_unseen: usize,
    pub d_sem: usize,
    pub d_in: usize,
    pub rho: f64,
    pub world_noise: f64,
    pub min_angle_deg: f64,
    pub points_per_class: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    // embeddings
    pub embedding_source: EmbeddingSource,
    pub glove_path: String,
    pub word2vec_path: String,
    pub class_names: Vec<String>,
    pub unseen_class_names: Vec<String>,
    // calibration
    pub calibrate: bool,
    pub gamma_grid: Vec<f64>,
    pub weight_grid: Vec<f64>,
    // sweeps
    pub q_grid: Vec<f64>,
    pub r_grid: Vec<f64>,
    // output
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            classes_seen: 8,
            classes_unseen: 4,
            d_sem: 16,
            d_in: 12,
            rho: 1.0,
            world_noise: 0.35,
            min_angle_deg: 15.0,
            points_per_class: 60,
            train_scenes: 40,
            test_scenes: 10,
            embedding_source: EmbeddingSource::Synthetic,
            glove_path: String::new(),
            word2vec_path: String::new(),
            class_names: Vec::new(),
            unseen_class_names: Vec::new(),
            calibrate: true,
            gamma_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            weight_grid: vec![1.0, 4.0],
            q_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            r_grid: vec![0.01, 0.02, 0.04, 0.08, 0.16],
            out_dir: "out".to_string(),
        }
    }
}

fn parse_bool(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config_at(
            line,
            format!("expected true/false, got `{v}`"),
        )),
    }
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::config_at(line, format!("expected a number, got `{v}`")))
}

fn parse_usize(v: &str, line: usize) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::config_at(line, format!("expected a count, got `{v}`")))
}

fn parse_u64(v: &str, line: usize) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config_at(line, format!("expected a seed, got `{v}`")))
}

fn parse_f64_list(v: &str, line: usize) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Err(Error::config_at(line, "empty list"));
    }
    v.split(',').map(|t| parse_f64(t.trim(), line)).collect()
}

fn parse_usize_list(v: &str, line: usize) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Err(Error::config_at(line, "empty list"));
    }
    v.split(',').map(|t| parse_usize(t.trim(), line)).collect()
}

fn parse_string_list(v: &str) -> Vec<String> {
    if v.trim().is_empty() {
        return Vec::new();
    }
    v.split(',').map(|t| t.trim().to_string()).collect()
}

fn parse_strategy(v: &str, line: usize) -> Result<PrototypeStrategy> {
    match v {
        "simple_average" => Ok(PrototypeStrategy::SimpleAverage),
        "kmeans" => Ok(PrototypeStrategy::KMeans),
        "neighbor_aware" => Ok(PrototypeStrategy::NeighborAware),
        _ => Err(Error::config_at(
            line,
            format!("unknown prototype strategy `{v}` (simple_average|kmeans|neighbor_aware)"),
        )),
    }
}

impl ExperimentConfig {
    /// Parse one `key = value` document. Missing keys fall back to the
    /// documented defaults; unknown keys and malformed values are errors
    /// carrying the line number.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen_keys: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config_at(lineno, format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen_keys.iter().any(|k| k == key) {
                return Err(Error::config_at(lineno, format!("duplicate key `{key}`")));
            }
            seen_keys.push(key.to_string());
            cfg.apply(key, value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "q" => self.train.q = parse_f64(value, line)?,
            "r" => self.train.r = parse_f64(value, line)?,
            "alpha" => self.train.alpha = parse_f64(value, line)?,
            "tau" => self.train.tau = parse_f64(value, line)?,
            "lr_backbone" => self.train.lr_backbone = parse_f64(value, line)?,
            "lr_generator" => self.train.lr_generator = parse_f64(value, line)?,
            "lr_final" => self.train.lr_final = parse_f64(value, line)?,
            "backbone_epochs" => self.train.backbone_epochs = parse_usize(value, line)?,
            "generator_epochs" => self.train.generator_epochs = parse_usize(value, line)?,
            "final_iters" => self.train.final_iters = parse_usize(value, line)?,
            "poly_power" => self.train.poly_power = parse_f64(value, line)?,
            "synth_per_class" => self.train.synth_per_class = parse_usize(value, line)?,
            "gamma" => self.train.gamma = parse_f64(value, line)?,
            "unseen_weight" => self.train.unseen_weight = parse_f64(value, line)?,
            "mcl_mask" => self.train.mcl_mask = parse_bool(value, line)?,
            "mcl_contrast" => self.train.mcl_contrast = parse_bool(value, line)?,
            "hpa" => self.train.hpa = parse_bool(value, line)?,
            "rtc" => self.train.rtc = parse_bool(value, line)?,
            "hpa_strategy" => self.train.hpa_strategy = parse_strategy(value, line)?,
            "rtc_strategy" => self.train.rtc_strategy = parse_strategy(value, line)?,
            "mask_mode" => {
                self.train.mask_mode = match value {
                    "elementwise" => MaskMode::Elementwise,
                    "per_point" => MaskMode::PerPoint,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown mask mode `{value}` (elementwise|per_point)"),
                        ))
                    }
                }
            }
            "rounding" => {
                self.train.rounding = match value {
                    "floor" => Rounding::Floor,
                    "round" => Rounding::Nearest,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown rounding `{value}` (floor|round)"),
                        ))
                    }
                }
            }
            "consistency_mode" => {
                self.train.consistency_mode = match value {
                    "rowwise" => ConsistencyMode::RowWise,
                    "flat" => ConsistencyMode::Flattened,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown consistency mode `{value}` (rowwise|flat)"),
                        ))
                    }
                }
            }
            "mmd_normalization" => {
                self.train.mmd_normalization = match value {
                    "none" => MmdNormalization::Unnormalized,
                    "biased" => MmdNormalization::Biased,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown MMD normalization `{value}` (none|biased)"),
                        ))
                    }
                }
            }
            "fps_start" => {
                self.train.fps_start = match value {
                    "first_index" => StartRule::FirstIndex,
                    "max_norm" => StartRule::MaxNorm,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown FPS start rule `{value}` (first_index|max_norm)"),
                        ))
                    }
                }
            }
            "noise_dim" => self.train.noise_dim = parse_usize(value, line)?,
            "backbone_hidden" => self.train.backbone_hidden = parse_usize_list(value, line)?,
            "generator_hidden" => self.train.generator_hidden = parse_usize_list(value, line)?,
            "feature_dim" => self.train.feature_dim = parse_usize(value, line)?,
            "leaky_slope" => self.train.leaky_slope = parse_f64(value, line)?,
            "kmeans_iters" => self.train.kmeans_iters = parse_usize(value, line)?,
            "seed" => self.train.seed = parse_u64(value, line)?,
            "classes_seen" => self.classes_seen = parse_usize(value, line)?,
            "classes_unseen" => self.classes_unseen = parse_usize(value, line)?,
            "d_sem" => self.d_sem = parse_usize(value, line)?,
            "d_in" => self.d_in = parse_usize(value, line)?,
            "rho" => self.rho = parse_f64(value, line)?,
            "world_noise" => self.world_noise = parse_f64(value, line)?,
            "min_angle_deg" => self.min_angle_deg = parse_f64(value, line)?,
            "points_per_class" => self.points_per_class = parse_usize(value, line)?,
            "train_scenes" => self.train_scenes = parse_usize(value, line)?,
            "test_scenes" => self.test_scenes = parse_usize(value, line)?,
            "embedding_source" => {
                self.embedding_source = match value {
                    "synthetic" => EmbeddingSource::Synthetic,
                    "files" => EmbeddingSource::Files,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("unknown embedding source `{value}` (synthetic|files)"),
                        ))
                    }
                }
            }
            "glove_path" => self.glove_path = value.to_string(),
            "word2vec_path" => self.word2vec_path = value.to_string(),
            "class_names" => self.class_names = parse_string_list(value),
            "unseen_class_names" => self.unseen_class_names = parse_string_list(value),
            "calibrate" => self.calibrate = parse_bool(value, line)?,
            "gamma_grid" => self.gamma_grid = parse_f64_list(value, line)?,
            "weight_grid" => self.weight_grid = parse_f64_list(value, line)?,
            "q_grid" => self.q_grid = parse_f64_list(value, line)?,
            "r_grid" => self.r_grid = parse_f64_list(value, line)?,
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::config_at(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho = {} outside [0,1]", self.rho)));
        }
        if self.world_noise < 0.0 {
            return Err(Error::config("world_noise must be >= 0"));
        }
        if self.embedding_source == EmbeddingSource::Synthetic {
            if self.classes_seen == 0 || self.classes_unseen == 0 {
                return Err(Error::config("need at least one seen and one unseen class"));
            }
            if self.d_in < 2 {
                return Err(Error::config("d_in must be >= 2"));
            }
        } else {
            if self.class_names.is_empty() {
                return Err(Error::config("embedding_source=files requires class_names"));
            }
            if self.unseen_class_names.is_empty() {
                return Err(Error::config(
                    "embedding_source=files requires unseen_class_names",
                ));
            }
            if self.glove_path.is_empty() && self.word2vec_path.is_empty() {
                return Err(Error::config(
                    "embedding_source=files requires glove_path and/or word2vec_path",
                ));
            }
        }
        if self.points_per_class == 0 || self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::config("split sizes must be positive"));
        }
        if self.gamma_grid.is_empty() || self.weight_grid.is_empty() {
            return Err(Error::config("calibration grids must be non-empty"));
        }
        if self.q_grid.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::config("q_grid values must lie in [0,1]"));
        }
        if self.r_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::config("r_grid values must lie in (0,1)"));
        }
        Ok(())
    }

    /// Serialize with every key stated once; parses back to an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let strategy = |p: PrototypeStrategy| match p {
            PrototypeStrategy::SimpleAverage => "simple_average",
            PrototypeStrategy::KMeans => "kmeans",
            PrototypeStrategy::NeighborAware => "neighbor_aware",
        };
        let f64s = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let usizes = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let t = &self.train;
        s.push_str(&format!("q = {}\n", t.q));
        s.push_str(&format!("r = {}\n", t.r));
        s.push_str(&format!("alpha = {}\n", t.alpha));
        s.push_str(&format!("tau = {}\n", t.tau));
        s.push_str(&format!("lr_backbone = {}\n", t.lr_backbone));
        s.push_str(&format!("lr_generator = {}\n", t.lr_generator));
        s.push_str(&format!("lr_final = {}\n", t.lr_final));
        s.push_str(&format!("backbone_epochs = {}\n", t.backbone_epochs));
        s.push_str(&format!("generator_epochs = {}\n", t.generator_epochs));
        s.push_str(&format!("final_iters = {}\n", t.final_iters));
        s.push_str(&format!("poly_power = {}\n", t.poly_power));
        s.push_str(&format!("synth_per_class = {}\n", t.synth_per_class));
        s.push_str(&format!("gamma = {}\n", t.gamma));
        s.push_str(&format!("unseen_weight = {}\n", t.unseen_weight));
        s.push_str(&format!("mcl_mask = {}\n", t.mcl_mask));
        s.push_str(&format!("mcl_contrast = {}\n", t.mcl_contrast));
        s.push_str(&format!("hpa = {}\n", t.hpa));
        s.push_str(&format!("rtc = {}\n", t.rtc));
        s.push_str(&format!("hpa_strategy = {}\n", strategy(t.hpa_strategy)));
        s.push_str(&format!("rtc_strategy = {}\n", strategy(t.rtc_strategy)));
        s.push_str(&format!(
            "mask_mode = {}\n",
            match t.mask_mode {
                MaskMode::Elementwise => "elementwise",
                MaskMode::PerPoint => "per_point",
            }
        ));
        s.push_str(&format!(
            "rounding = {}\n",
            match t.rounding {
                Rounding::Floor => "floor",
                Rounding::Nearest => "round",
            }
        ));
        s.push_str(&format!(
            "consistency_mode = {}\n",
            match t.consistency_mode {
                ConsistencyMode::RowWise => "rowwise",
                ConsistencyMode::Flattened => "flat",
            }
        ));
        s.push_str(&format!(
            "mmd_normalization = {}\n",
            match t.mmd_normalization {
                MmdNormalization::Unnormalized => "none",
                MmdNormalization::Biased => "biased",
            }
        ));
        s.push_str(&format!(
            "fps_start = {}\n",
            match t.fps_start {
                StartRule::FirstIndex => "first_index",
                StartRule::MaxNorm => "max_norm",
            }
        ));
        s.push_str(&format!("noise_dim = {}\n", t.noise_dim));
        s.push_str(&format!(
            "backbone_hidden = {}\n",
            usizes(&t.backbone_hidden)
        ));
        s.push_str(&format!(
            "generator_hidden = {}\n",
            usizes(&t.generator_hidden)
        ));
        s.push_str(&format!("feature_dim = {}\n", t.feature_dim));
        s.push_str(&format!("leaky_slope = {}\n", t.leaky_slope));
        s.push_str(&format!("kmeans_iters = {}\n", t.kmeans_iters));
        s.push_str(&format!("seed = {}\n", t.seed));
        s.push_str(&format!("classes_seen = {}\n", self.classes_seen));
        s.push_str(&format!("classes_unseen = {}\n", self.classes_unseen));
        s.push_str(&format!("d_sem = {}\n", self.d_sem));
        s.push_str(&format!("d_in = {}\n", self.d_in));
        s.push_str(&format!("rho = {}\n", self.rho));
        s.push_str(&format!("world_noise = {}\n", self.world_noise));
        s.push_str(&format!("min_angle_deg = {}\n", self.min_angle_deg));
        s.push_str(&format!("points_per_class = {}\n", self.points_per_class));
        s.push_str(&format!("train_scenes = {}\n", self.train_scenes));
        s.push_str(&format!("test_scenes = {}\n", self.test_scenes));
        s.push_str(&format!(
            "embedding_source = {}\n",
            match self.embedding_source {
                EmbeddingSource::Synthetic => "synthetic",
                EmbeddingSource::Files => "files",
            }
        ));
        if !self.glove_path.is_empty() {
            s.push_str(&format!("glove_path = {}\n", self.glove_path));
        }
        if !self.word2vec_path.is_empty() {
            s.push_str(&format!("word2vec_path = {}\n", self.word2vec_path));
        }
        if !self.class_names.is_empty() {
            s.push_str(&format!("class_names = {}\n", self.class_names.join(",")));
        }
        if !self.unseen_class_names.is_empty() {
            s.push_str(&format!(
                "unseen_class_names = {}\n",
                self.unseen_class_names.join(",")
            ));
        }
        s.push_str(&format!("calibrate = {}\n", self.calibrate));
        s.push_str(&format!("gamma_grid = {}\n", f64s(&self.gamma_grid)));
        s.push_str(&format!("weight_grid = {}\n", f64s(&self.weight_grid)));
        s.push_str(&format!("q_grid = {}\n", f64s(&self.q_grid)));
        s.push_str(&format!("r_grid = {}\n", f64s(&self.r_grid)));
        s.push_str(&format!("out_dir = {}\n", self.out_dir));
        s
    }
}

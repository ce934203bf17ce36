//! Run configuration: a flat `key = value` text format.
//!
//! Lines starting with `#` are comments. `include = other.conf` splices in
//! another file at that point (relative to the including file), so later
//! keys override included defaults. Unknown keys are rejected.
//!
//! Relative data paths resolve against `$HANDMESH_DATA_ROOT` and relative
//! asset paths against `$HANDMESH_ASSET_ROOT` when those are set, and
//! against the config file's directory otherwise.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PerPointNorm};
use crate::mesh::JointRegressor;
use crate::metrics::ErrorMode;
use crate::model::{HandNet, ModelConfig};
use crate::tensor::AdamConfig;

pub const DATA_ROOT_ENV: &str = "HANDMESH_DATA_ROOT";
pub const ASSET_ROOT_ENV: &str = "HANDMESH_ASSET_ROOT";
const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate from `lr_boundary` onwards.
    pub lr_after: f64,
    /// First epoch (zero-based) using `lr_after`.
    pub lr_boundary: usize,
    pub adam: AdamConfig,
    /// Shuffle sample order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 5e-4,
            lr_after: 5e-5,
            lr_boundary: 100,
            adam: AdamConfig::default(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_boundary {
            self.lr
        } else {
            self.lr_after
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub mode: ErrorMode,
    pub thresholds_mm: Vec<f64>,
    /// Procrustes-align meshes before the F-score.
    pub align_fscore: bool,
    pub workers: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mode: ErrorMode::MeanEuclidean,
            thresholds_mm: vec![5.0, 15.0],
            align_fscore: true,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iters: 100, warmup: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub per_point_norm: PerPointNorm,
    pub train: TrainConfig,
    pub seed: u64,
    /// Joint regressor matrix file; a seeded synthetic regressor is used
    /// when absent.
    pub regressor: Option<PathBuf>,
    pub regressor_seed: u64,
    pub faces: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            per_point_norm: PerPointNorm::L1,
            train: TrainConfig::default(),
            seed: 0,
            regressor: None,
            regressor_seed: 0,
            faces: None,
            train_manifest: None,
            eval_manifest: None,
            metrics: MetricsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn resolve(value: &str, env: &str, base: &Path) -> Option<PathBuf> {
    if value.is_empty() {
        return None;
    }
    let p = PathBuf::from(value);
    if p.is_absolute() {
        return Some(p);
    }
    let root = std::env::var_os(env).map(PathBuf::from).unwrap_or_else(|| base.to_path_buf());
    Some(root.join(p))
}

impl RunConfig {
    /// Applies one `key = value` setting. `base` is the directory that
    /// relative paths resolve against when no root variable is set.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "backbone.stage_channels" => m.backbone.stage_channels = parse_list(key, v)?,
            "backbone.input_size" => m.backbone.input_size = parse(key, v)?,
            "model.joints" => m.joints = parse(key, v)?,
            "model.vertices" => m.vertices = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.d_k" => m.d_k = parse_list(key, v)?,
            "model.token_upsample" => m.token_upsample = parse(key, v)?,
            "model.upsample_kernel" => m.upsample_kernel = parse(key, v)?,
            "model.fusion" => m.fusion = parse_bool(key, v)?,
            "model.skeleton_attention" => m.skeleton_attention = parse_bool(key, v)?,
            "model.parents" => m.parents = parse_list(key, v)?,
            "model.joint_order" => m.joint_order = parse_list(key, v)?,
            "model.tip_indices" => m.tip_indices = parse_list(key, v)?,
            "loss.k_2d" => self.loss.k_2d = parse(key, v)?,
            "loss.k_3d" => self.loss.k_3d = parse(key, v)?,
            "loss.k_v" => self.loss.k_v = parse(key, v)?,
            "loss.per_point_norm" => self.per_point_norm = v.parse()?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_after" => self.train.lr_after = parse(key, v)?,
            "train.lr_boundary" => self.train.lr_boundary = parse(key, v)?,
            "train.shuffle" => self.train.shuffle = parse_bool(key, v)?,
            "train.adam_beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "assets.regressor" => self.regressor = resolve(v, ASSET_ROOT_ENV, base),
            "assets.regressor_seed" => self.regressor_seed = parse(key, v)?,
            "assets.faces" => self.faces = resolve(v, ASSET_ROOT_ENV, base),
            "data.train" => self.train_manifest = resolve(v, DATA_ROOT_ENV, base),
            "data.eval" => self.eval_manifest = resolve(v, DATA_ROOT_ENV, base),
            "metrics.mode" => self.metrics.mode = v.parse()?,
            "metrics.f_thresholds_mm" => self.metrics.thresholds_mm = parse_list(key, v)?,
            "metrics.align_fscore" => self.metrics.align_fscore = parse_bool(key, v)?,
            "metrics.workers" => self.metrics.workers = parse(key, v)?,
            "bench.iters" => self.bench.iters = parse(key, v)?,
            "bench.warmup" => self.bench.warmup = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text. `include` lines resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        self.apply_text_at(text, base, "<text>", 0)
    }

    fn apply_text_at(&mut self, text: &str, base: &Path, origin: &str, depth: usize) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let located = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            };
            if key == "include" {
                if depth >= MAX_INCLUDE_DEPTH {
                    return Err(Error::Config(format!("{origin}: includes nested too deeply")));
                }
                self.apply_file(&base.join(value), depth + 1)?;
            } else {
                self.set(key, value, base).map_err(located)?;
            }
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.apply_text_at(&text, &base, &path.display().to_string(), depth)
    }

    /// Defaults overlaid with the settings in `path`. Not yet validated.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_file(path, 0)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if t.lr_boundary > t.epochs {
            return Err(Error::Config(format!(
                "train.lr_boundary {} is outside [0, {}]",
                t.lr_boundary, t.epochs
            )));
        }
        if !(t.lr > 0.0) || !(t.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) || !(t.adam.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.metrics.thresholds_mm.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("metrics.f_thresholds_mm must be positive".into()));
        }
        if self.metrics.workers == 0 {
            return Err(Error::Config("metrics.workers must be positive".into()));
        }
        for (key, p) in [("assets.regressor", &self.regressor), ("assets.faces", &self.faces)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Asset(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn regressor(&self) -> Result<JointRegressor> {
        let m = &self.model;
        match &self.regressor {
            Some(p) => JointRegressor::load(p, m.tip_indices.clone(), m.joint_order.clone()),
            None => JointRegressor::synthetic(
                self.regressor_seed,
                m.regressed_joints(),
                m.vertices,
                m.tip_indices.clone(),
                m.joint_order.clone(),
            ),
        }
    }

    pub fn faces(&self) -> Result<Option<Vec<[usize; 3]>>> {
        self.faces.as_deref().map(crate::data::load_faces).transpose()
    }

    pub fn network(&self) -> Result<HandNet> {
        HandNet::new(self.model.clone(), self.regressor()?)
    }

    /// Reduced-width setup that trains at interactive speed: 64-pixel
    /// crops, narrow attention, short schedule. Output shapes match the
    /// default model.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.backbone = BackboneConfig {
            stage_channels: vec![8, 16, 32, 64, 128],
            input_size: 64,
            ..Default::default()
        };
        c.model.heads = 2;
        c.model.d_k = vec![16, 8, 4];
        c.train.epochs = 500;
        c.train.lr_boundary = 250;
        c.train.lr = 3e-3;
        c.train.lr_after = 3e-4;
        c
    }
}

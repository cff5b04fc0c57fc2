//! Experiment orchestration: a flat `key: value` config format with a
//! canonical echo, seeded substreams, staged run/group drivers that persist
//! their artifacts under a content-addressed run id, and plot-ready
//! aggregation of evaluation reports.

use std::error::Error;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::datasets::{generate_glyph_dataset, split_classes, GlyphSpec};
use crate::detection::{
    head_specs_from_boxes, make_training_scenes, n_detection_classes, sample_detection_episode,
    telemetry_csv, train_detector, yolomaml_episode_f1, yolomaml_train, Detector, SceneSpec,
    YoloMamlConfig,
};
use crate::episodes::EpisodeSpec;
use crate::methods::{eval_loop, mean_ci95, train_loop, EvalReport, Method, Model, TrainConfig};
use crate::nn::BackboneConfig;
use crate::rng::{fnv1a64, SeedTree};
use crate::tensor::{run_gradcheck_suite, Tensor};

pub const DEFAULT_SEED: u64 = 10;
/// Wall-clock ceiling for a single CLI invocation.
pub const MAX_WALL_SECONDS: u64 = 2 * 60 * 60;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key: value', got '{text}'")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {details}")]
    BadValue {
        line: usize,
        key: String,
        details: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{method} adapts a fixed-width head, so evaluation must keep the training way count ({train} != {eval})")]
    WayChange {
        method: String,
        train: usize,
        eval: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn Error + Send + Sync>,
    },
    #[error("wall-clock budget exhausted after {elapsed_secs}s (before stage '{stage}')")]
    TimedOut {
        stage: &'static str,
        elapsed_secs: u64,
    },
    #[error("need at least 2 values for a confidence interval, got {0}")]
    TooFewForCi(usize),
    #[error("eval seeds disagree across reports ({0} vs {1}); refusing to aggregate")]
    MixedEvalSeeds(u64, u64),
    #[error("unsupported plot axis '{0}' (use k_shot, n_way, or noise_swaps)")]
    BadPlotAxis(String),
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn stage_err<E: Error + Send + Sync + 'static>(
    stage: &'static str,
) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------- config

/// Full experiment description. The textual form is flat `key: value`
/// lines with at most one dotted nesting level; `echo()` is the canonical
/// serialization and feeds the run id hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: String,
    pub seed: u64,
    pub output_dir: String,
    // data.*
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub ratios: (f64, f64, f64),
    // model.*
    pub blocks: usize,
    pub channels: usize,
    // episode.*
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    // train.*
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub meta_lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub meta_batch: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub pretrain_batch: usize,
    pub augment: bool,
    // eval.* (way/shot/query default to the training episode shape)
    pub eval_n_way: Option<usize>,
    pub eval_k_shot: Option<usize>,
    pub eval_n_query: Option<usize>,
    pub eval_tasks: usize,
    pub eval_seed: u64,
    pub noise_swaps: usize,
    // det.*
    pub det_image_size: usize,
    pub det_n_way: usize,
    pub det_k_support: usize,
    pub det_q_query: usize,
    pub det_inner_lr: f64,
    pub det_inner_steps: usize,
    pub det_first_order: bool,
    pub det_meta_batch: usize,
    pub det_meta_lr: f64,
    pub det_epochs: usize,
    pub det_episodes_per_epoch: usize,
    pub det_pretrain_epochs: usize,
    pub det_pretrain_images: usize,
    pub det_pretrain_batch: usize,
    pub det_pretrain_lr: f64,
    pub det_eval_tasks: usize,
    pub det_conf_thresh: f64,
    pub det_nms_iou: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: "proto".into(),
            seed: DEFAULT_SEED,
            output_dir: "runs".into(),
            n_classes: 80,
            samples_per_class: 20,
            image_size: 28,
            ratios: (0.64, 0.16, 0.2),
            blocks: 4,
            channels: 64,
            n_way: 5,
            k_shot: 5,
            n_query: 16,
            epochs: 10,
            episodes_per_epoch: 100,
            val_episodes: 100,
            meta_lr: 1e-3,
            inner_lr: 0.01,
            inner_steps: 2,
            first_order: false,
            meta_batch: 4,
            finetune_steps: 100,
            finetune_lr: 0.01,
            pretrain_batch: 64,
            augment: false,
            eval_n_way: None,
            eval_k_shot: None,
            eval_n_query: None,
            eval_tasks: 600,
            eval_seed: DEFAULT_SEED,
            noise_swaps: 0,
            det_image_size: 64,
            det_n_way: 3,
            det_k_support: 2,
            det_q_query: 2,
            det_inner_lr: 0.01,
            det_inner_steps: 2,
            det_first_order: false,
            det_meta_batch: 2,
            det_meta_lr: 1e-3,
            det_epochs: 500,
            det_episodes_per_epoch: 1,
            det_pretrain_epochs: 25,
            det_pretrain_images: 160,
            det_pretrain_batch: 16,
            det_pretrain_lr: 1e-3,
            det_eval_tasks: 20,
            det_conf_thresh: 0.25,
            det_nms_iou: 0.5,
        }
    }
}

macro_rules! parse_as {
    ($value:expr, $ty:ty) => {
        $value
            .parse::<$ty>()
            .map_err(|e| format!("{e} (got '{}')", $value))
    };
}

impl ExperimentConfig {
    /// Applies one `key = value` pair; the error string carries no line
    /// context (the callers add it).
    fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        let v = value.trim();
        match key {
            "method" => self.method = v.to_string(),
            "seed" => self.seed = parse_as!(v, u64)?,
            "output_dir" => self.output_dir = v.to_string(),
            "data.n_classes" => self.n_classes = parse_as!(v, usize)?,
            "data.samples_per_class" => self.samples_per_class = parse_as!(v, usize)?,
            "data.image_size" => self.image_size = parse_as!(v, usize)?,
            "data.ratios" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(SetError(format!("expected three ratios, got '{v}'")));
                }
                self.ratios = (
                    parse_as!(parts[0], f64)?,
                    parse_as!(parts[1], f64)?,
                    parse_as!(parts[2], f64)?,
                );
            }
            "model.blocks" => self.blocks = parse_as!(v, usize)?,
            "model.channels" => self.channels = parse_as!(v, usize)?,
            "episode.n_way" => self.n_way = parse_as!(v, usize)?,
            "episode.k_shot" => self.k_shot = parse_as!(v, usize)?,
            "episode.n_query" => self.n_query = parse_as!(v, usize)?,
            "train.epochs" => self.epochs = parse_as!(v, usize)?,
            "train.episodes_per_epoch" => self.episodes_per_epoch = parse_as!(v, usize)?,
            "train.val_episodes" => self.val_episodes = parse_as!(v, usize)?,
            "train.meta_lr" => self.meta_lr = parse_as!(v, f64)?,
            "train.inner_lr" => self.inner_lr = parse_as!(v, f64)?,
            "train.inner_steps" => self.inner_steps = parse_as!(v, usize)?,
            "train.first_order" => self.first_order = parse_as!(v, bool)?,
            "train.meta_batch" => self.meta_batch = parse_as!(v, usize)?,
            "train.finetune_steps" => self.finetune_steps = parse_as!(v, usize)?,
            "train.finetune_lr" => self.finetune_lr = parse_as!(v, f64)?,
            "train.pretrain_batch" => self.pretrain_batch = parse_as!(v, usize)?,
            "train.augment" => self.augment = parse_as!(v, bool)?,
            "eval.n_way" => self.eval_n_way = Some(parse_as!(v, usize)?),
            "eval.k_shot" => self.eval_k_shot = Some(parse_as!(v, usize)?),
            "eval.n_query" => self.eval_n_query = Some(parse_as!(v, usize)?),
            "eval.tasks" => self.eval_tasks = parse_as!(v, usize)?,
            "eval.seed" => self.eval_seed = parse_as!(v, u64)?,
            "eval.noise_swaps" => self.noise_swaps = parse_as!(v, usize)?,
            "det.image_size" => self.det_image_size = parse_as!(v, usize)?,
            "det.n_way" => self.det_n_way = parse_as!(v, usize)?,
            "det.k_support" => self.det_k_support = parse_as!(v, usize)?,
            "det.q_query" => self.det_q_query = parse_as!(v, usize)?,
            "det.inner_lr" => self.det_inner_lr = parse_as!(v, f64)?,
            "det.inner_steps" => self.det_inner_steps = parse_as!(v, usize)?,
            "det.first_order" => self.det_first_order = parse_as!(v, bool)?,
            "det.meta_batch" => self.det_meta_batch = parse_as!(v, usize)?,
            "det.meta_lr" => self.det_meta_lr = parse_as!(v, f64)?,
            "det.epochs" => self.det_epochs = parse_as!(v, usize)?,
            "det.episodes_per_epoch" => self.det_episodes_per_epoch = parse_as!(v, usize)?,
            "det.pretrain_epochs" => self.det_pretrain_epochs = parse_as!(v, usize)?,
            "det.pretrain_images" => self.det_pretrain_images = parse_as!(v, usize)?,
            "det.pretrain_batch" => self.det_pretrain_batch = parse_as!(v, usize)?,
            "det.pretrain_lr" => self.det_pretrain_lr = parse_as!(v, f64)?,
            "det.eval_tasks" => self.det_eval_tasks = parse_as!(v, usize)?,
            "det.conf_thresh" => self.det_conf_thresh = parse_as!(v, f64)?,
            "det.nms_iou" => self.det_nms_iou = parse_as!(v, f64)?,
            _ => return Err(SetError::unknown()),
        }
        Ok(())
    }

    /// Evaluation episode shape; unset fields mirror the training shape.
    pub fn eval_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.eval_n_way.unwrap_or(self.n_way),
            k_shot: self.eval_k_shot.unwrap_or(self.k_shot),
            n_query: self.eval_n_query.unwrap_or(self.n_query),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            spec: EpisodeSpec {
                n_way: self.n_way,
                k_shot: self.k_shot,
                n_query: self.n_query,
            },
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            val_episodes: self.val_episodes,
            meta_lr: self.meta_lr,
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            first_order: self.first_order,
            meta_batch: self.meta_batch,
            finetune_steps: self.finetune_steps,
            finetune_lr: self.finetune_lr,
            pretrain_batch: self.pretrain_batch,
            augment: self.augment,
        }
    }

    pub fn yolomaml_config(&self) -> YoloMamlConfig {
        YoloMamlConfig {
            n_way: self.det_n_way,
            k_support: self.det_k_support,
            q_query: self.det_q_query,
            inner_lr: self.det_inner_lr,
            inner_steps: self.det_inner_steps,
            first_order: self.det_first_order,
            meta_batch: self.det_meta_batch,
            meta_lr: self.det_meta_lr,
            epochs: self.det_epochs,
            episodes_per_epoch: self.det_episodes_per_epoch,
            scene: SceneSpec {
                image_size: self.det_image_size,
                ..SceneSpec::default()
            },
        }
    }

    /// Canonical serialization: every key, fixed order, resolved values.
    pub fn echo(&self) -> String {
        let e = self.eval_spec();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(&v);
            s.push('\n');
        };
        put("method", self.method.clone());
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.clone());
        put("data.n_classes", self.n_classes.to_string());
        put("data.samples_per_class", self.samples_per_class.to_string());
        put("data.image_size", self.image_size.to_string());
        put(
            "data.ratios",
            format!("{},{},{}", self.ratios.0, self.ratios.1, self.ratios.2),
        );
        put("model.blocks", self.blocks.to_string());
        put("model.channels", self.channels.to_string());
        put("episode.n_way", self.n_way.to_string());
        put("episode.k_shot", self.k_shot.to_string());
        put("episode.n_query", self.n_query.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.episodes_per_epoch", self.episodes_per_epoch.to_string());
        put("train.val_episodes", self.val_episodes.to_string());
        put("train.meta_lr", self.meta_lr.to_string());
        put("train.inner_lr", self.inner_lr.to_string());
        put("train.inner_steps", self.inner_steps.to_string());
        put("train.first_order", self.first_order.to_string());
        put("train.meta_batch", self.meta_batch.to_string());
        put("train.finetune_steps", self.finetune_steps.to_string());
        put("train.finetune_lr", self.finetune_lr.to_string());
        put("train.pretrain_batch", self.pretrain_batch.to_string());
        put("train.augment", self.augment.to_string());
        put("eval.n_way", e.n_way.to_string());
        put("eval.k_shot", e.k_shot.to_string());
        put("eval.n_query", e.n_query.to_string());
        put("eval.tasks", self.eval_tasks.to_string());
        put("eval.seed", self.eval_seed.to_string());
        put("eval.noise_swaps", self.noise_swaps.to_string());
        put("det.image_size", self.det_image_size.to_string());
        put("det.n_way", self.det_n_way.to_string());
        put("det.k_support", self.det_k_support.to_string());
        put("det.q_query", self.det_q_query.to_string());
        put("det.inner_lr", self.det_inner_lr.to_string());
        put("det.inner_steps", self.det_inner_steps.to_string());
        put("det.first_order", self.det_first_order.to_string());
        put("det.meta_batch", self.det_meta_batch.to_string());
        put("det.meta_lr", self.det_meta_lr.to_string());
        put("det.epochs", self.det_epochs.to_string());
        put(
            "det.episodes_per_epoch",
            self.det_episodes_per_epoch.to_string(),
        );
        put("det.pretrain_epochs", self.det_pretrain_epochs.to_string());
        put("det.pretrain_images", self.det_pretrain_images.to_string());
        put("det.pretrain_batch", self.det_pretrain_batch.to_string());
        put("det.pretrain_lr", self.det_pretrain_lr.to_string());
        put("det.eval_tasks", self.det_eval_tasks.to_string());
        put("det.conf_thresh", self.det_conf_thresh.to_string());
        put("det.nms_iou", self.det_nms_iou.to_string());
        s
    }

    /// Sanity rules that don't need data. Way changes are rejected for the
    /// gradient-adaptation methods because their episode heads are sized by
    /// the training way count.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let is_yolomaml = self.method == "yolomaml";
        if !is_yolomaml && Method::parse(&self.method).is_none() {
            return Err(ConfigError::Invalid(format!(
                "unknown method '{}'",
                self.method
            )));
        }
        let inv = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 {
            return inv(format!(
                "episode shape {}x{}x{} needs n_way >= 2, k_shot >= 1, n_query >= 1",
                self.n_way, self.k_shot, self.n_query
            ));
        }
        let e = self.eval_spec();
        if e.n_way < 2 || e.k_shot == 0 || e.n_query == 0 {
            return inv("evaluation episode shape is degenerate".into());
        }
        let rs = [self.ratios.0, self.ratios.1, self.ratios.2];
        if rs.iter().any(|&r| r <= 0.0) || (rs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return inv(format!("split ratios {rs:?} must be positive and sum to 1"));
        }
        if self.blocks == 0 || self.channels == 0 {
            return inv("model needs at least one block and one channel".into());
        }
        if self.image_size < 8 {
            return inv(format!("image size {} is too small", self.image_size));
        }
        if self.eval_tasks < 2 {
            return inv(format!(
                "eval.tasks = {} cannot support a confidence interval",
                self.eval_tasks
            ));
        }
        match self.method.as_str() {
            "maml" => {
                if e.n_way != self.n_way {
                    return Err(ConfigError::WayChange {
                        method: self.method.clone(),
                        train: self.n_way,
                        eval: e.n_way,
                    });
                }
                if self.inner_steps == 0 {
                    return inv("maml needs at least one inner step".into());
                }
            }
            "yolomaml" => {
                if let Some(w) = self.eval_n_way {
                    if w != self.det_n_way {
                        return Err(ConfigError::WayChange {
                            method: self.method.clone(),
                            train: self.det_n_way,
                            eval: w,
                        });
                    }
                }
                if self.det_n_way < 2 || self.det_inner_steps == 0 {
                    return inv("yolomaml needs det.n_way >= 2 and det.inner_steps >= 1".into());
                }
                if self.det_image_size < 16 || self.det_image_size % 16 != 0 {
                    return inv(format!(
                        "det.image_size {} must be a positive multiple of 16",
                        self.det_image_size
                    ));
                }
                if self.det_eval_tasks < 2 {
                    return inv("det.eval_tasks must be at least 2".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

struct SetError(String);

impl SetError {
    fn unknown() -> Self {
        SetError(String::new())
    }
    fn is_unknown(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        SetError(s)
    }
}

/// Parses the textual config format: `key: value` lines, `#` comments,
/// blank lines ignored, later keys override earlier ones. Any input text
/// yields either a config or a line-numbered error -- never a panic.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once(':') else {
            return Err(ConfigError::BadLine {
                line,
                text: body.to_string(),
            });
        };
        let key = key.trim();
        match cfg.set(key, value) {
            Ok(()) => {}
            Err(e) if e.is_unknown() => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
            Err(e) => {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    details: e.0,
                })
            }
        }
    }
    Ok(cfg)
}

/// Applies `key=value` command-line overrides on top of a parsed config.
pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    overrides: &[String],
) -> Result<(), ConfigError> {
    for (i, item) in overrides.iter().enumerate() {
        let line = i + 1;
        let Some((key, value)) = item.split_once('=') else {
            return Err(ConfigError::BadLine {
                line,
                text: item.clone(),
            });
        };
        let key = key.trim();
        match cfg.set(key, value) {
            Ok(()) => {}
            Err(e) if e.is_unknown() => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
            Err(e) => {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    details: e.0,
                })
            }
        }
    }
    Ok(())
}

/// Run id: prefix of the canonical config hash, so identical configs land
/// in the same directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    format!("{:016x}", fnv1a64(cfg.echo().as_bytes()))[..12].to_string()
}

// ---------------------------------------------------------------- seeds

/// Named substreams fanned out from the experiment seed. Data and split
/// streams depend only on the seed, so every method in a group sees the
/// same dataset and class split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub data: u64,
    pub split: u64,
    pub model: u64,
    pub train: u64,
}

pub fn seed_streams(seed: u64) -> SeedStreams {
    let tree = SeedTree::new(seed);
    SeedStreams {
        data: tree.derive("data").seed(),
        split: tree.derive("split").seed(),
        model: tree.derive("model").seed(),
        train: tree.derive("train").seed(),
    }
}

// ---------------------------------------------------------------- budget

/// Wall-clock guardrail checked between pipeline stages.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    start: Instant,
    limit: Duration,
}

impl Budget {
    pub fn seconds(limit: u64) -> Self {
        Budget {
            start: Instant::now(),
            limit: Duration::from_secs(limit),
        }
    }

    pub fn check(&self, stage: &'static str) -> Result<(), HarnessError> {
        let elapsed = self.start.elapsed();
        if elapsed > self.limit {
            Err(HarnessError::TimedOut {
                stage,
                elapsed_secs: elapsed.as_secs(),
            })
        } else {
            Ok(())
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget::seconds(MAX_WALL_SECONDS)
    }
}

// ---------------------------------------------------------------- checkpoints

const CKPT_MAGIC: &[u8; 4] = b"FWC1";

/// Flat parameter snapshot: magic, tensor count, then per tensor the
/// little-endian shape and f32 data.
pub fn save_checkpoint(path: &Path, params: &[Tensor<f32>]) -> Result<(), HarnessError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let shape = p.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Tensor<f32>>, HarnessError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(io_err(path))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], HarnessError> {
        if at + n > buf.len() {
            return Err(HarnessError::BadCheckpoint(format!(
                "truncated at byte {at}"
            )));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != CKPT_MAGIC {
        return Err(HarnessError::BadCheckpoint("bad magic".into()));
    }
    let n_tensors = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if ndim > 8 {
            return Err(HarnessError::BadCheckpoint(format!("ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 31) {
            return Err(HarnessError::BadCheckpoint(format!("numel {numel}")));
        }
        let raw = take(4 * numel)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(
            Tensor::from_vec(data, &shape)
                .map_err(|e| HarnessError::BadCheckpoint(e.to_string()))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------- reports

/// `mean ± half-width` in percent, e.g. "75.00 ± 0.00". Needs two values.
pub fn report_ci(values: &[f64]) -> Result<String, HarnessError> {
    if values.len() < 2 {
        return Err(HarnessError::TooFewForCi(values.len()));
    }
    let (mean, ci) = mean_ci95(values);
    Ok(format!("{:.2} ± {:.2}", mean * 100.0, ci * 100.0))
}

/// Few-shot detection evaluation summary (micro-F1 per task).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetReport {
    pub method: String,
    pub n_way: usize,
    pub k_support: usize,
    pub q_query: usize,
    pub n_tasks: usize,
    pub eval_seed: u64,
    pub mean_f1: f64,
    pub ci95: f64,
    pub task_f1s: Vec<f64>,
}

// ---------------------------------------------------------------- runs

pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub method: String,
    /// Mean metric (accuracy or F1) with its CI half-width.
    pub mean: f64,
    pub ci95: f64,
    pub summary: String,
}

/// Interleaved shape-color split for detection: every third class is held
/// out, so each shape and each color appears on both sides.
pub fn detection_split() -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_detection_classes() {
        if c % 3 == 2 {
            test.push(c);
        } else {
            train.push(c);
        }
    }
    (train, test)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Runs one experiment end to end and persists its artifacts under
/// `<output_dir>/<run_id>/`: `config.echo`, `history.csv` or
/// `telemetry.csv`, `eval.json`, and `checkpoint.bin`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    budget: &Budget,
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let run_id = config_hash(cfg);
    let dir = PathBuf::from(&cfg.output_dir).join(&run_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_text(&dir.join("config.echo"), &cfg.echo())?;
    let outcome = if cfg.method == "yolomaml" {
        run_detection_experiment(cfg, budget, &run_id, &dir)?
    } else {
        run_classification_experiment(cfg, budget, &run_id, &dir)?
    };
    Ok(outcome)
}

fn run_classification_experiment(
    cfg: &ExperimentConfig,
    budget: &Budget,
    run_id: &str,
    dir: &Path,
) -> Result<RunOutcome, HarnessError> {
    let streams = seed_streams(cfg.seed);
    budget.check("data")?;
    let glyphs = GlyphSpec {
        n_classes: cfg.n_classes,
        samples_per_class: cfg.samples_per_class,
        image_size: cfg.image_size,
        ..GlyphSpec::default()
    };
    let set = generate_glyph_dataset(&glyphs, streams.data);
    let split =
        split_classes(cfg.n_classes, cfg.ratios, streams.split).map_err(stage_err("split"))?;

    budget.check("train")?;
    let method = Method::parse(&cfg.method).expect("validated");
    let backbone = BackboneConfig {
        blocks: cfg.blocks,
        channels: cfg.channels,
        in_channels: 1,
        image_size: cfg.image_size,
        keep_spatial: 0,
    };
    let mut rng = SeedTree::new(streams.model).rng();
    let model: Model<f32> = Model::new(method, backbone, &mut rng);
    let tcfg = cfg.train_config();
    let (model, history) =
        train_loop(model, &set, &split, &tcfg, streams.train).map_err(stage_err("train"))?;

    budget.check("eval")?;
    let report = eval_loop(
        &model,
        &set,
        &split.test,
        cfg.eval_spec(),
        cfg.eval_tasks,
        cfg.eval_seed,
        cfg.noise_swaps,
        &tcfg,
    )
    .map_err(stage_err("eval"))?;

    budget.check("persist")?;
    let mut hist = String::from("epoch,train_loss,val_acc\n");
    for row in &history {
        hist.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.epoch, row.train_loss, row.val_acc
        ));
    }
    write_text(&dir.join("history.csv"), &hist)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(stage_err("persist"))?;
    write_text(&dir.join("eval.json"), &json)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &model.params())?;
    let summary = format!("{}  {}", report.method, report.format_line());
    Ok(RunOutcome {
        run_id: run_id.to_string(),
        dir: dir.to_path_buf(),
        method: report.method.clone(),
        mean: report.mean_accuracy,
        ci95: report.ci95,
        summary,
    })
}

fn run_detection_experiment(
    cfg: &ExperimentConfig,
    budget: &Budget,
    run_id: &str,
    dir: &Path,
) -> Result<RunOutcome, HarnessError> {
    let streams = seed_streams(cfg.seed);
    let (train_pool, test_pool) = detection_split();
    let scene = SceneSpec {
        image_size: cfg.det_image_size,
        ..SceneSpec::default()
    };

    budget.check("pretrain")?;
    let images = make_training_scenes(
        &train_pool,
        cfg.det_pretrain_images,
        &scene,
        streams.data,
    );
    let dims: Vec<(f64, f64)> = images
        .iter()
        .flat_map(|im| im.boxes.iter().map(|b| (b.w, b.h)))
        .collect();
    let specs = head_specs_from_boxes(&dims, cfg.det_image_size);
    let mut rng = SeedTree::new(streams.model).rng();
    let det: Detector<f32> = Detector::new(train_pool.len(), specs, &mut rng);
    let (base, _pre_history) = train_detector(
        det,
        &images,
        cfg.det_pretrain_epochs,
        cfg.det_pretrain_batch,
        cfg.det_pretrain_lr,
        streams.train,
    )
    .map_err(stage_err("pretrain"))?;

    budget.check("meta-train")?;
    let ycfg = cfg.yolomaml_config();
    let (meta, telemetry) =
        yolomaml_train(&base, &train_pool, &ycfg, streams.train).map_err(stage_err("meta-train"))?;

    budget.check("eval")?;
    let tree = SeedTree::new(cfg.eval_seed).derive("det-eval");
    let mut f1s = Vec::with_capacity(cfg.det_eval_tasks);
    for t in 0..cfg.det_eval_tasks {
        let mut erng = tree.derive_indexed("task", t as u64).rng();
        let ep = sample_detection_episode(
            &test_pool,
            cfg.det_n_way,
            cfg.det_k_support,
            cfg.det_q_query,
            &scene,
            &mut erng,
        )
        .map_err(stage_err("eval"))?;
        let f1 = yolomaml_episode_f1(
            &meta,
            &ep,
            cfg.det_inner_lr,
            cfg.det_inner_steps,
            cfg.det_conf_thresh,
            cfg.det_nms_iou,
        )
        .map_err(stage_err("eval"))?;
        f1s.push(f1);
    }
    let (mean, ci) = mean_ci95(&f1s);
    let report = DetReport {
        method: "yolomaml".into(),
        n_way: cfg.det_n_way,
        k_support: cfg.det_k_support,
        q_query: cfg.det_q_query,
        n_tasks: cfg.det_eval_tasks,
        eval_seed: cfg.eval_seed,
        mean_f1: mean,
        ci95: ci,
        task_f1s: f1s,
    };

    budget.check("persist")?;
    write_text(&dir.join("telemetry.csv"), &telemetry_csv(&telemetry))?;
    let json =
        serde_json::to_string_pretty(&report).map_err(stage_err("persist"))?;
    write_text(&dir.join("eval.json"), &json)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &meta.all_params())?;
    let summary = format!(
        "yolomaml  F1 {:.2} ± {:.2} ({} tasks)",
        mean * 100.0,
        ci * 100.0,
        report.n_tasks
    );
    Ok(RunOutcome {
        run_id: run_id.to_string(),
        dir: dir.to_path_buf(),
        method: "yolomaml".into(),
        mean,
        ci95: ci,
        summary,
    })
}

// ---------------------------------------------------------------- groups

pub struct GroupOutcome {
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<(String, HarnessError)>,
}

/// Runs one method after another under a shared config (hence shared data,
/// split, and eval seed). A failing method is reported and skipped; only a
/// blown wall-clock budget aborts the whole group.
pub fn run_group(
    base: &ExperimentConfig,
    methods: &[String],
    budget: &Budget,
) -> Result<GroupOutcome, HarnessError> {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for m in methods {
        budget.check("group")?;
        let mut cfg = base.clone();
        cfg.method = m.clone();
        match run_experiment(&cfg, budget) {
            Ok(outcome) => runs.push(outcome),
            Err(e @ HarnessError::TimedOut { .. }) => return Err(e),
            Err(e) => failures.push((m.clone(), e)),
        }
    }
    Ok(GroupOutcome { runs, failures })
}

pub fn group_table(group: &GroupOutcome) -> String {
    let mut s = String::new();
    for r in &group.runs {
        s.push_str(&format!("{:<12} {}\n", r.method, r.summary));
    }
    for (m, e) in &group.failures {
        s.push_str(&format!("{m:<12} FAILED: {e}\n"));
    }
    s
}

// ---------------------------------------------------------------- plots

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub mean: f64,
    pub ci95: f64,
    pub method: String,
    pub config_hash: String,
}

/// Extracts plot points from evaluation reports keyed by their run hash.
/// All reports must share one eval seed; mixing seeds would make the
/// points incomparable.
pub fn plot_points(
    xkey: &str,
    items: &[(String, EvalReport)],
) -> Result<Vec<PlotPoint>, HarnessError> {
    if let Some(((_, first), rest)) = items.split_first() {
        for (_, r) in rest {
            if r.eval_seed != first.eval_seed {
                return Err(HarnessError::MixedEvalSeeds(first.eval_seed, r.eval_seed));
            }
        }
    }
    items
        .iter()
        .map(|(hash, r)| {
            let x = match xkey {
                "k_shot" => r.k_shot as f64,
                "n_way" => r.n_way as f64,
                "noise_swaps" => r.noise_swaps as f64,
                other => return Err(HarnessError::BadPlotAxis(other.to_string())),
            };
            Ok(PlotPoint {
                x,
                mean: r.mean_accuracy,
                ci95: r.ci95,
                method: r.method.clone(),
                config_hash: hash.clone(),
            })
        })
        .collect()
}

/// Deterministic plot CSV: fixed header, fixed float format, rows sorted
/// by method then x then hash. Same points in, same bytes out.
pub fn emit_plot_data(points: &[PlotPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.x.total_cmp(&b.x))
            .then(a.config_hash.cmp(&b.config_hash))
    });
    let mut s = String::from("x,mean,ci95,method,config_hash\n");
    for p in &sorted {
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            p.x, p.mean, p.ci95, p.method, p.config_hash
        ));
    }
    s
}

/// Loads `eval.json` files from run directories and emits the plot CSV.
/// The directory name doubles as the config hash.
pub fn plot_from_dirs(dirs: &[PathBuf], xkey: &str) -> Result<String, HarnessError> {
    let mut items = Vec::new();
    for d in dirs {
        let path = d.join("eval.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| HarnessError::Stage {
            stage: "plot",
            source: format!("{}: not a classification report: {e}", path.display()).into(),
        })?;
        let hash = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into());
        items.push((hash, report));
    }
    Ok(emit_plot_data(&plot_points(xkey, &items)?))
}

// ---------------------------------------------------------------- gradcheck

/// Finite-difference sweep over every differentiable op; returns the
/// printable lines and whether all of them passed.
pub fn gradcheck_report(n_seeds: u64) -> (String, bool) {
    let seeds: Vec<u64> = (0..n_seeds.max(1)).collect();
    let lines = run_gradcheck_suite(&seeds);
    let mut ok = true;
    let mut s = String::new();
    for l in &lines {
        ok &= l.passed;
        s.push_str(&format!(
            "{:<24} max_rel {:>9.2e}  {}{}\n",
            l.op,
            l.max_rel,
            if l.passed { "ok" } else { "FAIL" },
            if l.detail.is_empty() {
                String::new()
            } else {
                format!("  ({})", l.detail)
            }
        ));
    }
    (s, ok)
}

//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors carrying the offending line number. [`RunConfig::echo`] writes
//! every key, and parsing the echo reproduces the configuration exactly.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::deform::PartGrid;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{LayerSpec, ModelConfig};
use crate::train::TrainSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub data: SyntheticSpec,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            schedule: TrainSchedule::default(),
            data: SyntheticSpec::default(),
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "num_classes",
    "protos_per_class",
    "proto_rows",
    "proto_cols",
    "dilation",
    "backbone",
    "offset_hidden",
    "epsilon",
    "nd",
    "interior_only",
    "margin_phi",
    "lambda_sep",
    "lambda_clst",
    "lambda_ortho",
    "lambda_l1_last",
    "warmup1_epochs",
    "warmup2_epochs",
    "joint_epochs",
    "lr_backbone",
    "lr_prototypes",
    "lr_offsets",
    "lr_last",
    "lr_decay",
    "lr_decay_every",
    "momentum",
    "batch_size",
    "projection_epochs",
    "last_layer_epochs",
    "mean",
    "std",
    "train_per_class",
    "test_per_class",
    "pose_jitter",
];

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn triple(v: &str) -> std::result::Result<[f32; 3], String> {
    let xs: Vec<f32> = v.split(',').map(|x| scalar(x.trim())).collect::<std::result::Result<_, _>>()?;
    xs.try_into().map_err(|_| format!("expected three comma-separated values, got {v:?}"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| scalar(x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashMap::new();
        let (mut rows, mut cols, mut dil) = (cfg.model.grid.rows, cfg.model.grid.cols, cfg.model.grid.dilation);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if let Some(first) = seen.insert(key.to_owned(), line) {
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            let r: std::result::Result<(), String> = (|| {
                let m = &mut cfg.model;
                let w = &mut cfg.weights;
                let s = &mut cfg.schedule;
                match key {
                    "seed" => cfg.seed = scalar(value)?,
                    "image_size" => m.image_size = scalar(value)?,
                    "num_classes" => m.num_classes = scalar(value)?,
                    "protos_per_class" => m.protos_per_class = scalar(value)?,
                    "proto_rows" => rows = scalar(value)?,
                    "proto_cols" => cols = scalar(value)?,
                    "dilation" => dil = scalar(value)?,
                    "backbone" => m.backbone = LayerSpec::parse_list(value).map_err(|e| e.to_string())?,
                    "offset_hidden" => m.offset_hidden = scalar(value)?,
                    "epsilon" => m.epsilon = scalar(value)?,
                    "nd" => m.deformable = !boolean(value)?,
                    "interior_only" => m.interior_only = boolean(value)?,
                    "margin_phi" => w.margin_phi = scalar(value)?,
                    "lambda_sep" => w.lambda_sep = scalar(value)?,
                    "lambda_clst" => w.lambda_clst = scalar(value)?,
                    "lambda_ortho" => w.lambda_ortho = scalar(value)?,
                    "lambda_l1_last" => w.lambda_l1_last = scalar(value)?,
                    "warmup1_epochs" => s.warmup1_epochs = scalar(value)?,
                    "warmup2_epochs" => s.warmup2_epochs = scalar(value)?,
                    "joint_epochs" => s.joint_epochs = scalar(value)?,
                    "lr_backbone" => s.lr_backbone = scalar(value)?,
                    "lr_prototypes" => s.lr_prototypes = scalar(value)?,
                    "lr_offsets" => s.lr_offsets = scalar(value)?,
                    "lr_last" => s.lr_last = scalar(value)?,
                    "lr_decay" => s.lr_decay = scalar(value)?,
                    "lr_decay_every" => s.lr_decay_every = scalar(value)?,
                    "momentum" => s.momentum = scalar(value)?,
                    "batch_size" => s.batch_size = scalar(value)?,
                    "projection_epochs" => s.projection_epochs = list(value)?,
                    "last_layer_epochs" => s.last_layer_epochs = scalar(value)?,
                    "mean" => cfg.mean = triple(value)?,
                    "std" => cfg.std = triple(value)?,
                    "train_per_class" => cfg.data.train_per_class = scalar(value)?,
                    "test_per_class" => cfg.data.test_per_class = scalar(value)?,
                    "pose_jitter" => cfg.data.pose_jitter = scalar(value)?,
                    _ => unreachable!("key list checked above"),
                }
                Ok(())
            })();
            r.map_err(|m| err(format!("`{key}`: {m}")))?;
        }
        cfg.model.grid = PartGrid::new(rows, cols, dil)?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates shared values (seed, class count, image size) into the
    /// per-module structs.
    pub fn sync(&mut self) {
        self.schedule.seed = self.seed;
        self.data.seed = self.seed;
        self.data.num_classes = self.model.num_classes;
        self.data.image_size = self.model.image_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.gamma()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("bad normalization mean {:?} std {:?}", self.mean, self.std)));
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        let (m, w, s) = (&self.model, &self.weights, &self.schedule);
        let values: Vec<String> = vec![
            self.seed.to_string(),
            m.image_size.to_string(),
            m.num_classes.to_string(),
            m.protos_per_class.to_string(),
            m.grid.rows.to_string(),
            m.grid.cols.to_string(),
            m.grid.dilation.to_string(),
            LayerSpec::format_list(&m.backbone),
            m.offset_hidden.to_string(),
            m.epsilon.to_string(),
            (!m.deformable).to_string(),
            m.interior_only.to_string(),
            w.margin_phi.to_string(),
            w.lambda_sep.to_string(),
            w.lambda_clst.to_string(),
            w.lambda_ortho.to_string(),
            w.lambda_l1_last.to_string(),
            s.warmup1_epochs.to_string(),
            s.warmup2_epochs.to_string(),
            s.joint_epochs.to_string(),
            s.lr_backbone.to_string(),
            s.lr_prototypes.to_string(),
            s.lr_offsets.to_string(),
            s.lr_last.to_string(),
            s.lr_decay.to_string(),
            s.lr_decay_every.to_string(),
            s.momentum.to_string(),
            s.batch_size.to_string(),
            join(&s.projection_epochs),
            s.last_layer_epochs.to_string(),
            join(&self.mean),
            join(&self.std),
            self.data.train_per_class.to_string(),
            self.data.test_per_class.to_string(),
            self.data.pose_jitter.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}

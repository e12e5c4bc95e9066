//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Keys are
//! applied in order, so `model.preset` should come first when used. Unknown
//! keys are rejected by name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SplitSelection;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, EDGE_RADIUS};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub clip_norm: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub augment: bool,
    pub split: SplitSelection,
    /// Worker threads for the batch; 0 uses all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 4,
            steps: 200,
            warmup_steps: 0,
            seed: 0,
            precision: Precision::F32,
            clip_norm: 1.0,
            eval_every: 0,
            augment: true,
            split: SplitSelection::Only(crate::data::Split::Train),
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be >= 0, got {}",
                self.lr
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        let non_negative = |v: f64| v >= 0.0;
        if !non_negative(self.weight_decay) || !non_negative(self.clip_norm) {
            return Err(Error::Config(
                "weight decay and clip norm must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub edge_radius: usize,
    pub data_root: Option<PathBuf>,
    pub eval_split: SplitSelection,
    /// Pixels sampled per image for AUC; 0 uses every pixel.
    pub auc_pixels: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            edge_radius: EDGE_RADIUS,
            data_root: None,
            eval_split: SplitSelection::Only(crate::data::Split::Test),
            auc_pixels: 0,
            threshold: 0.5,
        }
    }
}

/// Every accepted key with a one-line description, for `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("model.preset", "default | desk: replaces every model.* key"),
    (
        "model.stem",
        "widths of the first three stem convolutions, e.g. 16,24,48",
    ),
    ("model.channels", "stage widths, e.g. 200,376,448"),
    ("model.depths", "blocks per stage, e.g. 2,2,6"),
    (
        "model.ratios1",
        "stage-1 global,local,identity channel fractions",
    ),
    (
        "model.ratios2",
        "stage-2 global,local,identity channel fractions",
    ),
    (
        "model.ratios3",
        "stage-3 global,local,identity channel fractions",
    ),
    (
        "model.local_kernels",
        "local-branch kernel per stage, e.g. 3,5,7",
    ),
    ("model.dw_kernel", "residual depthwise kernel"),
    ("model.ffn_ratio", "block feed-forward expansion"),
    (
        "model.merge_ffn_ratio",
        "patch-merge feed-forward expansion",
    ),
    ("model.decoder_width", "decoder width per stage"),
    ("train.lr", "initial learning rate"),
    (
        "train.weight_decay",
        "decoupled weight decay (matrices and kernels only)",
    ),
    ("train.batch_size", "samples per step"),
    ("train.steps", "optimizer steps"),
    (
        "train.warmup_steps",
        "linear warmup steps before cosine decay",
    ),
    (
        "train.seed",
        "seed for initialisation, batching and augmentation",
    ),
    ("train.precision", "f32 | f64"),
    ("train.clip_norm", "global gradient-norm cap; 0 disables"),
    (
        "train.eval_every",
        "evaluation cadence in steps; 0 = end only",
    ),
    ("train.augment", "true | false: flip and brightness jitter"),
    (
        "train.split",
        "train | test | all: samples used for training",
    ),
    ("train.threads", "worker threads; 0 = all cores"),
    ("loss.lambda1", "weight of the 1/16-scale term"),
    ("loss.lambda2", "weight of the 1/32-scale term"),
    ("loss.lambda3", "weight of the 1/64-scale term"),
    ("loss.lambda_final", "weight of the full-resolution term"),
    ("loss.lambda_edge", "weight of every edge-band term"),
    ("loss.edge_radius", "edge band radius at full resolution"),
    ("data.root", "corpus directory"),
    (
        "data.eval_split",
        "train | test | all: samples used for evaluation",
    ),
    (
        "data.auc_pixels",
        "pixels sampled per image for AUC; 0 = all",
    ),
    ("data.threshold", "probability threshold for binary masks"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse(key, v))
        .collect::<Result<_>>()?;
    items.try_into().map_err(|_| {
        Error::Config(format!(
            "{key}: expected {N} comma-separated values, got `{value}`"
        ))
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bb = &mut self.model.backbone;
        match key {
            "model.preset" => {
                self.model = match value {
                    "default" => ModelConfig::default(),
                    "desk" => ModelConfig::desk(),
                    other => {
                        return Err(Error::Config(format!(
                            "model.preset: unknown preset `{other}`"
                        )))
                    }
                }
            }
            "model.stem" => bb.stem = parse_list(key, value)?,
            "model.channels" => {
                let c: [usize; 3] = parse_list(key, value)?;
                for (st, c) in bb.stages.iter_mut().zip(c) {
                    st.channels = c;
                }
            }
            "model.depths" => {
                let d: [usize; 3] = parse_list(key, value)?;
                for (st, d) in bb.stages.iter_mut().zip(d) {
                    st.depth = d;
                }
            }
            "model.ratios1" => bb.stages[0].ratios = parse_list(key, value)?,
            "model.ratios2" => bb.stages[1].ratios = parse_list(key, value)?,
            "model.ratios3" => bb.stages[2].ratios = parse_list(key, value)?,
            "model.local_kernels" => {
                let k: [usize; 3] = parse_list(key, value)?;
                for (st, k) in bb.stages.iter_mut().zip(k) {
                    st.local_kernel = k;
                }
            }
            "model.dw_kernel" => bb.dw_kernel = parse(key, value)?,
            "model.ffn_ratio" => bb.ffn_ratio = parse(key, value)?,
            "model.merge_ffn_ratio" => bb.merge_ffn_ratio = parse(key, value)?,
            "model.decoder_width" => self.model.decoder_width = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.precision" => self.train.precision = value.parse()?,
            "train.clip_norm" => self.train.clip_norm = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.augment" => self.train.augment = parse(key, value)?,
            "train.split" => self.train.split = value.parse()?,
            "train.threads" => self.train.threads = parse(key, value)?,
            "loss.lambda1" => self.loss.stages[0] = parse(key, value)?,
            "loss.lambda2" => self.loss.stages[1] = parse(key, value)?,
            "loss.lambda3" => self.loss.stages[2] = parse(key, value)?,
            "loss.lambda_final" => self.loss.fused = parse(key, value)?,
            "loss.lambda_edge" => self.loss.edge = parse(key, value)?,
            "loss.edge_radius" => self.edge_radius = parse(key, value)?,
            "data.root" => self.data_root = Some(PathBuf::from(value)),
            "data.eval_split" => self.eval_split = value.parse()?,
            "data.auc_pixels" => self.auc_pixels = parse(key, value)?,
            "data.threshold" => self.threshold = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.edge_radius == 0 {
            return Err(Error::Config("loss.edge_radius must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("data.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`KEYS`] order (presets omitted).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let bb: &BackboneConfig = &self.model.backbone;
        let st = &bb.stages;
        let t = &self.train;
        let mut out = vec![
            ("model.stem", join(&bb.stem)),
            ("model.channels", join(&st.each_ref().map(|s| s.channels))),
            ("model.depths", join(&st.each_ref().map(|s| s.depth))),
            ("model.ratios1", join(&st[0].ratios)),
            ("model.ratios2", join(&st[1].ratios)),
            ("model.ratios3", join(&st[2].ratios)),
            (
                "model.local_kernels",
                join(&st.each_ref().map(|s| s.local_kernel)),
            ),
            ("model.dw_kernel", bb.dw_kernel.to_string()),
            ("model.ffn_ratio", bb.ffn_ratio.to_string()),
            ("model.merge_ffn_ratio", bb.merge_ffn_ratio.to_string()),
            ("model.decoder_width", self.model.decoder_width.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", t.precision.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.split", t.split.to_string()),
            ("train.threads", t.threads.to_string()),
            ("loss.lambda1", self.loss.stages[0].to_string()),
            ("loss.lambda2", self.loss.stages[1].to_string()),
            ("loss.lambda3", self.loss.stages[2].to_string()),
            ("loss.lambda_final", self.loss.fused.to_string()),
            ("loss.lambda_edge", self.loss.edge.to_string()),
            ("loss.edge_radius", self.edge_radius.to_string()),
        ];
        if let Some(root) = &self.data_root {
            out.push(("data.root", root.display().to_string()));
        }
        out.extend([
            ("data.eval_split", self.eval_split.to_string()),
            ("data.auc_pixels", self.auc_pixels.to_string()),
            ("data.threshold", self.threshold.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

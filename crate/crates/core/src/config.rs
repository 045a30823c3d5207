//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.pin_layers = 3
//! opt.lambda1 = 0.001
//! ```
//!
//! Every key has a default; unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{DEFAULT_BINS, DEFAULT_MIN_COUNT, DEFAULT_SPLIT};
use crate::model::{Activation, ModelConfig};
use crate::optim::{AdamConfig, FtrlConfig, OptimizerConfig, OptimizerKind};
use crate::train::{TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EVAL_EVERY, DEFAULT_MAX_STEPS, DEFAULT_PATIENCE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub pin_layers: usize,
    pub subspaces: usize,
    pub activation: Activation,

    pub batch_size: usize,
    pub eval_every_steps: u64,
    pub patience: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,

    pub ftrl: FtrlConfig,
    pub adam: AdamConfig,

    pub schema: Option<PathBuf>,
    /// Single file split into train/valid/test when `train`/`valid` are unset.
    pub path: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub delimiter: char,
    pub label: String,
    pub min_count: usize,
    pub bins: usize,
    pub split: (f64, f64, f64),
    pub split_seed: u64,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embedding_dim: 8,
            pin_layers: 3,
            subspaces: 1,
            activation: Activation::Linear,
            batch_size: DEFAULT_BATCH_SIZE,
            eval_every_steps: DEFAULT_EVAL_EVERY,
            patience: DEFAULT_PATIENCE,
            max_steps: DEFAULT_MAX_STEPS,
            seed: 0,
            optimizer: OptimizerKind::GftrlFtrl,
            ftrl: FtrlConfig::default(),
            adam: AdamConfig::default(),
            schema: None,
            path: None,
            train: None,
            valid: None,
            vocab: None,
            delimiter: ',',
            label: "label".into(),
            min_count: DEFAULT_MIN_COUNT,
            bins: DEFAULT_BINS,
            split: DEFAULT_SPLIT,
            split_seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.embedding_dim",
    "model.pin_layers",
    "model.subspaces",
    "model.activation",
    "train.batch_size",
    "train.eval_every_steps",
    "train.patience",
    "train.max_steps",
    "train.seed",
    "train.optimizer",
    "opt.alpha",
    "opt.beta",
    "opt.lambda1",
    "opt.lambda2",
    "opt.adam_lr",
    "opt.adam_beta1",
    "opt.adam_beta2",
    "opt.adam_epsilon",
    "data.schema",
    "data.path",
    "data.train",
    "data.valid",
    "data.vocab",
    "data.delimiter",
    "data.label",
    "data.min_count",
    "data.bins",
    "data.split",
    "data.split_seed",
    "out.dir",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_delimiter(value: &str) -> Result<char> {
    match value {
        "tab" | "\\t" => Ok('\t'),
        "comma" => Ok(','),
        _ => {
            let mut chars = value.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::Config(format!("`data.delimiter`: expected one character, got `{value}`"))),
            }
        }
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.embedding_dim" => self.embedding_dim = num(key, v)?,
            "model.pin_layers" => self.pin_layers = num(key, v)?,
            "model.subspaces" => self.subspaces = num(key, v)?,
            "model.activation" => self.activation = v.parse()?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.eval_every_steps" => self.eval_every_steps = num(key, v)?,
            "train.patience" => self.patience = num(key, v)?,
            "train.max_steps" => self.max_steps = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.optimizer" => self.optimizer = v.parse()?,
            "opt.alpha" => self.ftrl.alpha = num(key, v)?,
            "opt.beta" => self.ftrl.beta = num(key, v)?,
            "opt.lambda1" => self.ftrl.lambda1 = num(key, v)?,
            "opt.lambda2" => self.ftrl.lambda2 = num(key, v)?,
            "opt.adam_lr" => self.adam.learning_rate = num(key, v)?,
            "opt.adam_beta1" => self.adam.beta1 = num(key, v)?,
            "opt.adam_beta2" => self.adam.beta2 = num(key, v)?,
            "opt.adam_epsilon" => self.adam.epsilon = num(key, v)?,
            "data.schema" => self.schema = path(v),
            "data.path" => self.path = path(v),
            "data.train" => self.train = path(v),
            "data.valid" => self.valid = path(v),
            "data.vocab" => self.vocab = path(v),
            "data.delimiter" => self.delimiter = parse_delimiter(value)?,
            "data.label" => self.label = v.to_string(),
            "data.min_count" => self.min_count = num(key, v)?,
            "data.bins" => self.bins = num(key, v)?,
            "data.split" => {
                let parts: Vec<f64> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::Config(format!("`data.split`: expected three fractions, got `{v}`")));
                };
                self.split = (a, b, c);
            }
            "data.split_seed" => self.split_seed = num(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not `key=value`")))?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            // keep a literal space or tab delimiter intact
            let value = value.strip_prefix(' ').unwrap_or(value);
            let value = if key.trim() == "data.delimiter" { value } else { value.trim() };
            cfg.set(key.trim(), value).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "model.embedding_dim" => self.embedding_dim.to_string(),
            "model.pin_layers" => self.pin_layers.to_string(),
            "model.subspaces" => self.subspaces.to_string(),
            "model.activation" => self.activation.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.eval_every_steps" => self.eval_every_steps.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.optimizer" => self.optimizer.to_string(),
            "opt.alpha" => format!("{:?}", self.ftrl.alpha),
            "opt.beta" => format!("{:?}", self.ftrl.beta),
            "opt.lambda1" => format!("{:?}", self.ftrl.lambda1),
            "opt.lambda2" => format!("{:?}", self.ftrl.lambda2),
            "opt.adam_lr" => format!("{:?}", self.adam.learning_rate),
            "opt.adam_beta1" => format!("{:?}", self.adam.beta1),
            "opt.adam_beta2" => format!("{:?}", self.adam.beta2),
            "opt.adam_epsilon" => format!("{:?}", self.adam.epsilon),
            "data.schema" => show_path(&self.schema),
            "data.path" => show_path(&self.path),
            "data.train" => show_path(&self.train),
            "data.valid" => show_path(&self.valid),
            "data.vocab" => show_path(&self.vocab),
            "data.delimiter" => match self.delimiter {
                '\t' => "tab".into(),
                c => c.to_string(),
            },
            "data.label" => self.label.clone(),
            "data.min_count" => self.min_count.to_string(),
            "data.bins" => self.bins.to_string(),
            "data.split" => format!("{:?},{:?},{:?}", self.split.0, self.split.1, self.split.2),
            "data.split_seed" => self.split_seed.to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and match arms agree"),
        }
    }

    /// The full effective configuration; parsing it back gives `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn model_config(&self, field_count: usize) -> Result<ModelConfig> {
        Ok(ModelConfig::new(field_count, self.embedding_dim, self.pin_layers, self.subspaces)?
            .with_activation(self.activation))
    }

    pub fn train_config(&self, field_count: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model_config(field_count)?,
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                ftrl: self.ftrl,
                adam: self.adam,
            },
            batch_size: self.batch_size,
            eval_every_steps: self.eval_every_steps,
            patience: self.patience,
            max_steps: self.max_steps,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

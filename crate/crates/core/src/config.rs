//! Run configuration as flat `key = value` text.
//!
//! One pair per line; `#` starts a comment; keys not given keep their
//! defaults. [`TrainConfig::to_text`] writes every key, so parsing its
//! output reproduces the configuration exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::Kind;
use crate::model::ModelDims;
use crate::objective::LossKind;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub sigma: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation { sigma: 0.0, rotation: 0.0, scale: 0.0 };
}

/// Synthetic task used by sweeps that generate their own data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: Kind,
    pub n: usize,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Examples per batch (`K`); each step sees `2K` views.
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Optimizer momentum `β`.
    pub momentum: f64,
    pub weight_decay: f64,
    pub p: f64,
    pub lambda: f64,
    pub queue_size: usize,
    pub momentum_decay: f64,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub loss: LossKind,
    pub code_dim: usize,
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 60,
            base_lr: 0.05,
            warmup_epochs: 3,
            momentum: 0.9,
            weight_decay: 1e-6,
            p: 0.1,
            lambda: 0.1,
            queue_size: 512,
            momentum_decay: 0.99,
            augmentation: Augmentation { sigma: 0.08, rotation: 0.35, scale: 0.1 },
            seed: 0,
            loss: LossKind::Nac,
            code_dim: 16,
            hidden: vec![64, 64],
            head_hidden: 64,
            task: TaskConfig { kind: Kind::Rings, n: 2000, noise: 0.1, classes: 2, seed: 0 },
        }
    }
}

const KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "base_lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "p",
    "lambda",
    "queue_size",
    "momentum_decay",
    "aug_sigma",
    "aug_rotation",
    "aug_scale",
    "seed",
    "loss",
    "temperature",
    "code_dim",
    "hidden",
    "head_hidden",
    "task",
    "task_n",
    "task_noise",
    "task_classes",
    "task_seed",
];

/// Temperature written when the loss has none.
const DEFAULT_TEMPERATURE: f64 = 0.5;

impl TrainConfig {
    pub fn dims(&self, input: usize) -> ModelDims {
        ModelDims { input, hidden: self.hidden.clone(), code_dim: self.code_dim, head_hidden: self.head_hidden }
    }

    pub fn temperature(&self) -> f64 {
        match self.loss {
            LossKind::SimClr { temperature } => temperature,
            _ => DEFAULT_TEMPERATURE,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        let mut loss_name: Option<(usize, String)> = None;
        let mut temperature = DEFAULT_TEMPERATURE;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            let bad = |msg: String| ConfigError::Value { line, key: key.to_string(), msg };
            let float = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = || value.parse::<usize>().map_err(|e| bad(e.to_string()));
            let seed = || value.parse::<u64>().map_err(|e| bad(e.to_string()));
            match key {
                "batch_size" => cfg.batch_size = int()?,
                "epochs" => cfg.epochs = int()?,
                "base_lr" => cfg.base_lr = float()?,
                "warmup_epochs" => cfg.warmup_epochs = int()?,
                "momentum" => cfg.momentum = float()?,
                "weight_decay" => cfg.weight_decay = float()?,
                "p" => cfg.p = float()?,
                "lambda" => cfg.lambda = float()?,
                "queue_size" => cfg.queue_size = int()?,
                "momentum_decay" => cfg.momentum_decay = float()?,
                "aug_sigma" => cfg.augmentation.sigma = float()?,
                "aug_rotation" => cfg.augmentation.rotation = float()?,
                "aug_scale" => cfg.augmentation.scale = float()?,
                "seed" => cfg.seed = seed()?,
                "loss" => loss_name = Some((line, value.to_string())),
                "temperature" => temperature = float()?,
                "code_dim" => cfg.code_dim = int()?,
                "hidden" => {
                    cfg.hidden = value
                        .split(',')
                        .map(|w| w.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(e.to_string()))?
                }
                "head_hidden" => cfg.head_hidden = int()?,
                "task" => cfg.task.kind = value.parse().map_err(|e: crate::data::DataError| bad(e.to_string()))?,
                "task_n" => cfg.task.n = int()?,
                "task_noise" => cfg.task.noise = float()?,
                "task_classes" => cfg.task.classes = int()?,
                "task_seed" => cfg.task.seed = seed()?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.loss = match loss_name {
            None => LossKind::Nac,
            Some((line, name)) => match name.as_str() {
                "nac" => LossKind::Nac,
                "nac_mq" => LossKind::NacMq,
                "simclr" => LossKind::SimClr { temperature },
                other => {
                    return Err(ConfigError::Value {
                        line,
                        key: "loss".into(),
                        msg: format!("expected nac, nac_mq or simclr, got {other:?}"),
                    })
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        let a = &self.augmentation;
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return fail("base_lr must be finite and non-negative");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs cannot exceed epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be finite and non-negative");
        }
        if !(self.p > 0.0 && self.p < 0.5) {
            return fail("p must lie in (0, 0.5)");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("lambda must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum_decay) {
            return fail("momentum_decay must lie in [0, 1)");
        }
        if ![a.sigma, a.rotation, a.scale].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return fail("augmentation parameters must be finite and non-negative");
        }
        if a.scale >= 1.0 {
            return fail("aug_scale must be below 1");
        }
        if self.loss == LossKind::NacMq && self.queue_size < 2 * self.batch_size {
            return fail("queue_size must be at least 2 * batch_size for nac_mq");
        }
        if !(self.temperature().is_finite() && self.temperature() > 0.0) {
            return fail("temperature must be positive");
        }
        if self.code_dim == 0 || self.head_hidden == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("layer widths must be positive");
        }
        if !(self.task.noise.is_finite() && self.task.noise >= 0.0) {
            return fail("task_noise must be finite and non-negative");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let loss = match self.loss {
            LossKind::Nac => "nac",
            LossKind::NacMq => "nac_mq",
            LossKind::SimClr { .. } => "simclr",
        };
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let a = &self.augmentation;
        let pairs: [(&str, String); 24] = [
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("p", self.p.to_string()),
            ("lambda", self.lambda.to_string()),
            ("queue_size", self.queue_size.to_string()),
            ("momentum_decay", self.momentum_decay.to_string()),
            ("aug_sigma", a.sigma.to_string()),
            ("aug_rotation", a.rotation.to_string()),
            ("aug_scale", a.scale.to_string()),
            ("seed", self.seed.to_string()),
            ("loss", loss.to_string()),
            ("temperature", self.temperature().to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("head_hidden", self.head_hidden.to_string()),
            ("task", self.task.kind.to_string()),
            ("task_n", self.task.n.to_string()),
            ("task_noise", self.task.noise.to_string()),
            ("task_classes", self.task.classes.to_string()),
            ("task_seed", self.task.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::parse("# nothing\n\n").unwrap(), TrainConfig::default());
        let d = TrainConfig::default();
        assert_eq!((d.batch_size, d.code_dim, d.epochs, d.queue_size), (64, 16, 60, 512));
        assert_eq!((d.base_lr, d.p, d.lambda, d.momentum_decay), (0.05, 0.1, 0.1, 0.99));
    }

    #[test]
    fn text_round_trip() {
        let text = "batch_size = 32\nloss = simclr  # baseline\ntemperature = 0.2\nhidden = 16, 8\np=0.25\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.hidden, vec![16, 8]);
        assert_eq!(cfg.loss, LossKind::SimClr { temperature: 0.2 });
        let written = cfg.to_text();
        assert_eq!(TrainConfig::parse(&written).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&written).unwrap().to_text(), written);
        assert_eq!(written.lines().count(), KEYS.len());
    }

    #[test]
    fn errors_carry_lines() {
        assert!(matches!(TrainConfig::parse("epochs = 2\nbogus = 1\n"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(TrainConfig::parse("p = 0.1\np = 0.2\n"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(TrainConfig::parse("\n\nepochs\n"), Err(ConfigError::Syntax { line: 3, .. })));
        assert!(matches!(TrainConfig::parse("epochs = two\n"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("loss = byol\n"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("p = 0.5\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(TrainConfig::parse("batch_size = 1\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            TrainConfig::parse("loss = nac_mq\nbatch_size = 300\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(TrainConfig::parse("loss = nac_mq\nbatch_size = 256\n").is_ok());
    }

    proptest! {
        #[test]
        fn serialized_configs_parse_back(
            k in 2usize..200,
            lr in 0.0f64..10.0,
            p in 0.001f64..0.499,
            sigma in 0.0f64..1.0,
            seed in any::<u64>(),
            widths in prop::collection::vec(1usize..100, 1..4),
            kind in 0usize..3,
        ) {
            let cfg = TrainConfig {
                batch_size: k,
                base_lr: lr,
                p,
                seed,
                hidden: widths,
                queue_size: 2 * k,
                loss: [LossKind::Nac, LossKind::NacMq, LossKind::SimClr { temperature: 0.3 }][kind],
                augmentation: Augmentation { sigma, ..TrainConfig::default().augmentation },
                ..TrainConfig::default()
            };
            prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}

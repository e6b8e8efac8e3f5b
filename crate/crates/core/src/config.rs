//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! Every key is listed in [`KEYS`]; unknown sections or keys are rejected with
//! the offending line number. `#` starts a comment. [`Config::render`] writes
//! every key, and parsing the rendered text gives back the same configuration.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{ConvBlock, ModelConfig, OtConfig};
use crate::ot::SinkhornMode;
use crate::pipeline::AugmentationSpec;
use crate::trainer::{OptimizerKind, ProbeConfig, ProbeProtocol, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub ot: OtConfig,
    pub augment: AugmentationSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

/// Registry entry for one configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

impl KeyInfo {
    pub fn path(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, bool, SinkhornMode, OptimizerKind, ProbeProtocol);

impl Value for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
        if v.is_finite() { Ok(v) } else { Err(format!("`{s}` is not finite")) }
    }
    fn render_value(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render_value(&self) -> String {
        self.clone()
    }
}

impl Value for Option<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" { Ok(None) } else { f64::parse_value(s).map(Some) }
    }
    fn render_value(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect()
    }
    fn render_value(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for Vec<ConvBlock> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(str::parse).collect()
    }
    fn render_value(&self) -> String {
        self.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! registry {
    ($( $section:ident . $key:ident : $ty:ty => $($field:ident).+ , $doc:literal ;)*) => {
        /// Every configuration key in rendering order.
        pub const KEYS: &[KeyInfo] = &[
            $( KeyInfo { section: stringify!($section), key: stringify!($key), doc: $doc }, )*
        ];

        impl Config {
            fn set_raw(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
                match (section, key) {
                    $( (stringify!($section), stringify!($key)) => {
                        self.$($field).+ = <$ty as Value>::parse_value(value).map_err(|message| ConfigError::Value {
                            key: format!("{section}.{key}"),
                            message,
                        })?;
                        Ok(())
                    } )*
                    _ => Err(ConfigError::UnknownKey(format!("{section}.{key}"))),
                }
            }

            /// Rendered value of `section.key`.
            pub fn get(&self, path: &str) -> Option<String> {
                match path.split_once('.')? {
                    $( (stringify!($section), stringify!($key)) => Some(<$ty as Value>::render_value(&self.$($field).+)), )*
                    _ => None,
                }
            }
        }
    };
}

registry! {
    model.encoder: Vec<ConvBlock> => model.encoder.blocks, "conv blocks as out:kernel:stride, comma separated (padding kernel/2)";
    model.image_size: usize => model.encoder.image_size, "square input side length in pixels";
    model.expander: Vec<usize> => model.expander, "expander layer widths, comma separated";
    model.tokens: usize => model.layout.tokens, "attention tokens per pooled vector";
    model.heads: usize => model.layout.heads, "attention heads per token";
    model.temperature: f64 => model.temperature, "softmax temperature of the marginals";
    model.bn_eps: f64 => model.bn_eps, "batch-norm epsilon";
    model.bn_momentum: f64 => model.bn_momentum, "batch-norm running-statistics momentum";
    ot.epsilon: f64 => ot.epsilon, "entropic regularization strength";
    ot.iterations: usize => ot.iterations, "Sinkhorn iterations (fixed count in unrolled mode)";
    ot.mode: SinkhornMode => ot.mode, "unrolled (gradients through the plan) or detached";
    ot.tol: f64 => ot.tol, "L1 marginal tolerance for early stopping in detached mode";
    augment.crop: bool => augment.crop, "random resized crop";
    augment.crop_min: f64 => augment.crop_min, "smallest crop area fraction";
    augment.crop_max: f64 => augment.crop_max, "largest crop area fraction";
    augment.flip: bool => augment.flip, "random horizontal flip";
    augment.flip_prob: f64 => augment.flip_prob, "flip probability";
    augment.jitter: bool => augment.jitter, "random brightness and contrast";
    augment.brightness: f64 => augment.brightness, "largest additive intensity offset";
    augment.contrast: f64 => augment.contrast, "largest relative gain change";
    augment.blur: bool => augment.blur, "random Gaussian blur";
    augment.blur_prob: f64 => augment.blur_prob, "blur probability";
    augment.blur_sigma_min: f64 => augment.blur_sigma_min, "smallest blur sigma in pixels";
    augment.blur_sigma_max: f64 => augment.blur_sigma_max, "largest blur sigma in pixels";
    train.steps: usize => train.steps, "optimizer steps";
    train.batch_size: usize => train.batch_size, "images per step (two views each)";
    train.optimizer: OptimizerKind => train.optimizer, "lars or adam";
    train.lr: Option<f64> => train.lr, "learning rate, or auto (lars 3e-4, adam 1e-3)";
    train.weight_decay: f64 => train.weight_decay, "weight decay on weight matrices";
    train.momentum: f64 => train.momentum, "LARS momentum";
    train.trust_coeff: f64 => train.trust_coeff, "LARS trust coefficient";
    train.warmup: usize => train.warmup, "linear warmup steps (0 disables)";
    train.alpha: f64 => train.weights.alpha, "weight of the OT term";
    train.beta: f64 => train.weights.beta, "weight of the variance term";
    train.eta: f64 => train.weights.eta, "weight of the covariance term";
    train.gamma: f64 => model.gamma, "target standard deviation of the variance hinge";
    train.var_eps: f64 => model.var_eps, "epsilon inside the variance square root";
    train.seed: u64 => train.seed, "seed for initialization, batches and augmentation";
    train.metrics: String => train.metrics, "metrics CSV path (empty: next to the checkpoint)";
    train.checkpoint_every: usize => train.checkpoint_every, "checkpoint cadence in steps (0: end only)";
    train.log_wall_time: bool => train.log_wall_time, "record per-step milliseconds in the metrics";
    probe.protocol: ProbeProtocol => probe.protocol, "frozen or finetune";
    probe.fraction: f64 => probe.fraction, "labelled fraction used to fit the probe";
    probe.iterations: usize => probe.iterations, "Newton iteration cap for the linear head";
    probe.l2: f64 => probe.l2, "L2 penalty on the linear head";
    probe.lr: f64 => probe.lr, "linear head learning rate during finetune";
    probe.finetune_steps: usize => probe.finetune_steps, "joint minibatch steps (finetune)";
    probe.finetune_batch: usize => probe.finetune_batch, "minibatch size (finetune)";
    probe.finetune_lr: f64 => probe.finetune_lr, "encoder learning rate (finetune)";
    probe.holdout: f64 => probe.holdout, "held-out share per class without a test set";
    probe.seed: u64 => probe.seed, "seed for subset selection and minibatches";
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply the assignments in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(ConfigError::Parse { line, message: format!("unknown section [{name}]") });
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Parse { line, message: format!("expected `key = value`, found `{content}`") });
            };
            let (key, value) = (key.trim(), value.trim());
            let (sec, key) = match (key.split_once('.'), &section) {
                (Some((s, k)), _) => (s.to_string(), k.to_string()),
                (None, Some(s)) => (s.clone(), key.to_string()),
                (None, None) => {
                    return Err(ConfigError::Parse { line, message: format!("key `{key}` outside any section") })
                }
            };
            self.set_raw(&sec, &key, value).map_err(|e| ConfigError::Parse { line, message: e.to_string() })?;
        }
        Ok(())
    }

    /// Set one `section.key` from text.
    pub fn set(&mut self, path: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = path.split_once('.').ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        self.set_raw(section.trim(), key.trim(), value.trim())
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Value {
            key: assignment.to_string(),
            message: "expected section.key=value".into(),
        })?;
        self.set(path.trim(), value)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for k in KEYS {
            if k.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", k.section);
                current = k.section;
            }
            let _ = writeln!(out, "{} = {}", k.key, self.get(&k.path()).expect("registered key"));
        }
        out
    }

    /// Key reference: one line per key with its default and description.
    pub fn key_reference() -> String {
        let defaults = Config::default();
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "  {:<26} {:<24} {}", k.path(), defaults.get(&k.path()).expect("registered key"), k.doc);
        }
        out
    }

    /// Cross-field checks for a runnable configuration.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.augment.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(self.ot.epsilon > 0.0 && self.ot.tol > 0.0 && self.ot.iterations > 0) {
            return Err("ot.epsilon, ot.tol and ot.iterations must be positive".into());
        }
        if !(self.model.bn_momentum >= 0.0 && self.model.bn_momentum <= 1.0) {
            return Err("model.bn_momentum must lie in [0, 1]".into());
        }
        if !(self.probe.fraction > 0.0 && self.probe.fraction <= 1.0) {
            return Err("probe.fraction must lie in (0, 1]".into());
        }
        Ok(())
    }
}

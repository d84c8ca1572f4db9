//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; the first unknown key is reported by name.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;
use vrash_core::autodiff::CellKind;
use vrash_core::models::{ModelConfig, ModelKind, DEFAULT_HIDDEN, MAX_GENERATED_NOTES};
use vrash_core::training::TrainConfig;
use vrash_core::FilterConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("invalid value `{value}` for config key `{key}` (line {line})")]
    InvalidValue { key: String, value: String, line: usize },
    #[error("line {line} is not of the form key=value")]
    Syntax { line: usize },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every tunable of the tool in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub filter: FilterConfig,

    pub model: ModelKind,
    /// Decoder / language-model cell; per-model default when unset.
    pub cell: Option<CellKind>,
    pub encoder_cell: Option<CellKind>,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub kl_anneal_steps: u64,
    pub history_dropout_p: f64,
    pub seed: u64,
    pub eval_split_fraction: f64,
    pub patience: usize,
    pub eval_every: u64,
    pub min_improvement: f64,
    pub clip_norm: f64,
    pub stop_below_train_ce: Option<f64>,
    pub run_name: String,

    pub temperature: f64,
    pub count: usize,
    pub median_pause_ms: f64,
    pub max_generated_notes: usize,
    pub meta_label: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let t = TrainConfig::new(ModelKind::Lm);
        Settings {
            filter: FilterConfig::default(),
            model: ModelKind::Lm,
            cell: None,
            encoder_cell: None,
            hidden: DEFAULT_HIDDEN,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            kl_anneal_steps: t.kl_anneal_steps,
            history_dropout_p: t.history_dropout_p,
            seed: t.seed,
            eval_split_fraction: t.eval_split_fraction,
            patience: t.patience,
            eval_every: t.eval_every,
            min_improvement: t.min_improvement,
            clip_norm: t.clip_norm,
            stop_below_train_ce: t.stop_below_train_ce,
            run_name: "run".to_string(),
            temperature: 1.0,
            count: 1,
            median_pause_ms: 250.0,
            max_generated_notes: MAX_GENERATED_NOTES,
            meta_label: None,
        }
    }
}

fn parse_opt<T: std::str::FromStr>(v: &str) -> Result<Option<T>, ()> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|_| ())
    }
}

fn parse_cell(v: &str) -> Result<Option<CellKind>, ()> {
    if v.is_empty() || v == "default" {
        Ok(None)
    } else {
        CellKind::parse(v).map(Some).ok_or(())
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Settings, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Settings::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Settings, ConfigError> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            s.set(key.trim(), value.trim(), i + 1)?;
        }
        Ok(s)
    }

    /// Apply one `key=value` pair.
    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
        let ok = match key {
            "entropy_min_bits" => v.parse().map(|x| self.filter.entropy_min_bits = x).is_ok(),
            "min_notes" => v.parse().map(|x| self.filter.min_notes = x).is_ok(),
            "max_notes" => v.parse().map(|x| self.filter.max_notes = x).is_ok(),
            "model" => ModelKind::parse(v).map(|x| self.model = x).is_some(),
            "cell" => parse_cell(v).map(|x| self.cell = x).is_ok(),
            "encoder_cell" => parse_cell(v).map(|x| self.encoder_cell = x).is_ok(),
            "hidden" => v.parse().map(|x| self.hidden = x).is_ok(),
            "learning_rate" => v.parse().map(|x| self.learning_rate = x).is_ok(),
            "epochs" => v.parse().map(|x| self.epochs = x).is_ok(),
            "max_steps" => parse_opt(v).map(|x| self.max_steps = x).is_ok(),
            "batch_size" => v.parse().map(|x| self.batch_size = x).is_ok(),
            "kl_anneal_steps" => v.parse().map(|x| self.kl_anneal_steps = x).is_ok(),
            "history_dropout_p" => v.parse().map(|x| self.history_dropout_p = x).is_ok(),
            "seed" => v.parse().map(|x| self.seed = x).is_ok(),
            "eval_split_fraction" => v.parse().map(|x| self.eval_split_fraction = x).is_ok(),
            "patience" => v.parse().map(|x| self.patience = x).is_ok(),
            "eval_every" => v.parse().map(|x| self.eval_every = x).is_ok(),
            "min_improvement" => v.parse().map(|x| self.min_improvement = x).is_ok(),
            "clip_norm" => v.parse().map(|x| self.clip_norm = x).is_ok(),
            "stop_below_train_ce" => parse_opt(v).map(|x| self.stop_below_train_ce = x).is_ok(),
            "run_name" => {
                let valid = !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
                if valid {
                    self.run_name = v.to_string();
                }
                valid
            }
            "temperature" => v.parse().map(|x| self.temperature = x).is_ok(),
            "count" => v.parse().map(|x| self.count = x).is_ok(),
            "median_pause_ms" => v.parse().map(|x| self.median_pause_ms = x).is_ok(),
            "max_generated_notes" => v.parse().map(|x| self.max_generated_notes = x).is_ok(),
            "meta_label" => {
                self.meta_label = (!v.is_empty()).then(|| v.to_string());
                true
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value: v.to_string(),
                line,
            })
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let mut model = ModelConfig::new(kind);
        if let Some(c) = self.cell {
            model.cell = c;
        }
        if let Some(c) = self.encoder_cell {
            model.encoder_cell = c;
        }
        model.hidden = self.hidden;
        TrainConfig {
            model,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            kl_anneal_steps: self.kl_anneal_steps,
            history_dropout_p: self.history_dropout_p,
            seed: self.seed,
            eval_split_fraction: self.eval_split_fraction,
            patience: self.patience,
            eval_every: self.eval_every,
            min_improvement: self.min_improvement,
            clip_norm: self.clip_norm,
            stop_below_train_ce: self.stop_below_train_ce,
        }
    }

    /// Canonical `key=value` snapshot; parses back to the same settings.
    pub fn to_text(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
        }
        let cell = |c: &Option<CellKind>| c.map_or_else(|| "default".to_string(), |c| c.tag());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("entropy_min_bits", self.filter.entropy_min_bits.to_string());
        kv("min_notes", self.filter.min_notes.to_string());
        kv("max_notes", self.filter.max_notes.to_string());
        kv("model", self.model.tag().to_string());
        kv("cell", cell(&self.cell));
        kv("encoder_cell", cell(&self.encoder_cell));
        kv("hidden", self.hidden.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", opt(&self.max_steps));
        kv("batch_size", self.batch_size.to_string());
        kv("kl_anneal_steps", self.kl_anneal_steps.to_string());
        kv("history_dropout_p", self.history_dropout_p.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_split_fraction", self.eval_split_fraction.to_string());
        kv("patience", self.patience.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("min_improvement", self.min_improvement.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("stop_below_train_ce", opt(&self.stop_below_train_ce));
        kv("run_name", self.run_name.clone());
        kv("temperature", self.temperature.to_string());
        kv("count", self.count.to_string());
        kv("median_pause_ms", self.median_pause_ms.to_string());
        kv("max_generated_notes", self.max_generated_notes.to_string());
        kv("meta_label", self.meta_label.clone().unwrap_or_default());
        s
    }
}

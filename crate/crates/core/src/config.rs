//! Experiment configuration: one JSON document holding every knob.
//!
//! Values resolve in three layers: built-in defaults, then the config file,
//! then command-line overrides. Unknown keys are rejected at every level.
//!
//! ```json
//! {
//!   "model":    { "vocab_size": 64, "d_model": 64, "n_layers": 2 },
//!   "corpus":   { "order": 2, "length": 60000 },
//!   "prune":    { "rate": 0.3, "scope": "global",
//!                 "schedule": { "kind": "exponential", "alpha": 3.0 } },
//!   "finetune": { "epochs": 1, "lambda_l1": 0.0 },
//!   "seeds":    [0, 1, 2],
//!   "sweep_rates": [0.1, 0.3, 0.5]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{EvalSuiteConfig, DEFAULT_CONCENTRATION};
use crate::model::ModelConfig;
use crate::pruning::PruneConfig;
use crate::trainer::FinetuneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Must equal `model.vocab_size` when given.
    pub vocab_size: Option<usize>,
    pub order: usize,
    pub length: usize,
    pub holdout_fraction: f64,
    /// Dirichlet concentration of the transition rows.
    pub concentration: f64,
    /// Weight of the row shared by contexts with the same oldest token.
    pub backoff: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            vocab_size: None,
            order: 2,
            length: 400_000,
            holdout_fraction: 0.1,
            concentration: DEFAULT_CONCENTRATION,
            backoff: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub prune: PruneConfig,
    /// Dense pre-training of the base model.
    pub train: FinetuneConfig,
    /// Masked fine-tuning after each pruning event.
    pub finetune: FinetuneConfig,
    pub eval: EvalSuiteConfig,
    pub sweep_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            prune: PruneConfig::default(),
            train: FinetuneConfig {
                epochs: 4,
                ..FinetuneConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 1,
                learning_rate: 0.3,
                max_steps: Some(300),
                ..FinetuneConfig::default()
            },
            eval: EvalSuiteConfig::default(),
            sweep_rates: vec![0.1, 0.3, 0.5],
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }
}

fn nested(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, constraint } if !field.starts_with(prefix) => Error::Validation {
            field: format!("{prefix}.{field}"),
            constraint,
        },
        Error::Config(msg) => Error::Validation {
            field: prefix.to_string(),
            constraint: msg,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| nested("model", e))?;
        let c = &self.corpus;
        if let Some(v) = c.vocab_size {
            if v != self.model.vocab_size {
                return Err(Error::validation(
                    "corpus.vocab_size",
                    "must equal model.vocab_size",
                ));
            }
        }
        if c.order == 0 {
            return Err(Error::validation("corpus.order", "must be positive"));
        }
        if !(c.concentration > 0.0 && c.concentration.is_finite()) {
            return Err(Error::validation(
                "corpus.concentration",
                "must be finite and positive",
            ));
        }
        if !(0.0..=1.0).contains(&c.backoff) {
            return Err(Error::validation("corpus.backoff", "must be in [0,1]"));
        }
        if !(0.0..1.0).contains(&c.holdout_fraction) {
            return Err(Error::validation("corpus.holdout_fraction", "must be in [0,1)"));
        }
        let train_len = c.length - (c.length as f64 * c.holdout_fraction).round() as usize;
        if train_len < 2 {
            return Err(Error::validation(
                "corpus.length",
                "training split needs at least 2 tokens",
            ));
        }
        self.prune.validate()?;
        self.train.validate().map_err(|e| nested("train", e))?;
        self.finetune.validate().map_err(|e| nested("finetune", e))?;
        let ctx = self.model.context_len;
        let ev = &self.eval;
        if ev.last_token_context == 0 || ev.last_token_context > ctx {
            return Err(Error::validation(
                "eval.last_token_context",
                "must be in [1, model.context_len]",
            ));
        }
        if ev.cloze_context == 0
            || ev.cloze_continuation == 0
            || ev.cloze_context + ev.cloze_continuation > ctx
        {
            return Err(Error::validation(
                "eval.cloze_context",
                "context and continuation must be positive and fit in model.context_len",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "at least one seed is required"));
        }
        if self.sweep_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::validation("sweep_rates", "every rate must be in [0,1)"));
        }
        if self.sweep_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("sweep_rates", "must be strictly increasing"));
        }
        Ok(())
    }

    /// Parses and validates a config document. Missing keys take defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(parse_error)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::validation("<root>", "config must be a JSON object"));
        }
        let mut doc = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        merge(&mut doc, value);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let field = e.path().to_string();
            Error::Validation {
                field: if field == "." { "<root>".into() } else { field },
                constraint: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

/// Sets `path` (dot-separated keys) inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::validation(path, "override key must be a dotted path"));
    }
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::validation(
                keys[..i].join("."),
                "is not an object, cannot set a key inside it",
            )
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one key")
}

/// Parses one `KEY=VALUE` override. VALUE is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::validation(spec, "override must look like KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Overlays `patch` on `base` key by key. Objects carrying a `kind` tag
/// replace the base wholesale so a variant's fields never leak into another.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line layer on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `KEY=VALUE` pairs, applied in order.
    pub set: Vec<String>,
    /// Replaces `seeds` when non-empty.
    pub seeds: Vec<u64>,
    /// Replaces `sweep_rates`.
    pub rates: Option<Vec<f64>>,
}

impl Overrides {
    fn apply(&self, doc: &mut Value) -> Result<()> {
        for spec in &self.set {
            let (key, value) = parse_override(spec)?;
            set_path(doc, &key, value)?;
        }
        if !self.seeds.is_empty() {
            set_path(doc, "seeds", serde_json::json!(self.seeds))?;
        }
        if let Some(rates) = &self.rates {
            set_path(doc, "sweep_rates", serde_json::json!(rates))?;
        }
        Ok(())
    }
}

/// Parses a `--rates` list such as `0.1,0.3,0.5`.
pub fn parse_rates(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation("rates", format!("`{}` is not a number", s.trim())))
        })
        .collect()
}

/// Resolves defaults, then the optional file, then `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(parse_error)?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::validation("<root>", "config must be a JSON object"));
    }
    overrides.apply(&mut doc)?;
    ExperimentConfig::from_value(doc)
}

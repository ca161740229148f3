//! The flat JSON run configuration.
//!
//! Every key has a default, so `{}` is a complete config. A file is read
//! first, then command-line overrides are applied in order, with later ones
//! winning. Unknown keys are rejected wherever they appear.

use std::fmt;
use std::path::{Path, PathBuf};

use mvdec::eval::{BeamConfig, BleuOptions, LengthBuckets, Metric};
use mvdec::model::{Integration, ModelConfig, Strategy};
use mvdec::tasks::{TaskKind, TaskSpec};
use mvdec::train::TrainOptions;
use mvdec::Precision;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A configuration problem; always exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Beam,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub strategy: Strategy,
    pub integration: Integration,
    pub dropout: f64,
    pub precision: Precision,

    // task
    pub task: TaskKind,
    pub task_vocab: usize,
    pub task_min_len: usize,
    pub task_max_len: usize,
    pub train_samples: usize,
    pub data_seed: u64,
    pub eval_samples: usize,
    pub eval_seed: u64,

    // training
    pub steps: usize,
    pub batch_size: usize,
    pub max_tokens: Option<usize>,
    pub warmup: usize,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: usize,
    pub seed: u64,

    // evaluation
    pub decoder: Decoder,
    pub beam_size: usize,
    pub length_penalty: f64,
    pub decode_max_len: usize,
    pub bucket_width: usize,
    pub bucket_metric: Metric,
    pub bleu_smooth: bool,

    // output
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainOptions::default();
        let b = BeamConfig::default();
        RunConfig {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            d_ff: m.d_ff,
            src_vocab: m.src_vocab,
            tgt_vocab: m.tgt_vocab,
            max_len: m.max_len,
            strategy: m.strategy,
            integration: m.integration,
            dropout: m.dropout,
            precision: m.precision,
            task: TaskKind::Copy,
            task_vocab: 16,
            task_min_len: 1,
            task_max_len: 20,
            train_samples: 10_000,
            data_seed: 1,
            eval_samples: 500,
            eval_seed: 2,
            steps: t.steps,
            batch_size: t.batch_size,
            max_tokens: t.max_tokens,
            warmup: t.warmup,
            lr_scale: t.lr_scale,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            label_smoothing: t.label_smoothing,
            checkpoint_every: t.checkpoint_every,
            seed: t.seed,
            decoder: Decoder::Beam,
            beam_size: b.beam_size,
            length_penalty: b.length_penalty,
            decode_max_len: b.max_len,
            bucket_width: 10,
            bucket_metric: Metric::Bleu,
            bleu_smooth: false,
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

impl RunConfig {
    /// Read `path` (if any) and apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| {
                    ConfigError(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column()))
                })?
            }
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn with_override(&self, assignment: &str) -> Result<Self, ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let mut map = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if !map.contains_key(key) {
            return Err(ConfigError(format!("override `{assignment}`: unknown key `{key}`")));
        }
        // bare words such as `gca` are taken as strings
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        serde_json::from_value(Value::Object(map))
            .map_err(|e| ConfigError(format!("override `{assignment}`: key `{key}`: {e}")))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: mvdec::Error| ConfigError(e.to_string());
        self.model().validate().map_err(err)?;
        self.task_spec().validate().map_err(err)?;
        self.beam().validate().map_err(err)?;
        self.buckets().map_err(err)?;
        if self.task_vocab > self.src_vocab || self.task_vocab > self.tgt_vocab {
            return Err(ConfigError(format!(
                "task_vocab {} exceeds the model vocabularies {}/{}",
                self.task_vocab, self.src_vocab, self.tgt_vocab
            )));
        }
        if self.task_max_len + 1 > self.max_len {
            return Err(ConfigError(format!(
                "task_max_len {} plus eos does not fit max_len {}",
                self.task_max_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            max_len: self.max_len,
            strategy: self.strategy,
            integration: self.integration,
            dropout: self.dropout,
            precision: self.precision,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.task_vocab,
            min_len: self.task_min_len,
            max_len: self.task_max_len,
            seed: self.data_seed,
            samples: self.train_samples,
        }
    }

    pub fn eval_spec(&self) -> TaskSpec {
        TaskSpec {
            seed: self.eval_seed,
            samples: self.eval_samples,
            ..self.task_spec()
        }
    }

    pub fn train(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            max_tokens: self.max_tokens,
            warmup: self.warmup,
            lr_scale: self.lr_scale,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            clip_norm: self.clip_norm,
            label_smoothing: self.label_smoothing,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len: self.decode_max_len,
        }
    }

    pub fn bleu(&self) -> BleuOptions {
        BleuOptions {
            smooth: self.bleu_smooth,
            ..BleuOptions::default()
        }
    }

    pub fn buckets(&self) -> mvdec::Result<LengthBuckets> {
        LengthBuckets::uniform(self.task_max_len.max(self.task_min_len), self.bucket_width)
    }
}

//! Run configuration: one JSON document holding every knob, with dotted-path
//! overrides and strict unknown-key rejection.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::context_tree::{schedule_for, CompressionSchedule, PolicyKind, SplitParams};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Total decoder layers N.
    pub n_layers: usize,
    /// Shared (injection) layers M: the compressor depth and the number of
    /// decoder layers carrying a cross-attention sublayer.
    pub shared_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    /// Maximum sequence length any single forward pass must support; also
    /// the training window length.
    pub max_train_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            shared_layers: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size: 256,
            rope_base: 10000.0,
            max_train_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of the gated MLP.
    pub fn ffn_hidden(&self) -> usize {
        2 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_layers < 1 || self.shared_layers > self.n_layers {
            return Err(Error::config(format!(
                "shared_layers must be in 1..=n_layers ({} vs {})",
                self.shared_layers, self.n_layers
            )));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.vocab_size == 0 || self.rope_base <= 0.0 || self.max_train_len == 0 {
            return Err(Error::config("vocab, rope base and max length must be positive"));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    /// Freeze embeddings and the shared layers 1..M, training only the
    /// cross-attention parameters, the top N−M layers, the final norm and
    /// the output head.
    pub freeze_shared: bool,
    /// Cap on optimizer steps (per run); 0 means no cap.
    pub max_steps: usize,
    /// Fraction of training samples drawn from the passkey generator.
    pub passkey_fraction: f64,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            epochs: 2,
            batch_size: 8,
            grad_accum: 1,
            seed: 42,
            freeze_shared: true,
            max_steps: 0,
            passkey_fraction: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup ratio must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("batch size and grad accumulation must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.passkey_fraction) {
            return Err(Error::config("passkey fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Context-tree construction settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSettings {
    pub depth: usize,
    /// Split noise scale: σ = node_len / gamma.
    pub gamma: f64,
    pub min_len: usize,
    pub policy: PolicyKind,
}

impl Default for TreeSettings {
    fn default() -> Self {
        TreeSettings {
            depth: 3,
            gamma: 5.0,
            min_len: 16,
            policy: PolicyKind::AlwaysRight,
        }
    }
}

impl TreeSettings {
    pub fn split_params(&self, rng_seed: u64) -> Result<SplitParams> {
        SplitParams::new(self.gamma, self.min_len, rng_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("tree depth must be at least 1"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::config("tree gamma must be positive"));
        }
        if self.min_len == 0 {
            return Err(Error::config("tree min_len must be at least 1"));
        }
        Ok(())
    }
}

/// Compression schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSettings {
    /// Keep ratio at the leaf level; coarser levels double it per level.
    pub alpha_leaf: u32,
    /// When set, use this constant keep ratio at every level instead of the
    /// doubling rule (whole-tree ratios below 2 need this).
    pub uniform_alpha: Option<f64>,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings {
            alpha_leaf: 2,
            uniform_alpha: None,
        }
    }
}

impl ScheduleSettings {
    pub fn to_schedule(&self, depth: usize) -> Result<CompressionSchedule> {
        match self.uniform_alpha {
            Some(alpha) => CompressionSchedule::uniform(depth, alpha),
            None => schedule_for(depth, self.alpha_leaf),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub passkey: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: PathBuf::from("out/corpus.txt"),
            passkey: PathBuf::from("out/passkey.jsonl"),
            checkpoint: PathBuf::from("out/model.ckpt"),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Everything a run needs, in one place.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tree: TreeSettings,
    pub schedule: ScheduleSettings,
    pub chunk_size: usize,
    /// Running-text length |X_D| held fixed across evaluation lengths.
    pub running_len: usize,
    pub eval_lengths: Vec<usize>,
    /// Evaluation windows sampled per length.
    pub eval_windows: usize,
    /// Characters of synthetic corpus to generate.
    pub corpus_chars: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tree: TreeSettings::default(),
            schedule: ScheduleSettings::default(),
            chunk_size: 128,
            running_len: 128,
            eval_lengths: vec![512, 1024, 2048, 4096, 8192],
            eval_windows: 8,
            corpus_chars: 512 * 1024,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tree.validate()?;
        self.schedule.to_schedule(self.tree.depth)?;
        if self.chunk_size < 2 * self.tree.min_len {
            return Err(Error::config(format!(
                "chunk size {} below twice the minimum node length {}",
                self.chunk_size, self.tree.min_len
            )));
        }
        if self.running_len == 0 || self.running_len > self.model.max_train_len {
            return Err(Error::config(format!(
                "running length {} must lie in 1..={}",
                self.running_len, self.model.max_train_len
            )));
        }
        if self.eval_windows == 0 {
            return Err(Error::config("eval_windows must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Loads a config from JSON text, applying `key=value` overrides on
    /// dotted paths before validation. Unknown keys are rejected.
    pub fn from_json_with_overrides(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut value: serde_json::Value = match text {
            Some(t) => serde_json::from_str(t)
                .map_err(|e| Error::config(format!("config parse error: {e}")))?,
            None => serde_json::to_value(RunConfig::default()).expect("default serializes"),
        };
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got '{item}'")))?;
            set_path(&mut value, path, parse_scalar(raw))?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw) {
        // Accepts numbers, booleans, null, quoted strings, arrays.
        v
    } else {
        serde_json::Value::String(raw.to_string())
    }
}

fn set_path(value: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::config(format!("config path '{path}' does not name an object field"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config section '{part}' in '{path}'")))?;
    }
    Err(Error::config(format!("empty config path '{path}'")))
}

//! Flat `key = value` run configuration with `#` comments.
//!
//! Resolution order is built-in defaults, then the config file, then
//! command-line overrides; the last assignment of a key wins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{DropoutSchedule, ScheduleMode};
use crate::model::{ModelConfig, VariantConfig, VariantName};
use crate::tokenizer::VOCAB_SIZE;
use crate::training::TrainConfig;

/// Options consumed by the CLI rather than the model or trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub name: String,
    pub outdir: PathBuf,
    pub corpus: Option<PathBuf>,
    /// Trailing fraction of the corpus held out for evaluation.
    pub holdout: f64,
    /// Empty means `{L/4, L/2, 3L/4, L}`.
    pub exit_layers: Vec<usize>,
    pub prompt: String,
    pub gen_tokens: usize,
    pub repeats: usize,
    pub probe_windows: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            name: "run".into(),
            outdir: PathBuf::from("runs"),
            corpus: None,
            holdout: 0.1,
            exit_layers: Vec::new(),
            prompt: "Once upon a time".into(),
            gen_tokens: 64,
            repeats: 3,
            probe_windows: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
}

pub const KEYS: [&str; 33] = [
    "model.variant",
    "model.layers",
    "model.hidden",
    "model.heads",
    "model.kv_heads",
    "model.ffn_dim",
    "model.vocab_size",
    "model.max_seq_len",
    "model.seed",
    "train.lr_peak",
    "train.warmup_steps",
    "train.max_steps",
    "train.batch_size",
    "train.grad_accum_steps",
    "train.seq_len",
    "train.weight_decay",
    "train.clip_norm",
    "train.lambda",
    "train.p_max",
    "train.schedule",
    "train.early_exit",
    "train.seed",
    "train.log_every",
    "train.checkpoint_every",
    "run.name",
    "run.outdir",
    "run.corpus",
    "run.holdout",
    "run.exit_layers",
    "run.prompt",
    "run.gen_tokens",
    "run.repeats",
    "run.probe_windows",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

pub fn parse_schedule_mode(value: &str) -> Result<ScheduleMode> {
    match value {
        "raw" => Ok(ScheduleMode::Raw),
        "sum_normalized" => Ok(ScheduleMode::SumNormalized),
        _ => Err(Error::Config(format!(
            "unknown schedule '{value}' (valid: raw, sum_normalized)"
        ))),
    }
}

pub fn schedule_mode_str(mode: ScheduleMode) -> &'static str {
    match mode {
        ScheduleMode::Raw => "raw",
        ScheduleMode::SumNormalized => "sum_normalized",
    }
}

fn parse_layers(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Desk-scale shape with the full training recipe of `variant`.
    pub fn defaults(variant: VariantName) -> Self {
        let mut c = RunConfig {
            model: ModelConfig::desk(variant),
            train: TrainConfig::recipe(variant),
            run: RunOptions::default(),
        };
        c.sync();
        c
    }

    pub fn variant(&self) -> VariantName {
        self.model.variant.name
    }

    /// Keeps the model's dropout schedule in step with the trainer settings.
    fn sync(&mut self) {
        self.model.schedule = DropoutSchedule {
            p_max: self.train.effective_p_max(),
            mode: self.train.schedule_mode,
            layers: self.model.layers,
        };
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, r) = (&mut self.model, &mut self.train, &mut self.run);
        match key {
            "model.variant" => m.variant = VariantConfig::of(v.parse()?),
            "model.layers" => m.layers = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.kv_heads" => m.kv_heads = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.max_seq_len" => m.max_seq_len = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "train.lr_peak" => t.lr_peak = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.grad_accum_steps" => t.grad_accum_steps = parse(key, v)?,
            "train.seq_len" => t.seq_len = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.lambda" => t.lambda = parse(key, v)?,
            "train.p_max" => t.p_max = parse(key, v)?,
            "train.schedule" => t.schedule_mode = parse_schedule_mode(v)?,
            "train.early_exit" => t.early_exit = parse_bool(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "run.name" => r.name = v.to_string(),
            "run.outdir" => r.outdir = PathBuf::from(v),
            "run.corpus" => r.corpus = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run.holdout" => r.holdout = parse(key, v)?,
            "run.exit_layers" => r.exit_layers = parse_layers(key, v)?,
            "run.prompt" => r.prompt = v.to_string(),
            "run.gen_tokens" => r.gen_tokens = parse(key, v)?,
            "run.repeats" => r.repeats = parse(key, v)?,
            "run.probe_windows" => r.probe_windows = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.sync();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, r) = (&self.model, &self.train, &self.run);
        Some(match key {
            "model.variant" => m.variant.name.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.hidden" => m.hidden.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.kv_heads" => m.kv_heads.to_string(),
            "model.ffn_dim" => m.ffn_dim.to_string(),
            "model.vocab_size" => m.vocab_size.to_string(),
            "model.max_seq_len" => m.max_seq_len.to_string(),
            "model.seed" => m.seed.to_string(),
            "train.lr_peak" => t.lr_peak.to_string(),
            "train.warmup_steps" => t.warmup_steps.to_string(),
            "train.max_steps" => t.max_steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.grad_accum_steps" => t.grad_accum_steps.to_string(),
            "train.seq_len" => t.seq_len.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.p_max" => t.p_max.to_string(),
            "train.schedule" => schedule_mode_str(t.schedule_mode).to_string(),
            "train.early_exit" => t.early_exit.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.log_every" => t.log_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "run.name" => r.name.clone(),
            "run.outdir" => r.outdir.display().to_string(),
            "run.corpus" => r.corpus.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "run.holdout" => r.holdout.to_string(),
            "run.exit_layers" => r
                .exit_layers
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "run.prompt" => r.prompt.clone(),
            "run.gen_tokens" => r.gen_tokens.to_string(),
            "run.repeats" => r.repeats.to_string(),
            "run.probe_windows" => r.probe_windows.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; loading this text reproduces the
    /// same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must be at least {VOCAB_SIZE} for the byte tokenizer"
            )));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if !(self.run.holdout > 0.0 && self.run.holdout < 1.0) {
            return Err(Error::Config("run.holdout must lie strictly between 0 and 1".into()));
        }
        if let Some(&k) = self.run.exit_layers.iter().find(|&&k| k == 0 || k > self.model.layers) {
            return Err(Error::Config(format!(
                "exit layer {k} outside 1..={}",
                self.model.layers
            )));
        }
        if self.run.repeats < 3 {
            return Err(Error::Config("run.repeats must be at least 3".into()));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run.name '{}'", self.run.name)));
        }
        Ok(())
    }

    /// Exit layers to sweep, always ending with `L`.
    pub fn sweep_layers(&self) -> Vec<usize> {
        let mut v = if self.run.exit_layers.is_empty() {
            self.model.exit_layers()
        } else {
            self.run.exit_layers.clone()
        };
        v.push(self.model.layers);
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies assignments in order over the defaults of the last
/// `model.variant` given (V1 if none).
pub fn resolve(pairs: &[(String, String)]) -> Result<RunConfig> {
    let variant = match pairs.iter().rev().find(|(k, _)| k == "model.variant") {
        Some((_, v)) => v.parse()?,
        None => VariantName::V1,
    };
    let mut cfg = RunConfig::defaults(variant);
    for (k, v) in pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, then `path` (if any), then `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = match path {
        Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    pairs.extend_from_slice(overrides);
    resolve(&pairs)
}

/// Architecture-only text embedded in checkpoints.
pub fn model_config_text(m: &ModelConfig) -> String {
    let mut cfg = RunConfig::defaults(m.variant.name);
    cfg.model = *m;
    let mut s = String::new();
    for key in KEYS.iter().filter(|k| k.starts_with("model.")) {
        let _ = writeln!(s, "{key} = {}", cfg.get(key).unwrap_or_default());
    }
    let _ = writeln!(s, "schedule.p_max = {}", m.schedule.p_max);
    let _ = writeln!(s, "schedule.mode = {}", schedule_mode_str(m.schedule.mode));
    s
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let pairs = parse_pairs(text)?;
    let variant = pairs
        .iter()
        .find(|(k, _)| k == "model.variant")
        .ok_or_else(|| Error::Config("model.variant missing".into()))?
        .1
        .parse()?;
    let mut cfg = RunConfig::defaults(variant);
    let (mut p_max, mut mode) = (cfg.model.schedule.p_max, cfg.model.schedule.mode);
    for (k, v) in &pairs {
        match k.as_str() {
            "schedule.p_max" => p_max = parse(k, v)?,
            "schedule.mode" => mode = parse_schedule_mode(v)?,
            k if k.starts_with("model.") => cfg.set(k, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
    }
    let mut m = cfg.model;
    m.schedule = DropoutSchedule::new(p_max, mode, m.layers)?;
    m.validate()?;
    Ok(m)
}

//! Line-oriented `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::GenOptions;
use crate::error::{Error, Result};
use crate::transformer::ModelConfig;

pub const GRID_BATCH: [usize; 5] = [4, 8, 12, 16, 32];
pub const GRID_LR: [f64; 12] = [2e-5, 4e-5, 8e-5, 2e-4, 4e-4, 8e-4, 2e-3, 4e-3, 8e-3, 2e-2, 4e-2, 8e-2];
pub const GRID_PROMPT_LEN: [usize; 7] = [15, 30, 45, 60, 75, 90, 100];

/// Which sentences feed the knowledge chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainMode {
    /// Gold supporting sentences in reasoning order.
    Gold,
    /// Every context sentence in document order.
    All,
}

impl FromStr for ChainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(ChainMode::Gold),
            "all" => Ok(ChainMode::All),
            other => Err(Error::Config(format!("chain mode must be `gold` or `all`, got `{other}`"))),
        }
    }
}

impl fmt::Display for ChainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainMode::Gold => "gold",
            ChainMode::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,

    pub entities: usize,
    pub relations: usize,
    pub singlehop_size: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub noise: bool,

    pub d: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,

    pub type_prompt_len: usize,
    pub prefix_len: usize,
    pub unified_prompt_len: usize,
    pub knowledge_slots: usize,

    pub batch_size: usize,
    pub lr: f64,
    pub type_lr: f64,
    pub prompt_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub pretrain_steps: usize,
    pub type_steps: usize,
    pub unified_steps: usize,
    pub support_weight: f64,

    pub knowledge_train_chain: ChainMode,
    pub knowledge_eval_chain: ChainMode,
    pub grid_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            entities: 60,
            relations: 6,
            singlehop_size: 8000,
            train_size: 2000,
            dev_size: 500,
            min_distractors: 2,
            max_distractors: 3,
            noise: false,
            d: 32,
            layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            max_seq_len: 128,
            type_prompt_len: 8,
            prefix_len: 4,
            unified_prompt_len: 8,
            knowledge_slots: 4,
            batch_size: 16,
            lr: 3e-3,
            type_lr: 8e-3,
            prompt_lr: 1e-2,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            pretrain_steps: 2000,
            type_steps: 200,
            unified_steps: 800,
            support_weight: 1.0,
            knowledge_train_chain: ChainMode::All,
            knowledge_eval_chain: ChainMode::All,
            grid_mode: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "entities" => self.entities = parse(key, value)?,
            "relations" => self.relations = parse(key, value)?,
            "singlehop_size" => self.singlehop_size = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "dev_size" => self.dev_size = parse(key, value)?,
            "min_distractors" => self.min_distractors = parse(key, value)?,
            "max_distractors" => self.max_distractors = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "type_prompt_len" => self.type_prompt_len = parse(key, value)?,
            "prefix_len" => self.prefix_len = parse(key, value)?,
            "unified_prompt_len" => self.unified_prompt_len = parse(key, value)?,
            "knowledge_slots" => self.knowledge_slots = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "type_lr" => self.type_lr = parse(key, value)?,
            "prompt_lr" => self.prompt_lr = parse(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "type_steps" => self.type_steps = parse(key, value)?,
            "unified_steps" => self.unified_steps = parse(key, value)?,
            "support_weight" => self.support_weight = parse(key, value)?,
            "knowledge_train_chain" => self.knowledge_train_chain = value.parse()?,
            "knowledge_eval_chain" => self.knowledge_eval_chain = value.parse()?,
            "grid_mode" => self.grid_mode = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("entities", self.entities.to_string()),
            ("relations", self.relations.to_string()),
            ("singlehop_size", self.singlehop_size.to_string()),
            ("train_size", self.train_size.to_string()),
            ("dev_size", self.dev_size.to_string()),
            ("min_distractors", self.min_distractors.to_string()),
            ("max_distractors", self.max_distractors.to_string()),
            ("noise", self.noise.to_string()),
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("type_prompt_len", self.type_prompt_len.to_string()),
            ("prefix_len", self.prefix_len.to_string()),
            ("unified_prompt_len", self.unified_prompt_len.to_string()),
            ("knowledge_slots", self.knowledge_slots.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("type_lr", self.type_lr.to_string()),
            ("prompt_lr", self.prompt_lr.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("type_steps", self.type_steps.to_string()),
            ("unified_steps", self.unified_steps.to_string()),
            ("support_weight", self.support_weight.to_string()),
            ("knowledge_train_chain", self.knowledge_train_chain.to_string()),
            ("knowledge_eval_chain", self.knowledge_eval_chain.to_string()),
            ("grid_mode", self.grid_mode.to_string()),
        ]
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys may not repeat.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Short hex digest of the canonical text form.
    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::Config("min_distractors > max_distractors".into()));
        }
        for (k, v) in [("lr", self.lr), ("type_lr", self.type_lr), ("prompt_lr", self.prompt_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if self.grid_mode {
            if !GRID_BATCH.contains(&self.batch_size) {
                return Err(Error::Config(format!(
                    "grid mode: batch_size {} not in {GRID_BATCH:?}",
                    self.batch_size
                )));
            }
            for (k, v) in [("lr", self.lr), ("type_lr", self.type_lr), ("prompt_lr", self.prompt_lr)] {
                if !GRID_LR.iter().any(|g| (g - v).abs() <= 1e-12 * g) {
                    return Err(Error::Config(format!("grid mode: `{k}` {v} not in {GRID_LR:?}")));
                }
            }
            for (k, v) in [
                ("type_prompt_len", self.type_prompt_len),
                ("prefix_len", self.prefix_len),
                ("unified_prompt_len", self.unified_prompt_len),
            ] {
                if !GRID_PROMPT_LEN.contains(&v) {
                    return Err(Error::Config(format!("grid mode: `{k}` {v} not in {GRID_PROMPT_LEN:?}")));
                }
            }
        }
        self.model_config(5).validate()
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            min_distractors: self.min_distractors,
            max_distractors: self.max_distractors,
            noise: self.noise,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            prompt_len: self.type_prompt_len,
            ffn_dim: self.ffn_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_digest() {
        let c = TrainConfig {
            seed: 9,
            knowledge_eval_chain: ChainMode::Gold,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(TrainConfig::default().digest(), c.digest());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        let e = TrainConfig::parse_str("seed = 1\nbatchsize = 8\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("batchsize"), "{e}");
        assert!(TrainConfig::parse_str("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse_str("warmup_ratio = 1.0").is_err());
    }

    #[test]
    fn grid_mode_restricts_values() {
        let base = "grid_mode = true\nlr = 2e-3\ntype_lr = 8e-3\nprompt_lr = 8e-3\n\
                    type_prompt_len = 15\nprefix_len = 30\nunified_prompt_len = 15\n";
        TrainConfig::parse_str(base).unwrap();
        assert!(TrainConfig::parse_str(&format!("{base}batch_size = 6\n")).is_err());
        assert!(TrainConfig::parse_str(&base.replace("lr = 2e-3", "lr = 3e-3")).is_err());
        assert!(TrainConfig::parse_str(&base.replace("prefix_len = 30", "prefix_len = 8")).is_err());
    }
}

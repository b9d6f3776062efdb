//! Flat key-value experiment configuration.
//!
//! The on-disk format is one `key = value` pair per line, `#` comments,
//! blank lines ignored. Unknown keys are rejected so typos surface
//! immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::finetune::FinetuneLoss;
use crate::pretrain::PretrainMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Supervised,
    Unsupervised,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RunMode::Supervised => "supervised",
            RunMode::Unsupervised => "unsupervised",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(RunMode::Supervised),
            "unsupervised" => Ok(RunMode::Unsupervised),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub split_seeds: Vec<u64>,
    /// Runs per split seed.
    pub runs: usize,
    pub mode: RunMode,
    pub method: PretrainMethod,
    pub loss: FinetuneLoss,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    /// K for the unsupervised clustering path.
    pub k: usize,
    pub k_per_class: usize,
    pub barlow_lambda: f64,
    /// Share one pre-trained checkpoint across the runs of a split
    /// instead of pre-training per run.
    pub share_pretrain: bool,
    /// Optional cap on training samples (smoke/CI profile).
    pub limit: Option<usize>,
    /// Optional cap on test samples.
    pub test_limit: Option<usize>,
    /// Offset mixed into every derived seed.
    pub base_seed: u64,
    /// Keep probability for dropout on the encoder's fully connected
    /// layers.
    pub dropout_keep: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "fashion-mnist".into(),
            data_dir: PathBuf::from("data/fashion-mnist"),
            split_seeds: vec![0, 1, 2],
            runs: 3,
            mode: RunMode::Supervised,
            method: PretrainMethod::Fd,
            loss: FinetuneLoss::Ce,
            pretrain_epochs: 50,
            finetune_epochs: 50,
            batch_size: 64,
            lr: 0.001,
            margin: 0.2,
            k: 6,
            k_per_class: 4,
            barlow_lambda: 5e-3,
            share_pretrain: false,
            limit: None,
            test_limit: None,
            base_seed: 0,
            dropout_keep: 0.2,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            kv.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_pairs(&kv)
    }

    fn from_pairs(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (key, value) in kv {
            let bad = |what: &str| Error::Config(format!("key '{key}': bad {what} '{value}'"));
            match key.as_str() {
                "dataset" => {
                    DatasetSpec::by_name(value)?; // validate early
                    cfg.dataset = value.clone();
                }
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "split_seeds" => {
                    cfg.split_seeds = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad("seed list")))
                        .collect::<Result<_>>()?;
                }
                "runs" => cfg.runs = value.parse().map_err(|_| bad("integer"))?,
                "mode" => cfg.mode = value.parse()?,
                "method" => cfg.method = value.parse()?,
                "loss" => cfg.loss = value.parse()?,
                "pretrain_epochs" => {
                    cfg.pretrain_epochs = value.parse().map_err(|_| bad("integer"))?
                }
                "finetune_epochs" => {
                    cfg.finetune_epochs = value.parse().map_err(|_| bad("integer"))?
                }
                "epochs" => {
                    let e = value.parse().map_err(|_| bad("integer"))?;
                    cfg.pretrain_epochs = e;
                    cfg.finetune_epochs = e;
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "margin" => cfg.margin = value.parse().map_err(|_| bad("number"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("integer"))?,
                "k_per_class" => cfg.k_per_class = value.parse().map_err(|_| bad("integer"))?,
                "barlow_lambda" => {
                    cfg.barlow_lambda = value.parse().map_err(|_| bad("number"))?
                }
                "share_pretrain" => {
                    cfg.share_pretrain = value.parse().map_err(|_| bad("boolean"))?
                }
                "limit" => cfg.limit = Some(value.parse().map_err(|_| bad("integer"))?),
                "test_limit" => {
                    cfg.test_limit = Some(value.parse().map_err(|_| bad("integer"))?)
                }
                "base_seed" => cfg.base_seed = value.parse().map_err(|_| bad("integer"))?,
                "dropout_keep" => {
                    cfg.dropout_keep = value.parse().map_err(|_| bad("number"))?
                }
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.split_seeds.is_empty() {
            return Err(Error::Config("need at least one split seed".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout_keep must be in (0, 1]".into()));
        }
        match self.mode {
            RunMode::Supervised if self.loss == FinetuneLoss::None => Err(Error::Config(
                "supervised mode needs loss = CE or TRIPLET".into(),
            )),
            RunMode::Unsupervised if self.loss != FinetuneLoss::None => Err(Error::Config(
                "unsupervised mode must not set a fine-tune loss".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Apply the CI smoke profile: 1,000 training samples, 3 epochs.
    pub fn apply_smoke(&mut self) {
        self.limit = Some(1000);
        self.test_limit = Some(1000);
        self.pretrain_epochs = 3;
        self.finetune_epochs = 3;
    }

    /// Stable hash of the resolved configuration, excluding pure output
    /// plumbing, so artifact reuse survives moving the output directory.
    pub fn hash(&self) -> String {
        let mut hashable = self.clone();
        hashable.output_dir = PathBuf::new();
        hashable.data_dir = PathBuf::new();
        let json = serde_json::to_string(&hashable).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Hash over only the fields that influence pre-training, so
    /// pre-trained checkpoints survive fine-tuning parameter changes.
    pub fn pretrain_hash(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "method": self.method,
            "pretrain_epochs": self.pretrain_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "barlow_lambda": self.barlow_lambda,
            "dropout_keep": self.dropout_keep,
            "limit": self.limit,
            "base_seed": self.base_seed,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Seed for a given (split, run) cell.
    pub fn run_seed(&self, split_seed: u64, run_idx: usize) -> u64 {
        self.base_seed
            .wrapping_mul(1_000_003)
            .wrapping_add(split_seed.wrapping_mul(10_007))
            .wrapping_add(run_idx as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# comment
dataset = fashion-mnist
split_seeds = 0, 1, 2
runs = 10
mode = supervised
method = FD
loss = TRIPLET
pretrain_epochs = 50
finetune_epochs = 40
batch_size = 64
lr = 0.001
margin = 0.2
k = 6
output_dir = runs/fd_triplet
";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.runs, 10);
        assert_eq!(cfg.loss, FinetuneLoss::Triplet);
        assert_eq!(cfg.finetune_epochs, 40);
        assert_eq!(cfg.split_seeds, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_unknown_key_and_bad_values() {
        assert!(ExperimentConfig::from_text("frobnicate = 1").is_err());
        assert!(ExperimentConfig::from_text("runs = zero").is_err());
        assert!(ExperimentConfig::from_text("runs = 0").is_err());
        assert!(ExperimentConfig::from_text("dataset = imagenet").is_err());
    }

    #[test]
    fn mode_loss_exclusivity() {
        assert!(ExperimentConfig::from_text("mode = unsupervised\nloss = CE").is_err());
        assert!(
            ExperimentConfig::from_text("mode = unsupervised\nloss = NONE").is_ok()
        );
        assert!(ExperimentConfig::from_text("mode = supervised\nloss = NONE").is_err());
    }

    #[test]
    fn hash_is_stable_and_ignores_output_dir() {
        let a = ExperimentConfig::from_text("runs = 3\noutput_dir = x").unwrap();
        let b = ExperimentConfig::from_text("runs = 3\noutput_dir = y").unwrap();
        let c = ExperimentConfig::from_text("runs = 4\noutput_dir = x").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn run_seeds_differ_per_cell() {
        let cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for split in [0u64, 1, 2] {
            for run in 0..10 {
                assert!(seen.insert(cfg.run_seed(split, run)));
            }
        }
    }
}

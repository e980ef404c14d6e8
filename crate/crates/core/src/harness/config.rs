//! Run configuration, read from TOML:
//!
//! ```toml
//! [encoder]
//! d = 32
//! [intents]
//! c = 3
//! [corpus]
//! num_train = 5000
//! [train]
//! epochs = 20
//! seed = 7
//! [ablation]
//! no_mask = true
//! [weights]
//! kl = 0.5
//! ```
//!
//! Every section and key is optional. Larger-scale reference values are
//! batch 256 with truncation at 128 or 512 tokens.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, CorpusSpec, Vocab};
use crate::encoder::EncoderConfig;
use crate::intents::IntentConfig;
use crate::matcher::LossWeights;
use crate::model::{AblationFlags, MimConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Elementwise gradient clip range.
    pub clip: [f64; 2],
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub eval_threshold: f64,
    /// Test reports of this many best validation checkpoints are averaged.
    pub best_k: usize,
    /// Renormalize surviving intent weights in the mask task.
    pub mask_renormalize: bool,
    /// The distribution, KL and mask weights ramp linearly from 0 to their
    /// configured values over this many epochs.
    pub aux_warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            clip: [-1.0, 1.0],
            seed: 7,
            eval_threshold: 0.5,
            best_k: 1,
            mask_renormalize: false,
            aux_warmup_epochs: 0.0,
        }
    }
}

/// Dataset files to use instead of generating the corpus in memory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `train.jsonl`, `valid.jsonl` and `test.jsonl`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub intents: IntentConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub weights: LossWeights,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(t.clip[0] < t.clip[1]) {
            return Err(Error::Config("train: lr must be positive and clip a non-empty range".into()));
        }
        if !(t.aux_warmup_epochs >= 0.0) {
            return Err(Error::Config("train: aux_warmup_epochs must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&t.eval_threshold) || t.best_k == 0 {
            return Err(Error::Config("train: eval_threshold must lie in [0,1] and best_k ≥ 1".into()));
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data.dir {} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        build_vocab(&self.corpus)
    }

    /// The model configuration; a zero vocabulary size takes the corpus vocabulary.
    pub fn model(&self) -> MimConfig {
        let mut encoder = self.encoder.clone();
        if encoder.vocab_size == 0 {
            encoder.vocab_size = self.corpus.vocab_size();
        }
        MimConfig {
            encoder,
            intents: self.intents.clone(),
            ablation: self.ablation,
            weights: self.weights,
            mask_renormalize: self.train.mask_renormalize,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.eval_threshold, 0.5);
        assert_eq!(cfg.model().encoder.vocab_size, cfg.corpus.vocab_size());
    }

    #[test]
    fn sections_override_defaults_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "[encoder]\nd = 16\nheads = 2\n[intents]\nc = 2\n[train]\nepochs = 3\n[ablation]\nno_kl = true\n[weights]\nmatch = 2.0\n",
        )
        .unwrap();
        assert_eq!((cfg.encoder.d, cfg.intents.c, cfg.train.epochs), (16, 2, 3));
        assert!(cfg.ablation.no_kl);
        assert_eq!(cfg.weights.match_loss, 2.0);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in ["[train]\nbatch_size = 0", "[intents]\nc = 0", "[train]\nlr = -1.0", "[encoder]\nd = 10\nheads = 4", "[nope]\nx = 1", "[data]\ndir = \"/no/such/dir\""] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_)) | Err(Error::Data(_))), "{bad}");
        }
    }
}

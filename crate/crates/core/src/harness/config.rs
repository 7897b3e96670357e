use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalUnit;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Everything one experiment run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// When set, overrides both `corpus.seed` and `train.seed`.
    pub seed: Option<u64>,
    /// Pairs per task dataset for each training run.
    pub ladder: Vec<usize>,
    /// Pairs per task in the validation split.
    pub valid_size: usize,
    /// Sentences in the joint test set.
    pub test_size: usize,
    pub granularity: EvalUnit,
    /// Decode worker threads.
    pub workers: usize,
    /// Test sentences used for timing.
    pub bench_sentences: usize,
    pub bench_repeats: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
            seed: None,
            ladder: vec![1000, 3000, 5000],
            valid_size: 200,
            test_size: 1000,
            granularity: EvalUnit::Word,
            workers: 1,
            bench_sentences: 200,
            bench_repeats: 3,
            corpus: CorpusConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig {
                learning_rate: 2e-3,
                batch_size: 16,
                max_epochs: 20,
                patience: Some(4),
                lr_decay: Some(0.5),
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.resolved().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the global seed so every seed in the result is explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.corpus.seed = s;
            c.train.seed = s;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.ladder.is_empty() || self.ladder.contains(&0) {
            return Err(Error::Config("ladder needs at least one positive size".into()));
        }
        if self.valid_size == 0 || self.test_size == 0 {
            return Err(Error::Config("valid_size and test_size must be positive".into()));
        }
        if self.bench_repeats < 3 {
            return Err(Error::Config(format!("bench_repeats {} must be at least 3", self.bench_repeats)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(crate::tokenizer::NUM_RESERVED as usize + 1);
        m.validate()
    }

    pub fn max_size(&self) -> usize {
        self.ladder.iter().copied().max().unwrap_or(0)
    }
}

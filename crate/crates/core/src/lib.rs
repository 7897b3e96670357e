//! Switching-token joint modeling of spoken-text-style conversion tasks:
//! disfluency deletion and punctuation restoration with one Transformer
//! encoder-decoder, steered by two decoder prefix tokens.

pub mod autograd;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use corpus::{CorpusConfig, Dataset, ParallelPair, Split, Task, VariantSet};
pub use decoding::{beam_search, cascade, decode_single, greedy_decode, joint_decode, DecodeConfig, Hypothesis, PassCounter};
pub use error::{Error, Result};
pub use harness::{Checkpoint, EvalReport, ExperimentConfig, ModelKind};
pub use metrics::{bleu, gleu, meteor_exact, EvalUnit, ScoreTriple};
pub use model::{Model, ModelConfig, SwitchSetting};
pub use tokenizer::{TokenSequence, Vocabulary};
pub use training::{train, TrainConfig, TrainMode};

//! Shared fixtures for the benchmarks.

use switchtok::corpus::{build_task_datasets, generate_variants, CorpusConfig, Split, TaskDatasets, TaskSizes};
use switchtok::tokenizer::{build_vocab, Vocabulary};

/// Small generated corpus with `n` pairs per task and its vocabulary.
pub fn fixture(n: usize) -> (TaskDatasets, Vocabulary) {
    let variants = generate_variants(&CorpusConfig::default(), 2 * n + n).expect("corpus");
    let sets = build_task_datasets(&variants, TaskSizes { disf: n, punc: n, joint: n }, Split::Train).expect("datasets");
    let vocab = build_vocab([&sets.disf, &sets.punc, &sets.joint_test]).expect("vocab");
    (sets, vocab)
}

//! Synthetic spoken-text corpus with an exact oracle for every conversion
//! variant, plus the task datasets built from it and their line-record file
//! format.
//!
//! A clean sentence is a word sequence with commas before clause markers and
//! a final period. The spoken rendering drops punctuation and injects
//! disfluencies: a filler word may be inserted before any word, and any word
//! may be repeated once. Because the generator never emits two identical
//! adjacent words, every corruption can be undone exactly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COMMA: char = ',';
pub const PERIOD: char = '.';

const DEFAULT_LEXICON: &[&str] = &[
    "the", "a", "cat", "dog", "sat", "ran", "we", "you", "they", "it", "was", "is", "big", "red",
    "old", "new", "home", "car", "tree", "sun", "day", "way", "saw", "had", "got", "put", "see",
    "go", "went", "came", "made", "took", "gave", "left", "kept", "told", "said", "knew", "felt",
    "read", "wrote", "sang", "ate", "hot", "cold", "good", "bad", "long", "short", "fast", "slow",
    "very", "too", "not", "all", "some", "many", "few", "more", "most", "my", "our", "your", "his",
    "her", "its", "this", "that", "here", "there", "now", "soon", "late", "early", "box", "cup",
    "pen", "map", "hat", "bag", "bed", "door", "room", "town", "city", "road", "park", "shop",
    "book", "game", "song", "food", "milk", "tea", "fish", "bird", "rain", "snow", "wind", "sea",
    "lake", "hill", "work", "play", "walk", "talk", "help", "look", "call", "wait", "stay", "move",
    "but", "so", "and", "then", "when", "if",
];

const DEFAULT_CLAUSE_MARKERS: &[&str] = &["but", "so", "and", "then", "when", "if"];

const DEFAULT_FILLERS: &[&str] = &["uh", "um", "er", "ah"];

/// Generator parameters. Every random choice is drawn from a `ChaCha8Rng`
/// seeded with `seed`, so output is stable across platforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub lexicon: Vec<String>,
    /// Lexicon words that open a new clause; a comma may precede them.
    pub clause_markers: Vec<String>,
    pub filler_inventory: Vec<String>,
    pub p_filler: f64,
    pub p_repeat: f64,
    /// Probability that an eligible interior position opens a clause.
    pub p_clause: f64,
    pub p_comma: f64,
    pub length_range: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            lexicon: owned(DEFAULT_LEXICON),
            clause_markers: owned(DEFAULT_CLAUSE_MARKERS),
            filler_inventory: owned(DEFAULT_FILLERS),
            p_filler: 0.15,
            p_repeat: 0.05,
            p_clause: 0.15,
            p_comma: 1.0,
            length_range: (3, 8),
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_filler", self.p_filler),
            ("p_repeat", self.p_repeat),
            ("p_clause", self.p_clause),
            ("p_comma", self.p_comma),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} is outside [0, 1]")));
            }
        }
        let (min, max) = self.length_range;
        if min < 1 || max < min {
            return Err(Error::Config(format!(
                "length_range ({min}, {max}) must satisfy 1 <= min <= max"
            )));
        }
        let lexicon: HashSet<&str> = self.lexicon.iter().map(String::as_str).collect();
        if self.filler_inventory.is_empty() {
            return Err(Error::Config("filler_inventory is empty".into()));
        }
        if let Some(f) = self.filler_inventory.iter().find(|f| lexicon.contains(f.as_str())) {
            return Err(Error::Config(format!("filler {f:?} is also a lexicon word")));
        }
        if let Some(m) = self.clause_markers.iter().find(|m| !lexicon.contains(m.as_str())) {
            return Err(Error::Config(format!("clause marker {m:?} is not in the lexicon")));
        }
        for w in self.lexicon.iter().chain(&self.filler_inventory) {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Config(format!(
                    "word {w:?} must be non-empty lowercase ASCII letters"
                )));
            }
        }
        if self.content_words().len() < 2 {
            return Err(Error::Config(
                "lexicon needs at least two non-marker words".into(),
            ));
        }
        Ok(())
    }

    fn content_words(&self) -> Vec<&str> {
        let markers: HashSet<&str> = self.clause_markers.iter().map(String::as_str).collect();
        self.lexicon
            .iter()
            .map(String::as_str)
            .filter(|w| !markers.contains(w))
            .collect()
    }

    pub fn is_filler(&self, word: &str) -> bool {
        self.filler_inventory.iter().any(|f| f == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Punct {
    Comma,
    Period,
}

impl Punct {
    pub fn as_char(self) -> char {
        match self {
            Punct::Comma => COMMA,
            Punct::Period => PERIOD,
        }
    }
}

/// Written-style reference: words plus the mark following each punctuated word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanSentence {
    pub words: Vec<String>,
    pub punctuation: BTreeMap<usize, Punct>,
}

impl CleanSentence {
    /// Words joined with single spaces, marks attached to the preceding word.
    pub fn render(&self) -> String {
        self.punctuate(&self.words)
    }

    /// Applies this sentence's punctuation pattern to `words` by index.
    pub fn punctuate<S: AsRef<str>>(&self, words: &[S]) -> String {
        let mut out = String::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(w.as_ref());
            if let Some(p) = self.punctuation.get(&i) {
                out.push(p.as_char());
            }
        }
        out
    }
}

/// Oracle renderings of one clean sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSet {
    pub spoken: String,
    pub disf_target: String,
    pub punc_target: String,
    pub joint_target: String,
}

/// Corruption drawn for the slot in front of one clean word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotDraw {
    pub filler: Option<String>,
    pub repeat: bool,
}

impl VariantSet {
    /// Renders all four variants for a fixed set of per-word draws.
    /// `draws` shorter than the sentence leaves trailing slots clean.
    pub fn from_draws(clean: &CleanSentence, draws: &[SlotDraw]) -> Self {
        let none = SlotDraw::default();
        let mut spoken = Vec::new();
        let mut punc = Vec::new();
        for (i, word) in clean.words.iter().enumerate() {
            let draw = draws.get(i).unwrap_or(&none);
            if let Some(f) = &draw.filler {
                spoken.push(f.clone());
                punc.push(f.clone());
            }
            if draw.repeat {
                spoken.push(word.clone());
                punc.push(word.clone());
            }
            spoken.push(word.clone());
            let mut marked = word.clone();
            if let Some(p) = clean.punctuation.get(&i) {
                marked.push(p.as_char());
            }
            punc.push(marked);
        }
        VariantSet {
            spoken: spoken.join(" "),
            disf_target: clean.words.join(" "),
            punc_target: punc.join(" "),
            joint_target: clean.render(),
        }
    }
}

fn draw_clean(config: &CorpusConfig, content: &[&str], markers: &[&str], rng: &mut ChaCha8Rng) -> CleanSentence {
    let (min, max) = config.length_range;
    let len = rng.random_range(min..=max);
    let mut words: Vec<String> = Vec::with_capacity(len);
    let mut punctuation = BTreeMap::new();
    let mut prev_marker = false;
    for i in 0..len {
        let eligible = i >= 2 && i + 1 < len && !prev_marker && !markers.is_empty();
        if eligible && rng.random_bool(config.p_clause) {
            let m = *markers.choose(rng).expect("markers non-empty");
            if rng.random_bool(config.p_comma) {
                punctuation.insert(i - 1, Punct::Comma);
            }
            words.push(m.to_string());
            prev_marker = true;
            continue;
        }
        prev_marker = false;
        let w = loop {
            let w = *content.choose(rng).expect("content non-empty");
            if words.last().map(String::as_str) != Some(w) {
                break w;
            }
        };
        words.push(w.to_string());
    }
    punctuation.insert(len - 1, Punct::Period);
    CleanSentence { words, punctuation }
}

/// Generates `n` clean sentences, a pure function of `(config, n)`.
pub fn generate_clean(config: &CorpusConfig, n: usize) -> Result<Vec<CleanSentence>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("sentence count must be at least 1".into()));
    }
    let content = config.content_words();
    let markers: Vec<&str> = config.clause_markers.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok((0..n)
        .map(|_| draw_clean(config, &content, &markers, &mut rng))
        .collect())
}

/// Like [`generate_clean`], but skips sentences whose rendering was already
/// produced, so that every returned sentence (and thus every spoken variant)
/// is unique.
pub fn generate_unique_clean(config: &CorpusConfig, n: usize) -> Result<Vec<CleanSentence>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("sentence count must be at least 1".into()));
    }
    let content = config.content_words();
    let markers: Vec<&str> = config.clause_markers.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > n.saturating_mul(50).max(1000) {
            return Err(Error::Size(format!(
                "could only draw {} unique sentences out of {n}",
                out.len()
            )));
        }
        let s = draw_clean(config, &content, &markers, &mut rng);
        if seen.insert(s.render()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Draws the spoken corruption for `clean` and renders every variant.
pub fn make_variants<R: Rng>(clean: &CleanSentence, config: &CorpusConfig, rng: &mut R) -> VariantSet {
    let draws: Vec<SlotDraw> = clean
        .words
        .iter()
        .map(|_| {
            let filler = if rng.random_bool(config.p_filler) {
                config.filler_inventory.choose(rng).cloned()
            } else {
                None
            };
            let repeat = rng.random_bool(config.p_repeat);
            SlotDraw { filler, repeat }
        })
        .collect();
    VariantSet::from_draws(clean, &draws)
}

/// Convenience: clean generation followed by variant rendering, using a
/// second stream derived from the corpus seed.
pub fn generate_variants(config: &CorpusConfig, n: usize) -> Result<Vec<VariantSet>> {
    let clean = generate_unique_clean(config, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5b0c_e4);
    Ok(clean.iter().map(|c| make_variants(c, config, &mut rng)).collect())
}

fn strip_word(w: &str) -> &str {
    w.trim_end_matches([COMMA, PERIOD])
}

/// Drops filler words and collapses single-word repetitions.
///
/// Exact on generator output: clean sentences never contain two identical
/// adjacent words, so any adjacent pair that matches after stripping marks
/// (with no mark on the first copy) is a repetition.
pub fn remove_disfluencies(text: &str, fillers: &[String]) -> String {
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|w| !fillers.iter().any(|f| f == strip_word(w)))
        .collect();
    let mut out: Vec<&str> = Vec::with_capacity(kept.len());
    for (i, w) in kept.iter().enumerate() {
        let repeated = i + 1 < kept.len() && strip_word(w) == *w && strip_word(kept[i + 1]) == *w;
        if !repeated {
            out.push(w);
        }
    }
    out.join(" ")
}

pub fn strip_punctuation(text: &str) -> String {
    text.chars().filter(|c| *c != COMMA && *c != PERIOD).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Disf,
    Punc,
    Same,
    Joint,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Disf, Task::Punc, Task::Same, Task::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Disf => "disf",
            Task::Punc => "punc",
            Task::Same => "same",
            Task::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    /// Split named by a `<name>.<split>.jsonl` file stem; train otherwise.
    pub fn from_path(path: &Path) -> Split {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        match stem.rsplit('.').next() {
            Some("valid") => Split::Valid,
            Some("test") => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
    pub task: Task,
}

impl ParallelPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>, task: Task) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<ParallelPair>,
    pub split: Split,
    /// `None` only for an empty dataset read from disk.
    pub task: Option<Task>,
}

impl Dataset {
    pub fn new(task: Task, split: Split, pairs: Vec<ParallelPair>) -> Self {
        debug_assert!(pairs.iter().all(|p| p.task == task));
        Self {
            pairs,
            split,
            task: Some(task),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Requested dataset sizes, in sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSizes {
    pub disf: usize,
    pub punc: usize,
    pub joint: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDatasets {
    pub disf: Dataset,
    pub punc: Dataset,
    pub same: Dataset,
    pub joint_test: Dataset,
}

/// Assembles D_disf, D_punc, D_same and the joint test set from consecutive,
/// non-overlapping blocks of `variants` (disf first, then punc, then joint).
///
/// D_same pairs every source of D_disf and D_punc with itself, so
/// `|D_same| = |D_disf| + |D_punc|`.
pub fn build_task_datasets(variants: &[VariantSet], sizes: TaskSizes, split: Split) -> Result<TaskDatasets> {
    let needed = sizes.disf + sizes.punc + sizes.joint;
    if variants.len() < needed {
        return Err(Error::Size(format!(
            "need {needed} variant sets, got {}",
            variants.len()
        )));
    }
    let (disf_vs, rest) = variants.split_at(sizes.disf);
    let (punc_vs, rest) = rest.split_at(sizes.punc);
    let joint_vs = &rest[..sizes.joint];

    let disf: Vec<_> = disf_vs
        .iter()
        .map(|v| ParallelPair::new(&v.spoken, &v.disf_target, Task::Disf))
        .collect();
    let punc: Vec<_> = punc_vs
        .iter()
        .map(|v| ParallelPair::new(&v.spoken, &v.punc_target, Task::Punc))
        .collect();
    let same: Vec<_> = disf
        .iter()
        .chain(&punc)
        .map(|p| ParallelPair::new(&p.source, &p.source, Task::Same))
        .collect();
    let joint: Vec<_> = joint_vs
        .iter()
        .map(|v| ParallelPair::new(&v.spoken, &v.joint_target, Task::Joint))
        .collect();

    Ok(TaskDatasets {
        disf: Dataset::new(Task::Disf, split, disf),
        punc: Dataset::new(Task::Punc, split, punc),
        same: Dataset::new(Task::Same, split, same),
        joint_test: Dataset::new(Task::Joint, Split::Test, joint),
    })
}

#[derive(Serialize)]
struct RecordOut<'a> {
    source: &'a str,
    target: &'a str,
    task: Task,
}

/// Writes one JSON object per line: `{"source":..,"target":..,"task":..}`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &ds.pairs {
        let rec = RecordOut {
            source: &p.source,
            target: &p.target,
            task: p.task,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset file. The split comes from the file name
/// (`name.valid.jsonl`, `name.test.jsonl`; anything else is train).
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut task: Option<Task> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = parse_record(&line).map_err(|(schema, msg)| {
            let path = path.to_path_buf();
            if schema {
                Error::Schema { path, line: line_no, msg }
            } else {
                Error::Parse { path, line: line_no, msg }
            }
        })?;
        match task {
            None => task = Some(pair.task),
            Some(t) if t != pair.task => {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("task {} differs from the file's task {t}", pair.task),
                })
            }
            Some(_) => {}
        }
        pairs.push(pair);
    }
    Ok(Dataset {
        pairs,
        split: Split::from_path(path),
        task,
    })
}

/// `Err((is_schema_error, message))`.
fn parse_record(line: &str) -> std::result::Result<ParallelPair, (bool, String)> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| (false, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| (true, "record is not an object".to_string()))?;
    let field = |name: &str| {
        obj.get(name)
            .and_then(|v| v.as_str())
            .ok_or_else(|| (true, format!("missing string field {name:?}")))
    };
    let source = field("source")?;
    let target = field("target")?;
    let label = field("task")?;
    let task = Task::parse(label).ok_or_else(|| (true, format!("unknown task label {label:?}")))?;
    Ok(ParallelPair::new(source, target, task))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat_sat() -> CleanSentence {
        CleanSentence {
            words: vec!["the".into(), "cat".into(), "sat".into()],
            punctuation: BTreeMap::from([(2, Punct::Period)]),
        }
    }

    #[test]
    fn forced_filler_at_slot_zero() {
        let draws = [SlotDraw {
            filler: Some("uh".into()),
            repeat: false,
        }];
        let v = VariantSet::from_draws(&cat_sat(), &draws);
        assert_eq!(v.spoken, "uh the cat sat");
        assert_eq!(v.disf_target, "the cat sat");
        assert_eq!(v.punc_target, "uh the cat sat.");
        assert_eq!(v.joint_target, "the cat sat.");
    }

    #[test]
    fn repetition_keeps_mark_on_second_copy() {
        let clean = CleanSentence {
            words: vec!["we".into(), "went".into(), "home".into(), "but".into(), "it".into()],
            punctuation: BTreeMap::from([(2, Punct::Comma), (4, Punct::Period)]),
        };
        let draws = vec![
            SlotDraw::default(),
            SlotDraw::default(),
            SlotDraw { filler: None, repeat: true },
            SlotDraw { filler: Some("um".into()), repeat: false },
        ];
        let v = VariantSet::from_draws(&clean, &draws);
        assert_eq!(v.spoken, "we went home home um but it");
        assert_eq!(v.punc_target, "we went home home, um but it.");
        let fillers = CorpusConfig::default().filler_inventory;
        assert_eq!(remove_disfluencies(&v.punc_target, &fillers), v.joint_target);
        assert_eq!(remove_disfluencies(&v.spoken, &fillers), v.disf_target);
    }

    #[test]
    fn zero_probabilities_only_strip_punctuation() {
        let cfg = CorpusConfig {
            p_filler: 0.0,
            p_repeat: 0.0,
            ..Default::default()
        };
        for v in generate_variants(&cfg, 200).unwrap() {
            assert_eq!(v.spoken, v.disf_target);
            assert_eq!(v.punc_target, v.joint_target);
        }
    }

    #[test]
    fn fixed_length_range() {
        let cfg = CorpusConfig {
            length_range: (4, 4),
            ..Default::default()
        };
        for s in generate_clean(&cfg, 50).unwrap() {
            assert_eq!(s.words.len(), 4);
            assert_eq!(s.punctuation.get(&3), Some(&Punct::Period));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            CorpusConfig { p_filler: 1.5, ..Default::default() },
            CorpusConfig { length_range: (0, 3), ..Default::default() },
            CorpusConfig { length_range: (5, 3), ..Default::default() },
            CorpusConfig {
                filler_inventory: vec!["cat".into()],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_clean(&cfg, 1), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(generate_clean(&CorpusConfig::default(), 0).is_err());
    }

    #[test]
    fn same_dataset_cardinality() {
        let vs = generate_variants(&CorpusConfig::default(), 25).unwrap();
        let sizes = TaskSizes { disf: 10, punc: 10, joint: 5 };
        let ds = build_task_datasets(&vs, sizes, Split::Train).unwrap();
        assert_eq!(ds.same.len(), 20);
        assert!(ds.same.pairs.iter().all(|p| p.source == p.target));
        let train: HashSet<&str> = ds
            .disf
            .pairs
            .iter()
            .chain(&ds.punc.pairs)
            .chain(&ds.same.pairs)
            .map(|p| p.source.as_str())
            .collect();
        assert!(ds.joint_test.pairs.iter().all(|p| !train.contains(p.source.as_str())));
        assert_eq!(ds.joint_test.split, Split::Test);

        let too_many = TaskSizes { disf: 20, punc: 10, joint: 0 };
        assert!(matches!(build_task_datasets(&vs, too_many, Split::Train), Err(Error::Size(_))));
    }

    #[test]
    fn split_from_file_name() {
        assert_eq!(Split::from_path(Path::new("d/disf.valid.jsonl")), Split::Valid);
        assert_eq!(Split::from_path(Path::new("joint.test.jsonl")), Split::Test);
        assert_eq!(Split::from_path(Path::new("whatever.jsonl")), Split::Train);
    }
}

//! Beam search, single-task, cascaded and zero-shot joint decoding.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::model::{build_decoder_input, prefix_len, Model, PaddedBatch, SwitchSetting};
use crate::tensor::{log_softmax, Real};
use crate::tokenizer::{is_reserved, TokenSequence, Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, ending with EOS when finished.
    pub ids: TokenSequence,
    pub logprob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generation limit in tokens, EOS included.
    pub max_len: usize,
    pub switch: Option<SwitchSetting>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 150,
            switch: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_switch(self, switch: Option<SwitchSetting>) -> Self {
        Self { switch, ..self }
    }
}

fn legal(id: usize) -> bool {
    id as u32 == EOS || !is_reserved(id as u32)
}

fn step_limit<T: Real>(model: &Model<T>, dc: &DecodeConfig) -> usize {
    dc.max_len.min(model.config.max_len - prefix_len(dc.switch))
}

fn check_source(source: &[u32]) -> Result<()> {
    if source.is_empty() {
        Err(Error::Empty("cannot decode an empty source".into()))
    } else {
        Ok(())
    }
}

/// Beam search without length normalisation. Hypotheses retire on EOS;
/// the search ends once `beam_size` are finished, no live beam can still
/// beat the best finished one, or the step limit is reached.
pub fn beam_search<T: Real>(model: &Model<T>, source: &[u32], dc: &DecodeConfig) -> Result<Hypothesis> {
    dc.validate()?;
    check_source(source)?;
    let memory = model.encode_memory(source)?;
    let mut cache = model.new_cache(1);
    let prefix = build_decoder_input(dc.switch, &[], model.config.max_len)?;
    let mut logits = Vec::new();
    for &tok in &prefix {
        logits = model.decoder_step(&memory, &mut cache, &[tok])?;
    }
    let vocab = model.config.vocab_size;
    let mut live: Vec<(TokenSequence, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_limit(model, dc) {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (_, score)) in live.iter().enumerate() {
            let lp = log_softmax(&logits[b * vocab..(b + 1) * vocab]);
            cands.extend(
                lp.iter()
                    .enumerate()
                    .filter(|&(id, _)| legal(id))
                    .map(|(id, &l)| (score + l, b, id as u32)),
            );
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(dc.beam_size - finished.len());
        let mut next = Vec::new();
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        for (score, b, tok) in cands {
            let mut ids = live[b].0.clone();
            ids.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    ids,
                    logprob: score,
                    finished: true,
                });
            } else {
                next.push((ids, score));
                parents.push(b);
                tokens.push(tok);
            }
        }
        live = next;
        let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= dc.beam_size || live.is_empty() || best_done >= best_live {
            break;
        }
        cache = cache.select(&parents);
        logits = model.decoder_step(&memory, &mut cache, &tokens)?;
    }
    let best = |hs: Vec<Hypothesis>| hs.into_iter().reduce(|a, b| if b.logprob > a.logprob { b } else { a });
    if let Some(h) = best(finished) {
        return Ok(h);
    }
    let partial = live
        .into_iter()
        .map(|(ids, logprob)| Hypothesis {
            ids,
            logprob,
            finished: false,
        })
        .collect();
    best(partial).ok_or_else(|| Error::Empty("beam search produced no hypothesis".into()))
}

/// Stepwise argmax that reruns the full forward pass at every step.
pub fn greedy_decode<T: Real>(model: &Model<T>, source: &[u32], dc: &DecodeConfig) -> Result<Hypothesis> {
    check_source(source)?;
    let src = PaddedBatch::from_seqs(&[source]);
    let mut ids: TokenSequence = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..step_limit(model, dc) {
        let dec = build_decoder_input(dc.switch, &ids, model.config.max_len)?;
        let logits = model.forward_eval(&src, &PaddedBatch::from_seqs(&[&dec]))?;
        let lp = log_softmax(logits.at(0, dec.len() - 1));
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|&(id, _)| legal(id))
            .fold((0, f64::NEG_INFINITY), |acc, (id, &l)| if l > acc.1 { (id, l) } else { acc });
        ids.push(tok as u32);
        logprob += l;
        if tok as u32 == EOS {
            return Ok(Hypothesis {
                ids,
                logprob,
                finished: true,
            });
        }
    }
    Ok(Hypothesis {
        ids,
        logprob,
        finished: false,
    })
}

/// Counts model decoding passes (one per beam search) and the passes that
/// hit the length limit without finishing.
#[derive(Debug, Default)]
pub struct PassCounter {
    passes: AtomicUsize,
    unfinished: AtomicUsize,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn unfinished(&self) -> usize {
        self.unfinished.load(Ordering::Relaxed)
    }

    pub fn bump(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        self.passes.store(0, Ordering::Relaxed);
        self.unfinished.store(0, Ordering::Relaxed);
    }
}

/// A text-to-text conversion step.
pub trait Converter: Sync {
    fn convert(&self, text: &str) -> Result<String>;
}

impl<F: Fn(&str) -> Result<String> + Sync> Converter for F {
    fn convert(&self, text: &str) -> Result<String> {
        self(text)
    }
}

/// A model run with one fixed switch setting (or none, for baselines).
pub struct ModelConverter<'a> {
    pub model: &'a Model<f32>,
    pub vocab: &'a Vocabulary,
    pub config: DecodeConfig,
    pub passes: &'a PassCounter,
}

impl<'a> ModelConverter<'a> {
    pub fn new(model: &'a Model<f32>, vocab: &'a Vocabulary, config: DecodeConfig, passes: &'a PassCounter) -> Self {
        Self {
            model,
            vocab,
            config,
            passes,
        }
    }

    pub fn hypothesis(&self, text: &str) -> Result<Hypothesis> {
        self.passes.bump();
        beam_search(self.model, &self.vocab.encode(text), &self.config)
    }
}

impl Converter for ModelConverter<'_> {
    /// Empty text converts to empty text (the pass is still counted).
    fn convert(&self, text: &str) -> Result<String> {
        if text.is_empty() {
            self.passes.bump();
            return Ok(String::new());
        }
        let h = self.hypothesis(text)?;
        if !h.finished {
            self.passes.unfinished.fetch_add(1, Ordering::Relaxed);
        }
        self.vocab.decode(&h.ids)
    }
}

/// Single-task decoding with a joint model: the task picks the switches.
pub fn decode_single(
    model: &Model<f32>,
    vocab: &Vocabulary,
    source: &str,
    task: Task,
    dc: &DecodeConfig,
    passes: &PassCounter,
) -> Result<String> {
    if task == Task::Joint {
        return Err(Error::Config("decode_single takes disf, punc or same".into()));
    }
    let dc = dc.with_switch(Some(SwitchSetting::for_task(task)));
    ModelConverter::new(model, vocab, dc, passes).convert(source)
}

/// `second(first(source))`.
pub fn cascade(first: &dyn Converter, second: &dyn Converter, source: &str) -> Result<String> {
    second.convert(&first.convert(source)?)
}

/// One pass with both conversions switched on.
pub fn joint_decode(
    model: &Model<f32>,
    vocab: &Vocabulary,
    source: &str,
    dc: &DecodeConfig,
    passes: &PassCounter,
) -> Result<String> {
    let dc = dc.with_switch(Some(SwitchSetting::JOINT));
    ModelConverter::new(model, vocab, dc, passes).convert(source)
}

/// Converts `sources` with `workers` threads; output order follows input.
pub fn convert_all<S: AsRef<str> + Sync>(conv: &dyn Converter, sources: &[S], workers: usize) -> Result<Vec<String>> {
    let workers = workers.max(1).min(sources.len().max(1));
    if workers == 1 {
        return sources.iter().map(|s| conv.convert(s.as_ref())).collect();
    }
    let chunk = sources.len().div_ceil(workers);
    let parts: Vec<Result<Vec<String>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| conv.convert(s.as_ref())).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Sidecar written next to a decoded file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTiming {
    pub sentences: usize,
    pub wallclock_s: f64,
    pub passes: usize,
    pub workers: usize,
}

/// Decodes one source per line of `input` into `output` and writes a JSON
/// timing record to `sidecar`.
pub fn decode_file(
    conv: &dyn Converter,
    passes: &PassCounter,
    input: &Path,
    output: &Path,
    sidecar: &Path,
    workers: usize,
) -> Result<DecodeTiming> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let sources: Vec<&str> = text.lines().collect();
    let before = passes.get();
    let started = Instant::now();
    let outputs = convert_all(conv, &sources, workers)?;
    let timing = DecodeTiming {
        sentences: sources.len(),
        wallclock_s: started.elapsed().as_secs_f64(),
        passes: passes.get() - before,
        workers: workers.max(1),
    };
    let mut f = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    for o in &outputs {
        writeln!(f, "{o}").map_err(|e| Error::io(output, e))?;
    }
    fs::write(sidecar, serde_json::to_string_pretty(&timing)? + "\n").map_err(|e| Error::io(sidecar, e))?;
    Ok(timing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::ParamId;

    fn tiny(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            max_len: 24,
            vocab_size: 12,
            init_gain: 3.0,
        };
        Model::init(&cfg, seed).unwrap()
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        for seed in 0..100 {
            let m = tiny(seed);
            let src = [8 + (seed % 4) as u32, 9, 10, 11];
            for switch in [None, Some(SwitchSetting::JOINT)] {
                let dc = DecodeConfig {
                    beam_size: 1,
                    max_len: 12,
                    switch,
                };
                let b = beam_search(&m, &src, &dc).unwrap();
                let g = greedy_decode(&m, &src, &dc).unwrap();
                assert_eq!(b.ids, g.ids, "seed {seed}");
                assert!((b.logprob - g.logprob).abs() < 1e-9);
                assert_eq!(b.finished, g.finished);
            }
        }
    }

    #[test]
    fn wider_beam_scores_at_least_greedy() {
        for seed in 0..30 {
            let m = tiny(seed);
            let src = [9u32, 8, 11];
            let dc = DecodeConfig {
                beam_size: 4,
                max_len: 12,
                switch: Some(SwitchSetting::DISF),
            };
            let wide = beam_search(&m, &src, &dc).unwrap();
            let narrow = beam_search(&m, &src, &DecodeConfig { beam_size: 1, ..dc }).unwrap();
            if wide.finished && narrow.finished {
                assert!(wide.logprob >= narrow.logprob - 1e-12, "seed {seed}");
            }
            assert!(wide.ids.len() <= 12);
        }
    }

    #[test]
    fn hypothesis_logprob_matches_model() {
        let m = tiny(5);
        let src = [8u32, 9, 10];
        let dc = DecodeConfig {
            beam_size: 3,
            max_len: 20,
            switch: Some(SwitchSetting::PUNC),
        };
        let h = beam_search(&m, &src, &dc).unwrap();
        if h.finished {
            assert_eq!(h.ids.last(), Some(&EOS));
            let lp = m.logprob_of(&src, dc.switch, &h.ids).unwrap();
            assert!((lp - h.logprob).abs() < 1e-9);
        }
        assert!(h.ids.iter().all(|&id| id == EOS || !is_reserved(id)));
    }

    #[test]
    fn degenerate_model_emits_its_sequence() {
        let mut m = tiny(1);
        let out = ParamId(m.params.tensors.iter().position(|t| t.name == "out_proj.weight").unwrap());
        let bias = ParamId(out.0 + 1);
        m.params.get_mut(out).data.iter_mut().for_each(|x| *x = 0.0);
        m.params.get_mut(bias).data[EOS as usize] = 50.0;
        for beam in 1..=4 {
            let dc = DecodeConfig {
                beam_size: beam,
                max_len: 10,
                switch: None,
            };
            assert_eq!(beam_search(&m, &[8, 9], &dc).unwrap().ids, vec![EOS]);
        }
        let tgt = m.config.max_len;
        m.params.get_mut(bias).data[EOS as usize] = 0.0;
        m.params.get_mut(bias).data[10] = 50.0;
        let dc = DecodeConfig {
            beam_size: 1,
            max_len: 5,
            switch: Some(SwitchSetting::SAME),
        };
        let h = beam_search(&m, &[8], &dc).unwrap();
        assert_eq!((h.ids, h.finished), (vec![10; 5], false));
        assert!(tgt > 5);
    }

    #[test]
    fn empty_source_rejected() {
        assert!(beam_search(&tiny(0), &[], &DecodeConfig::default()).is_err());
        assert!(DecodeConfig { beam_size: 0, ..DecodeConfig::default() }.validate().is_err());
    }

    #[test]
    fn cascade_composes_converters() {
        let upper = |s: &str| Ok(s.to_uppercase());
        let dot = |s: &str| Ok(format!("{s}."));
        let id = |s: &str| Ok(s.to_string());
        assert_eq!(cascade(&upper, &dot, "ab").unwrap(), "AB.");
        assert_eq!(cascade(&dot, &upper, "ab").unwrap(), "AB.");
        assert_eq!(cascade(&id, &id, "x y").unwrap(), "x y");
    }

    #[test]
    fn pass_counter_tracks_calls() {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 8,
            max_len: 16,
            ..ModelConfig::desk()
        };
        let m = Model::<f32>::init(&cfg, 2).unwrap();
        let vocab = Vocabulary::from_chars("a b".chars());
        let passes = PassCounter::new();
        let dc = DecodeConfig {
            max_len: 6,
            ..DecodeConfig::default()
        };
        let a = ModelConverter::new(&m, &vocab, dc.with_switch(Some(SwitchSetting::DISF)), &passes);
        let b = ModelConverter::new(&m, &vocab, dc.with_switch(Some(SwitchSetting::PUNC)), &passes);
        cascade(&a, &b, "a b").unwrap();
        assert_eq!(passes.get(), 2);
        passes.reset();
        joint_decode(&m, &vocab, "a b", &dc, &passes).unwrap();
        assert_eq!(passes.get(), 1);
        let single = decode_single(&m, &vocab, "a b", Task::Disf, &dc, &passes).unwrap();
        assert_eq!(single, a.convert("a b").unwrap());
        let sources = vec!["a", "b a", "a a b", "b"];
        assert_eq!(
            convert_all(&a, &sources, 3).unwrap(),
            convert_all(&a, &sources, 1).unwrap()
        );
    }
}

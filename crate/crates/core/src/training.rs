//! Label-smoothed joint training with RAdam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{Dataset, ParallelPair, Task};
use crate::error::{Error, Result};
use crate::model::{build_decoder_input, prefix_len, Model, ModelConfig, PaddedBatch, SwitchSetting};
use crate::tensor::{first_non_finite, ParamStore, Real};
use crate::tokenizer::{TokenSequence, Vocabulary, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Multiply the learning rate by this factor after each epoch without a
    /// validation improvement.
    pub lr_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            label_smoothing: 0.1,
            batch_size: 64,
            max_epochs: 30,
            grad_clip_norm: Some(5.0),
            seed: 1,
            shuffle: true,
            patience: None,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("lr_decay {d} must lie in (0, 1)"));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Length of the simple moving average approximation at step `t`.
pub fn radam_rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// One rectified Adam update. Gradients are checked for finiteness first,
/// so a failing step leaves parameters and state untouched.
pub fn radam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.tensors.iter().zip(grads) {
        if g.len() != p.len() {
            return Err(Error::Shape(format!("gradient of {} has {} entries, expected {}", p.name, g.len(), p.len())));
        }
        if let Some(i) = first_non_finite(g) {
            return Err(Error::Numeric(format!("gradient of {}[{i}]", p.name)));
        }
    }
    state.t += 1;
    let t = state.t;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho = radam_rho(t, b2);
    let rect = (rho > 4.0).then(|| {
        (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
    });
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let lr = cfg.learning_rate;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.data.len() {
            m[j] = tb1 * m[j] + ob1 * g[j];
            v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
            let m_hat = m[j].as_f64() / bc1;
            let step = match rect {
                Some(r) => {
                    let v_hat = (v[j].as_f64() / bc2).sqrt();
                    lr * r * m_hat / (v_hat + cfg.eps)
                }
                None => lr * m_hat,
            };
            p.data[j] = p.data[j] - T::of(step);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x = *x * s);
    }
    norm
}

/// Summed smoothed cross-entropy over rows whose target is not `pad`, with
/// the number of such rows.
pub fn label_smoothed_loss_sum<T: Real>(logits: &[T], targets: &[u32], eps: f64, pad: u32) -> (f64, usize) {
    let vocab = logits.len() / targets.len().max(1);
    let mut total = 0.0;
    let mut count = 0;
    for (r, &y) in targets.iter().enumerate() {
        if y == pad {
            continue;
        }
        let lp = crate::tensor::log_softmax(&logits[r * vocab..(r + 1) * vocab]);
        let sum: f64 = lp.iter().sum();
        total -= (1.0 - eps) * lp[y as usize] + eps / vocab as f64 * sum;
        count += 1;
    }
    (total, count)
}

/// Mean smoothed cross-entropy over non-PAD rows of `logits` `[rows, vocab]`.
pub fn label_smoothed_loss<T: Real>(logits: &[T], targets: &[u32], eps: f64, pad: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if targets.is_empty() || logits.len() % targets.len() != 0 {
        return Err(Error::Shape(format!("{} logits for {} targets", logits.len(), targets.len())));
    }
    match label_smoothed_loss_sum(logits, targets, eps, pad) {
        (_, 0) => Err(Error::Empty("every target position is padding".into())),
        (s, n) => Ok(s / n as f64),
    }
}

/// Whether a model is trained with switch prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Joint,
    /// Single-task model without switch prefixes.
    Baseline,
}

/// One tokenized training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub task: Task,
    pub switch: Option<SwitchSetting>,
}

impl Example {
    pub fn encode(vocab: &Vocabulary, pair: &ParallelPair, mode: TrainMode) -> Self {
        Self {
            source: vocab.encode(&pair.source),
            target: vocab.encode(&pair.target),
            task: pair.task,
            switch: match mode {
                TrainMode::Joint => Some(SwitchSetting::for_task(pair.task)),
                TrainMode::Baseline => None,
            },
        }
    }
}

/// Right-padded sources, decoder inputs and aligned targets. Decoder row
/// `[s_disf, s_punc, BOS, y1..yn]` is paired with targets
/// `[PAD, PAD, y1..yn, EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: PaddedBatch,
    pub decoder: PaddedBatch,
    pub targets: Vec<u32>,
    pub tasks: Vec<Task>,
    pub switches: Vec<Option<SwitchSetting>>,
}

impl Batch {
    pub fn assemble(examples: &[&Example], max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch without examples".into()));
        }
        let mut decs = Vec::with_capacity(examples.len());
        let mut tgts = Vec::with_capacity(examples.len());
        for ex in examples {
            if let Some(s) = ex.switch {
                if s != SwitchSetting::for_task(ex.task) {
                    return Err(Error::Consistency {
                        task: ex.task.to_string(),
                        switch: s.to_string(),
                    });
                }
            }
            if ex.source.is_empty() || ex.source.len() > max_len {
                return Err(Error::Length {
                    len: ex.source.len(),
                    limit: max_len,
                });
            }
            let dec = build_decoder_input(ex.switch, &ex.target, max_len)?;
            let mut tgt = vec![PAD; prefix_len(ex.switch) - 1];
            tgt.extend_from_slice(&ex.target);
            tgt.push(EOS);
            decs.push(dec);
            tgts.push(tgt);
        }
        let decoder = PaddedBatch::from_seqs(&decs);
        let targets = PaddedBatch::with_len(&tgts, decoder.len).ids;
        Ok(Self {
            source: PaddedBatch::from_seqs(&examples.iter().map(|e| e.source.as_slice()).collect::<Vec<_>>()),
            decoder,
            targets,
            tasks: examples.iter().map(|e| e.task).collect(),
            switches: examples.iter().map(|e| e.switch).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Number of scored (non-PAD) target positions.
    pub fn num_tokens(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

/// Summed loss of a pass over batches, split by task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub tokens: usize,
    pub disf: f64,
    pub punc: f64,
    pub same: f64,
}

impl JointLoss {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens.max(1) as f64
    }

    fn add_task(&mut self, task: Task, v: f64) {
        match task {
            Task::Disf => self.disf += v,
            Task::Punc => self.punc += v,
            Task::Same => self.same += v,
            Task::Joint => {}
        }
    }
}

/// Summed (unaveraged) smoothed loss over `batches` in evaluation mode.
pub fn joint_loss<T: Real>(model: &Model<T>, batches: &[Batch], eps: f64) -> Result<JointLoss> {
    let mut out = JointLoss::default();
    for b in batches {
        let logits = model.forward_eval(&b.source, &b.decoder)?;
        let len = b.decoder.len;
        for (i, &task) in b.tasks.iter().enumerate() {
            let rows = &logits.data[i * len * logits.vocab..(i + 1) * len * logits.vocab];
            let (s, n) = label_smoothed_loss_sum(rows, &b.targets[i * len..(i + 1) * len], eps, PAD);
            out.total += s;
            out.tokens += n;
            out.add_task(task, s);
        }
    }
    Ok(out)
}

/// Loss and parameter gradients of one batch; the loss is the mean over
/// target tokens.
pub fn batch_gradients<T: Real, R: rand::Rng>(
    model: &Model<T>,
    batch: &Batch,
    eps: f64,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new(&model.params);
    let logits = model.forward_graph(&mut g, &batch.source, &batch.decoder, true, rng)?;
    let loss = g.smoothed_ce(logits, &batch.targets, eps, PAD);
    let n = batch.num_tokens();
    if n == 0 {
        return Err(Error::Empty("every target position is padding".into()));
    }
    let value = g.value(loss)[0].as_f64() / n as f64;
    let grads = g.backward(loss, T::of(1.0 / n as f64));
    Ok((value, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

impl TrainOutcome {
    /// The log as JSON lines, without timings.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| {
                let r = EpochRecord { seconds: None, ..r.clone() };
                serde_json::to_string(&r).expect("record serializes") + "\n"
            })
            .collect()
    }
}

/// Groups examples into batches of at most `size`, in order.
pub fn make_batches(examples: &[&Example], size: usize, max_len: usize) -> Result<Vec<Batch>> {
    examples.chunks(size).map(|c| Batch::assemble(c, max_len)).collect()
}

/// Cuts the shuffled order into batches, sorting each pool of
/// `BUCKET_POOL` batches by length first to limit padding. Batch order is
/// shuffled again afterwards.
fn bucketed<R: rand::Rng>(order: &[usize], examples: &[Example], size: usize, shuffle: bool, rng: &mut R) -> Vec<Vec<usize>> {
    let key = |&i: &usize| examples[i].source.len() + examples[i].target.len();
    let mut batches = Vec::new();
    for pool in order.chunks(size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(key);
        batches.extend(pool.chunks(size).map(|c| c.to_vec()));
    }
    if shuffle {
        batches.shuffle(rng);
    }
    batches
}

const BUCKET_POOL: usize = 16;

/// Trains a model on the union of `train` sets and keeps the parameters with
/// the lowest validation loss. Baseline mode takes exactly one training set.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[&Dataset],
    valid: &[&Dataset],
    mode: TrainMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.vocab_size = vocab.size();
    if mode == TrainMode::Baseline && train.len() != 1 {
        return Err(Error::Config(format!("baseline training takes one dataset, got {}", train.len())));
    }
    let encode = |sets: &[&Dataset]| -> Vec<Example> {
        sets.iter()
            .flat_map(|d| d.pairs.iter())
            .map(|p| Example::encode(vocab, p, mode))
            .collect()
    };
    let examples = encode(train);
    let valid_examples = encode(valid);
    if examples.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    if valid_examples.is_empty() {
        return Err(Error::Empty("no validation pairs".into()));
    }
    let valid_batches = make_batches(&valid_examples.iter().collect::<Vec<_>>(), cfg.batch_size, model_cfg.max_len)?;

    let mut model = Model::<f32>::init(&model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_u64);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    let mut step_cfg = cfg.clone();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut tokens = 0usize;
        for chunk in bucketed(&order, &examples, cfg.batch_size, cfg.shuffle, &mut rng) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::assemble(&refs, model_cfg.max_len)?;
            let (loss, mut grads) = batch_gradients(&model, &batch, cfg.label_smoothing, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            if let Some(c) = cfg.grad_clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            radam_step(&mut model.params, &grads, &mut state, &step_cfg)?;
            let n = batch.num_tokens();
            sum += loss * n as f64;
            tokens += n;
        }
        let train_loss = sum / tokens as f64;
        let elapsed = started.elapsed().as_secs_f64();
        let valid_loss = joint_loss(&model, &valid_batches, cfg.label_smoothing)?.mean();
        if !valid_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: valid_loss });
        }
        log::info!("epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4} ({elapsed:.1}s)");
        trace.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: train_loss,
            seconds: Some(elapsed),
        });
        trace.push(EpochRecord {
            epoch,
            split: "valid".into(),
            loss: valid_loss,
            seconds: None,
        });
        if valid_loss < best.0 {
            best = (valid_loss, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
            if let Some(d) = cfg.lr_decay {
                step_cfg.learning_rate *= d;
                log::info!("learning rate now {:.2e}", step_cfg.learning_rate);
            }
        }
    }
    let (best_valid_loss, best_epoch, params) = best;
    Ok(TrainOutcome {
        model: Model::from_params(&model_cfg, params)?,
        trace,
        best_epoch,
        best_valid_loss,
    })
}

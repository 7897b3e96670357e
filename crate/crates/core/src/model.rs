//! Post-norm Transformer encoder-decoder whose decoder input may start with
//! two switching tokens, `[disf_*] [punc_*]`, ahead of BOS.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::tensor::{
    attention_fwd, first_non_finite, layer_norm_fwd, linear_fwd, log_softmax, sinusoid_table,
    AttnShape, ParamId, ParamStore, Real,
};
use crate::tokenizer::{
    is_reserved, TokenSequence, BOS, DISF_OFF, DISF_ON, PAD, PUNC_OFF, PUNC_ON,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Filled in from the vocabulary once the data exists.
    pub vocab_size: usize,
    /// Half-width multiplier of the uniform initialiser.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale model used by the default experiment.
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 512,
            dropout: 0.1,
            max_len: 160,
            vocab_size: 0,
            init_gain: 1.0,
        }
    }

    /// 4 x 512 encoder, 2 x 512 decoder.
    pub fn full_scale() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            enc_layers: 4,
            dec_layers: 2,
            ffn_dim: 2048,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.vocab_size <= PUNC_OFF as usize {
            return Err(Error::Config(format!(
                "vocab_size {} does not cover the reserved ids",
                self.vocab_size
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// On/off state of each conversion task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwitchSetting {
    pub disf: bool,
    pub punc: bool,
}

impl SwitchSetting {
    pub const DISF: Self = Self { disf: true, punc: false };
    pub const PUNC: Self = Self { disf: false, punc: true };
    pub const SAME: Self = Self { disf: false, punc: false };
    pub const JOINT: Self = Self { disf: true, punc: true };

    /// Switch assignment used for a task's examples.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Disf => Self::DISF,
            Task::Punc => Self::PUNC,
            Task::Same => Self::SAME,
            Task::Joint => Self::JOINT,
        }
    }

    pub fn tokens(self) -> [u32; 2] {
        [
            if self.disf { DISF_ON } else { DISF_OFF },
            if self.punc { PUNC_ON } else { PUNC_OFF },
        ]
    }

    /// `"on/off"` style label, disf first.
    pub fn label(self) -> &'static str {
        match (self.disf, self.punc) {
            (true, true) => "on/on",
            (true, false) => "on/off",
            (false, true) => "off/on",
            (false, false) => "off/off",
        }
    }
}

impl fmt::Display for SwitchSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Length of the decoder context in front of the first target token.
pub fn prefix_len(switch: Option<SwitchSetting>) -> usize {
    if switch.is_some() {
        3
    } else {
        1
    }
}

/// `[s_disf, s_punc, BOS, prefix...]`, or `[BOS, prefix...]` without a
/// switch. A leading BOS in `prefix` is accepted and not duplicated.
pub fn build_decoder_input(switch: Option<SwitchSetting>, prefix: &[u32], max_len: usize) -> Result<TokenSequence> {
    let body = match prefix.first() {
        Some(&BOS) => &prefix[1..],
        _ => prefix,
    };
    if let Some(&bad) = body.iter().find(|&&id| is_reserved(id)) {
        return Err(Error::Shape(format!("reserved id {bad} inside a target prefix")));
    }
    let head = prefix_len(switch);
    if body.len() + head > max_len {
        return Err(Error::Length {
            len: body.len(),
            limit: max_len.saturating_sub(head),
        });
    }
    let mut out = Vec::with_capacity(head + body.len());
    if let Some(s) = switch {
        out.extend(s.tokens());
    }
    out.push(BOS);
    out.extend_from_slice(body);
    Ok(out)
}

/// Right-padded `[batch, len]` id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_seqs<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        Self::with_len(seqs, seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0))
    }

    /// Pads every row to exactly `len` (which must cover the longest row).
    pub fn with_len<S: AsRef<[u32]>>(seqs: &[S], len: usize) -> Self {
        let mut ids = vec![PAD; seqs.len() * len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            assert!(s.len() <= len, "row longer than padded length");
            ids[b * len..b * len + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Self {
            ids,
            batch: seqs.len(),
            len,
            lengths,
        }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

/// Logits `[batch, len, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
}

impl<T: Real> Logits<T> {
    pub fn at(&self, b: usize, t: usize) -> &[T] {
        let off = (b * self.len + t) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w_in: (ParamId, ParamId),
    w_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct EncLayer {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    self_attn: AttnIds,
    norm1: NormIds,
    cross_attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    out: (ParamId, ParamId),
}

impl Layout {
    /// Registers every tensor in a fixed order.
    fn register<T: Real>(cfg: &ModelConfig, ps: &mut ParamStore<T>) -> Self {
        let d = cfg.d_model;
        let linear = |ps: &mut ParamStore<T>, name: &str, i: usize, o: usize| {
            (ps.add(format!("{name}.weight"), i, o), ps.add(format!("{name}.bias"), 1, o))
        };
        let attn = |ps: &mut ParamStore<T>, name: &str| AttnIds {
            q: linear(ps, &format!("{name}.q"), d, d),
            k: linear(ps, &format!("{name}.k"), d, d),
            v: linear(ps, &format!("{name}.v"), d, d),
            o: linear(ps, &format!("{name}.o"), d, d),
        };
        let norm = |ps: &mut ParamStore<T>, name: &str| NormIds {
            gain: ps.add(format!("{name}.gain"), 1, d),
            bias: ps.add(format!("{name}.bias"), 1, d),
        };
        let ffn = |ps: &mut ParamStore<T>, name: &str| FfnIds {
            w_in: linear(ps, &format!("{name}.in"), d, cfg.ffn_dim),
            w_out: linear(ps, &format!("{name}.out"), cfg.ffn_dim, d),
        };
        let src_embed = ps.add("src_embed", cfg.vocab_size, d);
        let tgt_embed = ps.add("tgt_embed", cfg.vocab_size, d);
        let enc = (0..cfg.enc_layers)
            .map(|i| EncLayer {
                attn: attn(ps, &format!("enc.{i}.self_attn")),
                norm1: norm(ps, &format!("enc.{i}.norm1")),
                ffn: ffn(ps, &format!("enc.{i}.ffn")),
                norm2: norm(ps, &format!("enc.{i}.norm2")),
            })
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|i| DecLayer {
                self_attn: attn(ps, &format!("dec.{i}.self_attn")),
                norm1: norm(ps, &format!("dec.{i}.norm1")),
                cross_attn: attn(ps, &format!("dec.{i}.cross_attn")),
                norm2: norm(ps, &format!("dec.{i}.norm2")),
                ffn: ffn(ps, &format!("dec.{i}.ffn")),
                norm3: norm(ps, &format!("dec.{i}.norm3")),
            })
            .collect();
        let out = linear(ps, "out_proj", d, cfg.vocab_size);
        Layout {
            src_embed,
            tgt_embed,
            enc,
            dec,
            out,
        }
    }
}

/// Model parameters together with the configuration they were built for.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    pos_table: Vec<T>,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Real> Model<T> {
    /// Random initialisation: weight matrices are uniform in
    /// `±gain * sqrt(6 / (fan_in + fan_out))`, embeddings uniform in
    /// `±gain * sqrt(3 / d_model)` (unit variance after the `sqrt(d)` input
    /// scale), norm gains 1, biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::register(config, &mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        for t in params.tensors.iter_mut() {
            let limit = if t.name.ends_with("embed") {
                config.init_gain * (3.0 / d).sqrt()
            } else if t.name.ends_with(".weight") {
                config.init_gain * (6.0 / (t.rows + t.cols) as f64).sqrt()
            } else {
                0.0
            };
            if t.name.ends_with(".gain") {
                t.data.iter_mut().for_each(|x| *x = T::one());
            } else if limit > 0.0 {
                for x in t.data.iter_mut() {
                    *x = T::of(rng.random_range(-limit..limit));
                }
            }
        }
        Ok(Self::assemble(config.clone(), params, layout))
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::<T>::new();
        let layout = Layout::register(config, &mut expected);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.tensors.iter().zip(&params.tensors) {
            if e.name != p.name || e.rows != p.rows || e.cols != p.cols || p.data.len() != e.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape [{}, {}], expected {} [{}, {}]",
                    p.name, p.rows, p.cols, e.name, e.rows, e.cols
                )));
            }
            if let Some(i) = first_non_finite(&p.data) {
                return Err(Error::Numeric(format!("{}[{i}]", p.name)));
            }
        }
        Ok(Self::assemble(config.clone(), params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>, layout: Layout) -> Self {
        let pos_table = sinusoid_table(config.max_len, config.d_model);
        Self {
            config,
            params,
            layout,
            pos_table,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            pos_table: sinusoid_table(self.config.max_len, self.config.d_model),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, b: &PaddedBatch, what: &str) -> Result<()> {
        if b.len > self.config.max_len {
            return Err(Error::Length {
                len: b.len,
                limit: self.config.max_len,
            });
        }
        if let Some(&id) = b.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        if b.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Shape(format!("{what} batch has an empty row")));
        }
        Ok(())
    }

    /// Records the full forward pass on `g` and returns the logits node
    /// `[batch * dec_len, vocab]`. `rng` is only consulted when `train` is set.
    pub fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        source: &PaddedBatch,
        decoder_input: &PaddedBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_batch(source, "source")?;
        self.check_batch(decoder_input, "decoder")?;
        if source.batch != decoder_input.batch {
            return Err(Error::Shape(format!(
                "source batch {} vs decoder batch {}",
                source.batch, decoder_input.batch
            )));
        }
        let cfg = &self.config;
        let p = if train { cfg.dropout } else { 0.0 };
        let l = &self.layout;
        let scale = T::of((cfg.d_model as f64).sqrt());
        let batch = source.batch;

        let enc_shape = AttnShape {
            batch,
            lq: source.len,
            lk: source.len,
            k_stride: source.len,
            heads: cfg.n_heads,
            d_model: cfg.d_model,
            key_len: source.lengths.clone(),
            causal: false,
            q_start: 0,
        };
        let src_pos: Vec<usize> = (0..batch).flat_map(|_| 0..source.len).collect();
        let table = g.param(l.src_embed);
        let mut x = g.embed(table, &source.ids, &src_pos, &self.pos_table, scale);
        x = g.dropout(x, p, rng);
        for (i, layer) in l.enc.iter().enumerate() {
            let a = self.mha(g, x, x, &layer.attn, enc_shape.clone());
            let a = g.dropout(a, p, rng);
            let s = g.add(x, a);
            x = self.norm(g, s, &layer.norm1);
            let f = self.ffn(g, x, &layer.ffn);
            let f = g.dropout(f, p, rng);
            let s = g.add(x, f);
            x = self.norm(g, s, &layer.norm2);
            check(g.value(x), &format!("enc.{i}"))?;
        }
        let memory = x;

        let dl = decoder_input.len;
        let self_shape = AttnShape {
            batch,
            lq: dl,
            lk: dl,
            k_stride: dl,
            heads: cfg.n_heads,
            d_model: cfg.d_model,
            key_len: decoder_input.lengths.clone(),
            causal: true,
            q_start: 0,
        };
        let cross_shape = AttnShape {
            lq: dl,
            causal: false,
            ..enc_shape
        };
        let dec_pos: Vec<usize> = (0..batch).flat_map(|_| 0..dl).collect();
        let table = g.param(l.tgt_embed);
        let mut y = g.embed(table, &decoder_input.ids, &dec_pos, &self.pos_table, scale);
        y = g.dropout(y, p, rng);
        for (i, layer) in l.dec.iter().enumerate() {
            let a = self.mha(g, y, y, &layer.self_attn, self_shape.clone());
            let a = g.dropout(a, p, rng);
            let s = g.add(y, a);
            y = self.norm(g, s, &layer.norm1);
            let c = self.mha(g, y, memory, &layer.cross_attn, cross_shape.clone());
            let c = g.dropout(c, p, rng);
            let s = g.add(y, c);
            y = self.norm(g, s, &layer.norm2);
            let f = self.ffn(g, y, &layer.ffn);
            let f = g.dropout(f, p, rng);
            let s = g.add(y, f);
            y = self.norm(g, s, &layer.norm3);
            check(g.value(y), &format!("dec.{i}"))?;
        }
        let (w, b) = (g.param(l.out.0), g.param(l.out.1));
        let logits = g.linear(y, w, Some(b));
        check(g.value(logits), "out_proj")?;
        Ok(logits)
    }

    fn mha(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var, ids: &AttnIds, shape: AttnShape) -> Var {
        let lin = |g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)| {
            let (w, b) = (g.param(w), g.param(b));
            g.linear(x, w, Some(b))
        };
        let q = lin(g, xq, ids.q);
        let k = lin(g, xkv, ids.k);
        let v = lin(g, xkv, ids.v);
        let a = g.attention(q, k, v, shape);
        lin(g, a, ids.o)
    }

    fn ffn(&self, g: &mut Graph<'_, T>, x: Var, ids: &FfnIds) -> Var {
        let (w, b) = (g.param(ids.w_in.0), g.param(ids.w_in.1));
        let h = g.linear(x, w, Some(b));
        let h = g.relu(h);
        let (w, b) = (g.param(ids.w_out.0), g.param(ids.w_out.1));
        g.linear(h, w, Some(b))
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, ids: &NormIds) -> Var {
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        g.layer_norm(x, gain, bias)
    }

    /// Logits for every decoder position; row `(b, t)` scores the token that
    /// follows `decoder_input[b][t]`.
    pub fn forward<R: Rng>(
        &self,
        source: &PaddedBatch,
        decoder_input: &PaddedBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Logits<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, source, decoder_input, train, rng)?;
        Ok(Logits {
            data: g.value(out).to_vec(),
            batch: source.batch,
            len: decoder_input.len,
            vocab: self.config.vocab_size,
        })
    }

    /// Deterministic forward pass (dropout disabled).
    pub fn forward_eval(&self, source: &PaddedBatch, decoder_input: &PaddedBatch) -> Result<Logits<T>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.forward(source, decoder_input, false, &mut unused)
    }

    /// `log P(target | source, switch)`, where `target` ends with EOS. Only
    /// the target positions are scored; the switch prefix and BOS are context.
    pub fn logprob_of(&self, source: &[u32], switch: Option<SwitchSetting>, target: &[u32]) -> Result<f64> {
        if target.last() != Some(&crate::tokenizer::EOS) {
            return Err(Error::Shape("target must end with EOS".into()));
        }
        let body = &target[..target.len() - 1];
        let dec = build_decoder_input(switch, body, self.config.max_len)?;
        let logits = self.forward_eval(&PaddedBatch::from_seqs(&[source]), &PaddedBatch::from_seqs(&[&dec]))?;
        let first = prefix_len(switch) - 1;
        Ok(target
            .iter()
            .enumerate()
            .map(|(i, &tok)| log_softmax(logits.at(0, first + i))[tok as usize])
            .sum())
    }

    /// Runs the encoder once and precomputes cross-attention keys/values.
    pub fn encode_memory(&self, source: &[u32]) -> Result<Memory<T>> {
        let cfg = &self.config;
        self.check_batch(&PaddedBatch::from_seqs(&[source]), "source")?;
        let d = cfg.d_model;
        let n = source.len();
        let l = &self.layout;
        let scale = T::of((d as f64).sqrt());
        let table = &self.params.get(l.src_embed).data;
        let mut x = vec![T::zero(); n * d];
        for (r, &id) in source.iter().enumerate() {
            for c in 0..d {
                x[r * d + c] = table[id as usize * d + c] * scale + self.pos_table[r * d + c];
            }
        }
        let shape = AttnShape {
            batch: 1,
            lq: n,
            lk: n,
            k_stride: n,
            heads: cfg.n_heads,
            d_model: d,
            key_len: vec![n],
            causal: false,
            q_start: 0,
        };
        for layer in &l.enc {
            let q = self.lin(&x, n, layer.attn.q);
            let k = self.lin(&x, n, layer.attn.k);
            let v = self.lin(&x, n, layer.attn.v);
            let (a, _) = attention_fwd(&q, &k, &v, &shape);
            let a = self.lin(&a, n, layer.attn.o);
            x = self.add_norm(&x, &a, &layer.norm1);
            let f = self.ffn_plain(&x, n, &layer.ffn);
            x = self.add_norm(&x, &f, &layer.norm2);
        }
        let cross = l
            .dec
            .iter()
            .map(|layer| (self.lin(&x, n, layer.cross_attn.k), self.lin(&x, n, layer.cross_attn.v)))
            .collect();
        Ok(Memory { len: n, cross })
    }

    fn lin(&self, x: &[T], rows: usize, (w, b): (ParamId, ParamId)) -> Vec<T> {
        let w = self.params.get(w);
        linear_fwd(x, rows, w.rows, &w.data, w.cols, Some(&self.params.get(b).data))
    }

    fn ffn_plain(&self, x: &[T], rows: usize, ids: &FfnIds) -> Vec<T> {
        let mut h = self.lin(x, rows, ids.w_in);
        h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.lin(&h, rows, ids.w_out)
    }

    fn add_norm(&self, x: &[T], y: &[T], ids: &NormIds) -> Vec<T> {
        let s: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a + b).collect();
        let (out, _, _) = layer_norm_fwd(&s, self.config.d_model, &self.params.get(ids.gain).data, &self.params.get(ids.bias).data);
        out
    }

    pub fn new_cache(&self, beams: usize) -> DecoderCache<T> {
        let d = self.config.d_model;
        let cap = self.config.max_len;
        DecoderCache {
            beams,
            cap,
            len: 0,
            keys: vec![vec![T::zero(); beams * cap * d]; self.config.dec_layers],
            values: vec![vec![T::zero(); beams * cap * d]; self.config.dec_layers],
        }
    }

    /// Feeds one token per beam at the cache's current position and returns
    /// next-token logits `[beams, vocab]`.
    pub fn decoder_step(&self, memory: &Memory<T>, cache: &mut DecoderCache<T>, tokens: &[u32]) -> Result<Vec<T>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let beams = cache.beams;
        assert_eq!(tokens.len(), beams, "one token per beam");
        let pos = cache.len;
        if pos >= cache.cap {
            return Err(Error::Length {
                len: pos + 1,
                limit: cache.cap,
            });
        }
        let l = &self.layout;
        let scale = T::of((d as f64).sqrt());
        let table = &self.params.get(l.tgt_embed).data;
        let mut y = vec![T::zero(); beams * d];
        for (b, &id) in tokens.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: cfg.vocab_size,
                });
            }
            for c in 0..d {
                y[b * d + c] = table[id as usize * d + c] * scale + self.pos_table[pos * d + c];
            }
        }
        let self_shape = AttnShape {
            batch: beams,
            lq: 1,
            lk: pos + 1,
            k_stride: cache.cap,
            heads: cfg.n_heads,
            d_model: d,
            key_len: vec![pos + 1; beams],
            causal: false,
            q_start: 0,
        };
        let cross_shape = AttnShape {
            lk: memory.len,
            k_stride: 0,
            key_len: vec![memory.len; beams],
            ..self_shape.clone()
        };
        for (li, layer) in l.dec.iter().enumerate() {
            let q = self.lin(&y, beams, layer.self_attn.q);
            let k = self.lin(&y, beams, layer.self_attn.k);
            let v = self.lin(&y, beams, layer.self_attn.v);
            for b in 0..beams {
                let dst = (b * cache.cap + pos) * d;
                cache.keys[li][dst..dst + d].copy_from_slice(&k[b * d..(b + 1) * d]);
                cache.values[li][dst..dst + d].copy_from_slice(&v[b * d..(b + 1) * d]);
            }
            let (a, _) = attention_fwd(&q, &cache.keys[li], &cache.values[li], &self_shape);
            let a = self.lin(&a, beams, layer.self_attn.o);
            y = self.add_norm(&y, &a, &layer.norm1);
            let q = self.lin(&y, beams, layer.cross_attn.q);
            let (mk, mv) = &memory.cross[li];
            let (c, _) = attention_fwd(&q, mk, mv, &cross_shape);
            let c = self.lin(&c, beams, layer.cross_attn.o);
            y = self.add_norm(&y, &c, &layer.norm2);
            let f = self.ffn_plain(&y, beams, &layer.ffn);
            y = self.add_norm(&y, &f, &layer.norm3);
        }
        cache.len += 1;
        let logits = self.lin(&y, beams, l.out);
        check(&logits, "out_proj")?;
        Ok(logits)
    }
}

fn check<T: Real>(xs: &[T], layer: &str) -> Result<()> {
    match first_non_finite(xs) {
        Some(i) => Err(Error::Numeric(format!("{layer} activation {i}"))),
        None => Ok(()),
    }
}

/// Encoder output projected into each decoder layer's cross-attention keys
/// and values.
#[derive(Debug, Clone)]
pub struct Memory<T> {
    pub len: usize,
    cross: Vec<(Vec<T>, Vec<T>)>,
}

/// Per-layer self-attention keys/values, `[beams, cap, d_model]` each.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    beams: usize,
    cap: usize,
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> DecoderCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn beams(&self) -> usize {
        self.beams
    }

    /// New cache whose beam `i` is a copy of this cache's beam `parents[i]`.
    pub fn select(&self, parents: &[usize]) -> Self {
        let d = self.keys.first().map_or(0, |k| k.len() / (self.beams * self.cap).max(1));
        let rows = self.len * d;
        let gather = |src: &Vec<T>| {
            let mut out = vec![T::zero(); parents.len() * self.cap * d];
            for (i, &p) in parents.iter().enumerate() {
                let from = p * self.cap * d;
                let to = i * self.cap * d;
                out[to..to + rows].copy_from_slice(&src[from..from + rows]);
            }
            out
        };
        Self {
            beams: parents.len(),
            cap: self.cap,
            len: self.len,
            keys: self.keys.iter().map(gather).collect(),
            values: self.values.iter().map(gather).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{DISF_OFF, DISF_ON, EOS, PUNC_OFF, PUNC_ON};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            dropout: 0.1,
            max_len: 32,
            vocab_size: 12,
            init_gain: 1.0,
        }
    }

    #[test]
    fn decoder_input_layouts() {
        assert_eq!(build_decoder_input(Some(SwitchSetting::JOINT), &[], 10).unwrap(), vec![DISF_ON, PUNC_ON, BOS]);
        assert_eq!(build_decoder_input(Some(SwitchSetting::PUNC), &[9], 10).unwrap(), vec![DISF_OFF, PUNC_ON, BOS, 9]);
        assert_eq!(
            build_decoder_input(Some(SwitchSetting::SAME), &[9, 10], 10).unwrap(),
            vec![DISF_OFF, PUNC_OFF, BOS, 9, 10]
        );
        assert_eq!(build_decoder_input(None, &[BOS, 9], 10).unwrap(), vec![BOS, 9]);
        assert!(matches!(
            build_decoder_input(Some(SwitchSetting::DISF), &[9; 8], 10),
            Err(Error::Length { .. })
        ));
        assert!(build_decoder_input(Some(SwitchSetting::DISF), &[9, EOS], 10).is_err());
    }

    #[test]
    fn logits_shape_and_normalisation() {
        let m = Model::<f64>::init(&tiny_config(), 1).unwrap();
        let src = PaddedBatch::from_seqs(&[vec![8u32, 9, 10, 11, 8], vec![9, 10]]);
        let dec = PaddedBatch::from_seqs(&[vec![DISF_ON, PUNC_OFF, BOS, 8], vec![DISF_OFF, PUNC_ON, BOS, 9]]);
        let logits = m.forward_eval(&src, &dec).unwrap();
        assert_eq!((logits.batch, logits.len, logits.vocab), (2, 4, 12));
        assert_eq!(logits.data.len(), 2 * 4 * 12);
        for b in 0..2 {
            for t in 0..4 {
                let s: f64 = log_softmax(logits.at(b, t)).iter().map(|x| x.exp()).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.max_len = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn out_of_range_and_mismatched_batches_rejected() {
        let m = Model::<f32>::init(&tiny_config(), 1).unwrap();
        let src = PaddedBatch::from_seqs(&[vec![8u32, 99]]);
        let dec = PaddedBatch::from_seqs(&[vec![BOS]]);
        assert!(matches!(m.forward_eval(&src, &dec), Err(Error::TokenOutOfRange { .. })));
        let src = PaddedBatch::from_seqs(&[vec![8u32], vec![9]]);
        assert!(matches!(m.forward_eval(&src, &dec), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_parameters_reported_by_layer() {
        let mut m = Model::<f32>::init(&tiny_config(), 1).unwrap();
        let idx = m.params.tensors.iter().position(|t| t.name == "enc.0.ffn.out.weight").unwrap();
        m.params.tensors[idx].data[0] = f32::NAN;
        let src = PaddedBatch::from_seqs(&[vec![8u32, 9]]);
        let dec = PaddedBatch::from_seqs(&[vec![BOS]]);
        match m.forward_eval(&src, &dec) {
            Err(Error::Numeric(msg)) => assert!(msg.starts_with("enc.0"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert!(matches!(Model::from_params(&m.config, m.params.clone()), Err(Error::Numeric(_))));
    }

    #[test]
    fn decoder_is_causal() {
        let m = Model::<f64>::init(&tiny_config(), 2).unwrap();
        let src = PaddedBatch::from_seqs(&[vec![8u32, 9, 10]]);
        let a = m.forward_eval(&src, &PaddedBatch::from_seqs(&[vec![DISF_ON, PUNC_ON, BOS, 8, 9]])).unwrap();
        let b = m.forward_eval(&src, &PaddedBatch::from_seqs(&[vec![DISF_ON, PUNC_ON, BOS, 8, 11]])).unwrap();
        for t in 0..4 {
            for (x, y) in a.at(0, t).iter().zip(b.at(0, t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(a.at(0, 4).iter().zip(b.at(0, 4)).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = Model::<f64>::init(&tiny_config(), 3).unwrap();
        let src = vec![8u32, 9, 10];
        let dec = vec![DISF_OFF, PUNC_ON, BOS, 10];
        let alone = m.forward_eval(&PaddedBatch::from_seqs(&[&src]), &PaddedBatch::from_seqs(&[&dec])).unwrap();
        let padded = m
            .forward_eval(&PaddedBatch::with_len(&[&src], 7), &PaddedBatch::with_len(&[&dec], 9))
            .unwrap();
        for t in 0..dec.len() {
            for (x, y) in alone.at(0, t).iter().zip(padded.at(0, t)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let m = Model::<f64>::init(&tiny_config(), 4).unwrap();
        let src = vec![8u32, 11, 9, 10, 8];
        let dec = vec![DISF_ON, PUNC_OFF, BOS, 9, 10, 11];
        let full = m.forward_eval(&PaddedBatch::from_seqs(&[&src]), &PaddedBatch::from_seqs(&[&dec])).unwrap();
        let mem = m.encode_memory(&src).unwrap();
        let mut cache = m.new_cache(2);
        for (t, &tok) in dec.iter().enumerate() {
            let step = m.decoder_step(&mem, &mut cache, &[tok, tok]).unwrap();
            for b in 0..2 {
                for (x, y) in step[b * 12..(b + 1) * 12].iter().zip(full.at(0, t)) {
                    assert!((x - y).abs() < 1e-9, "position {t}");
                }
            }
        }
        assert_eq!(cache.len(), dec.len());
    }

    #[test]
    fn cache_select_reorders_beams() {
        let m = Model::<f64>::init(&tiny_config(), 5).unwrap();
        let mem = m.encode_memory(&[8, 9]).unwrap();
        let mut cache = m.new_cache(2);
        m.decoder_step(&mem, &mut cache, &[BOS, BOS]).unwrap();
        m.decoder_step(&mem, &mut cache, &[8, 10]).unwrap();
        let mut swapped = cache.select(&[1, 1, 0]);
        let out = m.decoder_step(&mem, &mut swapped, &[9, 9, 9]).unwrap();
        let mut only = m.new_cache(1);
        m.decoder_step(&mem, &mut only, &[BOS]).unwrap();
        m.decoder_step(&mem, &mut only, &[10]).unwrap();
        let want = m.decoder_step(&mem, &mut only, &[9]).unwrap();
        for b in 0..2 {
            for (x, y) in out[b * 12..(b + 1) * 12].iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logprob_matches_stepwise_sum() {
        let m = Model::<f64>::init(&tiny_config(), 6).unwrap();
        let src = vec![8u32, 9, 10];
        let target = vec![9u32, 11, EOS];
        let lp = m.logprob_of(&src, Some(SwitchSetting::DISF), &target).unwrap();
        let mem = m.encode_memory(&src).unwrap();
        let mut cache = m.new_cache(1);
        m.decoder_step(&mem, &mut cache, &[DISF_ON]).unwrap();
        m.decoder_step(&mem, &mut cache, &[PUNC_OFF]).unwrap();
        let mut prev = BOS;
        let mut want = 0.0;
        for &tok in &target {
            let step = m.decoder_step(&mem, &mut cache, &[prev]).unwrap();
            want += log_softmax(&step)[tok as usize];
            prev = tok;
        }
        assert!((lp - want).abs() < 1e-9);
        assert!(lp < 0.0);
        assert!(m.logprob_of(&src, None, &[9]).is_err());
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.0;
        let m = Model::<f64>::init(&cfg, 7).unwrap();
        let src = PaddedBatch::from_seqs(&[vec![8u32, 9, 10, 11], vec![9, 8]]);
        let dec = PaddedBatch::from_seqs(&[vec![DISF_ON, PUNC_ON, BOS, 9], vec![DISF_OFF, PUNC_OFF, BOS]]);
        let targets = [PAD, PAD, 9, EOS, PAD, PAD, EOS, PAD];
        let loss = |params: &ParamStore<f64>| {
            let mm = Model::from_params(&cfg, params.clone()).unwrap();
            let mut g = Graph::new(&mm.params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let z = mm.forward_graph(&mut g, &src, &dec, false, &mut rng).unwrap();
            let l = g.smoothed_ce(z, &targets, 0.1, PAD);
            g.value(l)[0]
        };
        let mut g = Graph::new(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = m.forward_graph(&mut g, &src, &dec, false, &mut rng).unwrap();
        let l = g.smoothed_ce(z, &targets, 0.1, PAD);
        let grads = g.backward(l, 1.0);
        let mut pick = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for (ti, t) in m.params.tensors.iter().enumerate() {
            for _ in 0..3 {
                let j = pick.random_range(0..t.len());
                let mut p = m.params.clone();
                p.tensors[ti].data[j] += h;
                let up = loss(&p);
                p.tensors[ti].data[j] -= 2.0 * h;
                let down = loss(&p);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[ti][j];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{j}]: numeric {numeric} analytic {analytic}", t.name);
            }
        }
    }
}

//! Pre-norm Transformer encoder-decoder producing token log-likelihoods.
//!
//! Every forward pass goes through an autodiff [`Tape`]. Parameters are
//! bound to a tape by reference, so inference passes never copy weights and
//! record nothing, while training passes mark the chosen parameters as
//! trainable leaves. Because inference and training share the same kernels,
//! the values they produce are bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Axis, Tape, Tensor, Var};
use crate::data::{TokenId, TokenSequence, BOS, EOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("source length {len} exceeds max_doc_len {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    OutOfVocab { id: TokenId, vocab: usize },
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("decoder prefix length {len} exceeds max_sum_len {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("target must be BOS, at least one token, EOS; got length {0}")]
    BadTarget(usize),
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "take it from the data source".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_doc_len: usize,
    /// Maximum number of decoder positions, i.e. generated tokens including EOS.
    pub max_sum_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_doc_len: 32,
            max_sum_len: 8,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size <= EOS as usize {
            return bad(format!("vocab_size must exceed the reserved ids, got {}", self.vocab_size));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ff == 0 {
            return bad("layer counts and d_ff must be positive".into());
        }
        if self.max_doc_len == 0 || self.max_sum_len == 0 {
            return bad("max_doc_len and max_sum_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        self.max_doc_len.max(self.max_sum_len)
    }
}

/// Seeded source of 0/1 dropout masks, drawn in forward-pass order.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    rate: f64,
    rng: ChaCha8Rng,
}

impl DropoutMasks {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    fn next_mask(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let keep = 1.0 - self.rate;
        let v = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 } else { 0.0 }).collect();
        Tensor::new(shape.to_vec(), v).expect("mask shape")
    }
}

/// Encoder states for one source, shareable across any number of decodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub source_len: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_tok: usize,
    dec_tok: usize,
    pos: usize,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: Norm,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Parameter shapes and initial values, in checkpoint order.
struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut ChaCha8Rng,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
    Sinusoid,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Uniform(bound) => (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Sinusoid => sinusoid_table(shape[0], shape[1]),
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape, values).expect("parameter shape"));
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: self.add(format!("{prefix}.weight"), vec![d_in, d_out], Init::Uniform(bound)),
            b: self.add(format!("{prefix}.bias"), vec![d_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, d_ff),
            down: self.linear(&format!("{prefix}.down"), d_ff, d),
        }
    }
}

fn sinusoid_table(rows: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            v[pos * d + 2 * i] = angle.sin();
            v[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    v
}

fn build_layout(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<Tensor>) {
    let d = cfg.d_model;
    let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng };
    // Embedding tables act on one-hot inputs, so their fan-in is 1.
    let enc_tok = b.add("enc.tok_emb".into(), vec![cfg.vocab_size, d], Init::Uniform(1.0));
    let enc_layers = (0..cfg.n_enc_layers)
        .map(|l| {
            let p = format!("enc.layers.{l}");
            EncoderLayer {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attention(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let enc_norm = b.norm("enc.ln_f", d);
    let dec_tok = b.add("dec.tok_emb".into(), vec![cfg.vocab_size, d], Init::Uniform(1.0));
    let dec_layers = (0..cfg.n_dec_layers)
        .map(|l| {
            let p = format!("dec.layers.{l}");
            DecoderLayer {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.d_ff),
            }
        })
        .collect();
    let dec_norm = b.norm("dec.ln_f", d);
    let out = b.linear("out_proj", d, cfg.vocab_size);
    let pos = b.add(POSITION_TABLE.into(), vec![cfg.max_positions(), d], Init::Sinusoid);
    let layout = Layout { enc_tok, dec_tok, pos, enc_layers, enc_norm, dec_layers, dec_norm, out };
    (layout, b.names, b.tensors)
}

/// Fixed sinusoidal position table; stored with the parameters, never trained.
pub const POSITION_TABLE: &str = "pos_enc";

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

pub fn is_trainable_param(name: &str) -> bool {
    name != POSITION_TABLE
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameter handles on one tape, indexed like [`Seq2SeqModel::param_names`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Seq2SeqModel {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero, norms identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, names, params) = build_layout(&config, &mut rng);
        Ok(Self { config, layout, names, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against the config.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.names.len() {
            return Err(ModelError::Param {
                name: "*".into(),
                reason: format!("expected {} parameters, found {}", model.names.len(), named.len()),
            });
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] {
                return Err(ModelError::Param { name, reason: format!("expected {} at position {i}", model.names[i]) });
            }
            if t.shape() != model.params[i].shape() {
                return Err(ModelError::Param {
                    name,
                    reason: format!("shape {:?}, expected {:?}", t.shape(), model.params[i].shape()),
                });
            }
            model.params[i] = t.with_requires_grad(false);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`; `trainable` picks the ones that receive gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| tape.leaf_ref(t, is_trainable_param(n) && trainable(n)))
            .collect();
        Bound { vars }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::OutOfVocab { id, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn check_source(&self, source: &[TokenId]) -> Result<(), ModelError> {
        if source.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if source.len() > self.config.max_doc_len {
            return Err(ModelError::SourceTooLong { len: source.len(), max: self.config.max_doc_len });
        }
        self.check_ids(source)
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<(), ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::MissingBos);
        }
        if prefix.len() > self.config.max_sum_len {
            return Err(ModelError::PrefixTooLong { len: prefix.len(), max: self.config.max_sum_len });
        }
        self.check_ids(prefix)
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, masks: &mut Option<&mut DropoutMasks>) -> Result<Var, ModelError> {
        match masks {
            Some(m) if m.rate > 0.0 => {
                let shape = tape.value(x).shape().to_vec();
                let scale = 1.0 / (1.0 - m.rate);
                let mask = tape.constant(m.next_mask(&shape));
                Ok(tape.dropout(x, mask, scale)?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape<'_>, b: &Bound, l: &Linear, x: Var) -> Result<Var, ModelError> {
        let h = tape.matmul(x, b.vars[l.w])?;
        Ok(tape.add(h, b.vars[l.b])?)
    }

    fn norm(&self, tape: &mut Tape<'_>, b: &Bound, n: &Norm, x: Var) -> Result<Var, ModelError> {
        Ok(tape.layer_norm_rows(x, b.vars[n.gain], b.vars[n.bias])?)
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        a: &Attention,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var, ModelError> {
        let q = self.linear(tape, b, &a.q, q_in)?;
        let k = self.linear(tape, b, &a.k, kv_in)?;
        let v = self.linear(tape, b, &a.v, kv_in)?;
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q, k, v)
            } else {
                let (s, e) = (i * dh, (i + 1) * dh);
                (tape.slice(q, Axis::Cols, s, e)?, tape.slice(k, Axis::Cols, s, e)?, tape.slice(v, Axis::Cols, s, e)?)
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_rows(scores, causal)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = if h == 1 { heads[0] } else { tape.concat(&heads, Axis::Cols)? };
        self.linear(tape, b, &a.o, merged)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, b: &Bound, f: &FeedForward, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(tape, b, &f.up, x)?;
        let h = tape.relu(h)?;
        self.linear(tape, b, &f.down, h)
    }

    fn embed(&self, tape: &mut Tape<'_>, b: &Bound, table: usize, ids: &[TokenId]) -> Result<Var, ModelError> {
        let tok = tape.embedding_lookup(b.vars[table], ids.iter().map(|&i| i as usize).collect())?;
        let pos = tape.embedding_lookup(b.vars[self.layout.pos], (0..ids.len()).collect())?;
        Ok(tape.add(tok, pos)?)
    }

    /// Encoder forward on `tape`; returns `[source_len, d_model]` states.
    pub fn encode_on(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        source: &[TokenId],
        mut masks: Option<&mut DropoutMasks>,
    ) -> Result<Var, ModelError> {
        self.check_source(source)?;
        let x = self.embed(tape, b, self.layout.enc_tok, source)?;
        let mut x = self.dropout(tape, x, &mut masks)?;
        for layer in &self.layout.enc_layers {
            let h = self.norm(tape, b, &layer.ln1, x)?;
            let h = self.attention(tape, b, &layer.attn, h, h, false)?;
            let h = self.dropout(tape, h, &mut masks)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, &layer.ln2, x)?;
            let h = self.feed_forward(tape, b, &layer.ff, h)?;
            let h = self.dropout(tape, h, &mut masks)?;
            x = tape.add(x, h)?;
        }
        self.norm(tape, b, &self.layout.enc_norm, x)
    }

    /// Decoder forward; row `t` is `log p(. | X, prefix[..=t])`. With
    /// `last_only`, only the final row is projected.
    pub fn decode_on(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        enc: Var,
        prefix: &[TokenId],
        mut masks: Option<&mut DropoutMasks>,
        last_only: bool,
    ) -> Result<Var, ModelError> {
        self.check_prefix(prefix)?;
        let x = self.embed(tape, b, self.layout.dec_tok, prefix)?;
        let mut x = self.dropout(tape, x, &mut masks)?;
        for layer in &self.layout.dec_layers {
            let h = self.norm(tape, b, &layer.ln1, x)?;
            let h = self.attention(tape, b, &layer.self_attn, h, h, true)?;
            let h = self.dropout(tape, h, &mut masks)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, &layer.ln2, x)?;
            let h = self.attention(tape, b, &layer.cross_attn, h, enc, false)?;
            let h = self.dropout(tape, h, &mut masks)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, &layer.ln3, x)?;
            let h = self.feed_forward(tape, b, &layer.ff, h)?;
            let h = self.dropout(tape, h, &mut masks)?;
            x = tape.add(x, h)?;
        }
        let mut x = self.norm(tape, b, &self.layout.dec_norm, x)?;
        if last_only && prefix.len() > 1 {
            x = tape.slice(x, Axis::Rows, prefix.len() - 1, prefix.len())?;
        }
        let logits = self.linear(tape, b, &self.layout.out, x)?;
        Ok(tape.log_softmax_rows(logits)?)
    }

    /// Per-position log-likelihood of `targets[t]` given decoder inputs `inputs[..=t]`.
    /// Returns a rank-1 var of length `inputs.len()`.
    pub fn teacher_forced_on(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        enc: Var,
        inputs: &[TokenId],
        targets: &[TokenId],
        masks: Option<&mut DropoutMasks>,
    ) -> Result<Var, ModelError> {
        if inputs.len() != targets.len() || targets.is_empty() {
            return Err(ModelError::BadTarget(targets.len() + 1));
        }
        self.check_ids(targets)?;
        let lp = self.decode_on(tape, b, enc, inputs, masks, false)?;
        let v = self.config.vocab_size;
        let idx = targets.iter().enumerate().map(|(t, &y)| t * v + y as usize).collect();
        Ok(tape.gather(lp, idx)?)
    }

    /// Teacher-forced scoring of a `[BOS, .., EOS]` target on `tape`.
    pub fn sequence_loglik_on(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        enc: Var,
        target: &TokenSequence,
        masks: Option<&mut DropoutMasks>,
    ) -> Result<Var, ModelError> {
        let ids = target.ids();
        if ids.len() < 2 || !target.starts_with_bos() || !target.ends_with_eos() {
            return Err(ModelError::BadTarget(ids.len()));
        }
        let n = ids.len() - 1;
        self.teacher_forced_on(tape, b, enc, &ids[..n], &ids[1..], masks)
    }

    /// Inference-mode encoding when `masks` is `None`.
    pub fn encode(
        &self,
        source: &TokenSequence,
        masks: Option<&mut DropoutMasks>,
    ) -> Result<EncoderOutput, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let states = self.encode_on(&mut tape, &b, source.ids(), masks)?;
        Ok(EncoderOutput { states: tape.value(states).clone(), source_len: source.len() })
    }

    /// `[prefix_len, vocab_size]` log-probabilities.
    pub fn decode_logprobs(
        &self,
        enc: &EncoderOutput,
        prefix: &TokenSequence,
        masks: Option<&mut DropoutMasks>,
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let e = tape.leaf_ref(&enc.states, false);
        let lp = self.decode_on(&mut tape, &b, e, prefix.ids(), masks, false)?;
        Ok(tape.value(lp).clone())
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_token_logprobs(&self, enc: &EncoderOutput, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let e = tape.leaf_ref(&enc.states, false);
        let lp = self.decode_on(&mut tape, &b, e, prefix, None, true)?;
        Ok(tape.value(lp).values().to_vec())
    }

    /// `f(target_{i+1} | X, target_{<=i})` for every generated position.
    pub fn sequence_loglik(&self, enc: &EncoderOutput, target: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let e = tape.leaf_ref(&enc.states, false);
        let ll = self.sequence_loglik_on(&mut tape, &b, e, target, None)?;
        Ok(tape.value(ll).values().to_vec())
    }
}

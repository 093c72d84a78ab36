use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{ExamplePair, TokenId, TokenSequence};
use crate::decoding::{beam_search, generate_silver, inverse_length_penalty, score_sequence, DecodeConfig};
use crate::losses::{
    combined_loss, combined_loss_on, contrastive_loss, contrastive_loss_on, nll_loss_on, LossBreakdown,
};
use crate::model::{is_encoder_param, is_trainable_param, DropoutMasks, EncoderOutput, Seq2SeqModel};
use crate::seed::derive_seed;

use super::early_stop::EarlyStopping;
use super::optim::{AdamW, Schedule};
use super::{TrainError, TrainingConfig};

// Labels of the derived RNG streams.
pub(crate) const STREAM_DROPOUT: u64 = 0x4452_4f50;
pub(crate) const STREAM_SS: u64 = 0x5353_4d50;
const PASS_ENC: u64 = 0;
const PASS_GOLD: u64 = 1;
const PASS_SILVER: u64 = 2;

/// Which parameters receive gradients. The positional table never does.
pub fn trainable_predicate(freeze_encoder: bool) -> impl Fn(&str) -> bool + Copy {
    move |name: &str| is_trainable_param(name) && !(freeze_encoder && is_encoder_param(name))
}

pub struct TrainState {
    pub model: Seq2SeqModel,
    pub config: TrainingConfig,
    pub decode: DecodeConfig,
    /// Optimizer updates applied in the current phase.
    pub step: usize,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub early: EarlyStopping,
    /// Parameters at the best validation so far.
    pub best: Option<Vec<Tensor>>,
    /// Distinguishes the RNG streams of the warm start from the main phase.
    pub phase: u64,
}

impl TrainState {
    pub fn new(
        model: Seq2SeqModel,
        config: TrainingConfig,
        total_steps: usize,
        phase: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let decode = super::trainer::decode_config(&config, model.config());
        decode.validate()?;
        let pred = trainable_predicate(config.freeze_encoder);
        let mask: Vec<bool> = model.param_names().iter().map(|n| pred(n)).collect();
        let optimizer = AdamW::new(
            model.params(),
            &mask,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            config.weight_decay,
        );
        let schedule = Schedule::new(config.learning_rate, total_steps, config.warmup_fraction);
        let early = EarlyStopping::new(config.patience);
        Ok(Self { model, config, decode, step: 0, optimizer, schedule, early, best: None, phase })
    }

    fn dropout_seed(&self, pair: usize) -> Option<u64> {
        (self.model.config().dropout_rate > 0.0)
            .then(|| derive_seed(self.config.seed, &[STREAM_DROPOUT, self.phase, self.step as u64, pair as u64]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub gamma: f64,
    pub beta: f64,
    pub lambda_nll: f64,
    /// Base seed of this pair's dropout masks; `None` runs without dropout.
    pub dropout_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub breakdown: LossBreakdown,
    /// Whether a distinct silver summary was scored.
    pub scored_silver: bool,
    /// Per-parameter gradient of this pair's loss; `None` where no gradient flowed.
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Loss and gradients for one pair on a fresh tape.
///
/// The document is encoded once. The gold target is scored against that
/// encoding with `decoder_inputs` (default: the gold prefix) and, when a
/// silver summary different from the gold one is given, the silver summary
/// is scored against the same encoding. A silver summary equal to the gold
/// one contributes no margin term.
pub fn pair_gradients(
    model: &Seq2SeqModel,
    trainable: impl Fn(&str) -> bool,
    pair: &ExamplePair,
    decoder_inputs: Option<&[TokenId]>,
    silver: Option<&TokenSequence>,
    opts: &PairOptions,
) -> Result<PairOutcome, TrainError> {
    let gold = pair.summary.ids();
    if gold.len() < 2 {
        return Err(TrainError::Model(crate::model::ModelError::BadTarget(gold.len())));
    }
    let n = gold.len() - 1;
    let inputs = decoder_inputs.unwrap_or(&gold[..n]);
    let rate = model.config().dropout_rate;
    let masks = |pass: u64| opts.dropout_seed.map(|s| DropoutMasks::new(rate, derive_seed(s, &[pass])));

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, trainable);
    let mut m = masks(PASS_ENC);
    let enc = model.encode_on(&mut tape, &b, pair.document.ids(), m.as_mut())?;
    let mut m = masks(PASS_GOLD);
    let gold_ll = model.teacher_forced_on(&mut tape, &b, enc, inputs, &gold[1..], m.as_mut())?;
    let gold_sum = tape.sum(gold_ll)?;
    let pos = tape.scale(gold_sum, inverse_length_penalty(n, opts.beta))?;
    let nll = nll_loss_on(&mut tape, gold_ll)?;
    let pos_score = tape.value(pos).item();
    let l_nll = tape.value(nll).item();

    let mut neg_score = pos_score;
    let mut con = None;
    let scored_silver = silver.is_some_and(|s| s != &pair.summary);
    if let Some(s) = silver.filter(|_| scored_silver) {
        let mut m = masks(PASS_SILVER);
        let ll = model.sequence_loglik_on(&mut tape, &b, enc, s, m.as_mut())?;
        let sum = tape.sum(ll)?;
        let neg = tape.scale(sum, inverse_length_penalty(s.len() - 1, opts.beta))?;
        neg_score = tape.value(neg).item();
        if contrastive_loss(pos_score, neg_score, opts.gamma)? > 0.0 {
            con = Some(contrastive_loss_on(&mut tape, pos, neg, opts.gamma)?);
        }
    }
    let l_con = if scored_silver { contrastive_loss(pos_score, neg_score, opts.gamma)? } else { 0.0 };
    let breakdown = LossBreakdown {
        l_nll,
        l_con,
        total: combined_loss(l_nll, l_con, opts.lambda_nll),
        hinge_active: l_con > 0.0,
        pos_score,
        neg_score,
    };

    let root = combined_loss_on(&mut tape, Some(nll), con, opts.lambda_nll)?;
    let grads = match root {
        Some(r) => {
            tape.backward(r)?;
            b.vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()
        }
        None => vec![None; b.vars.len()],
    };
    Ok(PairOutcome { breakdown, scored_silver, grads })
}

/// Batch-averaged losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub l_nll: f64,
    pub l_con: f64,
    pub loss: f64,
    /// Fraction of pairs with a strictly positive margin loss.
    pub hinge_rate: f64,
    pub pos_score: f64,
    /// Mean silver score; `None` when no silver summaries were scored.
    pub neg_score: Option<f64>,
    /// Learning rate used for the update.
    pub lr: f64,
}

fn accumulate(total: &mut [Option<Vec<f64>>], pair: Vec<Option<Vec<f64>>>) {
    for (acc, g) in total.iter_mut().zip(pair) {
        match (acc.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *acc = Some(g),
            _ => {}
        }
    }
}

fn check_finite(b: &LossBreakdown, step: usize, pair: usize) -> Result<(), TrainError> {
    for (name, v) in [("l_nll", b.l_nll), ("pos_score", b.pos_score), ("neg_score", b.neg_score), ("total", b.total)] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, pair, detail: format!("{name} = {v}") });
        }
    }
    Ok(())
}

struct BatchAccumulator {
    grads: Vec<Option<Vec<f64>>>,
    sums: LossBreakdown,
    active: usize,
    silver_pairs: usize,
    neg_sum: f64,
    pairs: usize,
}

impl BatchAccumulator {
    fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
            sums: LossBreakdown::default(),
            active: 0,
            silver_pairs: 0,
            neg_sum: 0.0,
            pairs: 0,
        }
    }

    fn add(&mut self, o: PairOutcome, has_silver: bool) {
        let b = o.breakdown;
        self.sums.l_nll += b.l_nll;
        self.sums.l_con += b.l_con;
        self.sums.total += b.total;
        self.sums.pos_score += b.pos_score;
        if has_silver {
            self.silver_pairs += 1;
            self.neg_sum += b.neg_score;
        }
        self.active += usize::from(b.hinge_active);
        self.pairs += 1;
        accumulate(&mut self.grads, o.grads);
    }

    fn finish(self, state: &mut TrainState) -> Result<StepReport, TrainError> {
        let n = self.pairs as f64;
        let lr = optimizer_update(state, self.grads, self.pairs)?;
        Ok(StepReport {
            l_nll: self.sums.l_nll / n,
            l_con: self.sums.l_con / n,
            loss: self.sums.total / n,
            hinge_rate: self.active as f64 / n,
            pos_score: self.sums.pos_score / n,
            neg_score: (self.silver_pairs > 0).then(|| self.neg_sum / self.silver_pairs as f64),
            lr,
        })
    }
}

/// One step of the gold/silver objective. Also serves `nll_only` (no silver
/// is generated) and `con_only` (no NLL term).
///
/// Batch loss is the mean over pairs of `lambda * nll + con`.
pub fn train_step_consum(state: &mut TrainState, batch: &[&ExamplePair]) -> Result<StepReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mode = state.config.mode;
    let mut acc = BatchAccumulator::new(state.model.params().len());
    for (i, pair) in batch.iter().enumerate() {
        let silver = if mode.uses_silver_scores() {
            Some(generate_silver(&state.model, &pair.document, &state.decode)?)
        } else {
            None
        };
        let opts = PairOptions {
            gamma: state.config.gamma,
            beta: state.config.beta,
            lambda_nll: state.config.effective_lambda(),
            dropout_seed: state.dropout_seed(i),
        };
        let pred = trainable_predicate(state.config.freeze_encoder);
        let o = pair_gradients(&state.model, pred, pair, None, silver.as_ref(), &opts)?;
        check_finite(&o.breakdown, state.step, i)?;
        acc.add(o, silver.is_some());
    }
    acc.finish(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsLevel {
    Sum,
    Token,
}

/// Independent Bernoulli(`prob`) draws.
pub fn draw_replacements(rng: &mut impl Rng, prob: f64, count: usize) -> Vec<bool> {
    (0..count).map(|_| rng.gen::<f64>() < prob).collect()
}

/// Decoder inputs with position `t >= 1` taken from `silver` when
/// `replace[t - 1]` is set and the silver summary reaches position `t`.
/// Positions past the silver summary keep the gold token.
pub fn mix_decoder_inputs(gold_inputs: &[TokenId], silver: &TokenSequence, replace: &[bool]) -> Vec<TokenId> {
    let s = silver.ids();
    gold_inputs
        .iter()
        .enumerate()
        .map(|(t, &g)| if t > 0 && replace[t - 1] && t < s.len() { s[t] } else { g })
        .collect()
}

/// One scheduled-sampling step: NLL of the gold targets with decoder inputs
/// partly or wholly taken from the silver summary.
pub fn train_step_ss(state: &mut TrainState, batch: &[&ExamplePair], level: SsLevel) -> Result<StepReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = BatchAccumulator::new(state.model.params().len());
    for (i, pair) in batch.iter().enumerate() {
        let gold = pair.summary.ids();
        let n = gold.len().saturating_sub(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            state.config.seed,
            &[STREAM_SS, state.phase, state.step as u64, i as u64],
        ));
        let replace = match level {
            SsLevel::Sum => vec![draw_replacements(&mut rng, state.config.ss_prob, 1)[0]; n.saturating_sub(1)],
            SsLevel::Token => draw_replacements(&mut rng, state.config.ss_prob, n.saturating_sub(1)),
        };
        let inputs = if replace.iter().any(|&r| r) {
            let silver = generate_silver(&state.model, &pair.document, &state.decode)?;
            Some(mix_decoder_inputs(&gold[..n], &silver, &replace))
        } else {
            None
        };
        let opts =
            PairOptions { gamma: 0.0, beta: state.config.beta, lambda_nll: 1.0, dropout_seed: state.dropout_seed(i) };
        let pred = trainable_predicate(state.config.freeze_encoder);
        let o = pair_gradients(&state.model, pred, pair, inputs.as_deref(), None, &opts)?;
        check_finite(&o.breakdown, state.step, i)?;
        acc.add(o, false);
    }
    acc.finish(state)
}

/// Averages summed gradients over `batch_len` pairs and applies one update
/// at the scheduled rate. Returns the rate used.
pub fn optimizer_update(
    state: &mut TrainState,
    mut grads: Vec<Option<Vec<f64>>>,
    batch_len: usize,
) -> Result<f64, TrainError> {
    let inv = 1.0 / batch_len as f64;
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x *= inv);
    }
    let lr = state.schedule.lr(state.step);
    state.optimizer.update(state.model.params_mut(), &grads, lr)?;
    state.step += 1;
    Ok(lr)
}

/// Gold and silver beam scores against one encoder output.
pub fn pair_scores(
    model: &Seq2SeqModel,
    enc: &EncoderOutput,
    gold: &TokenSequence,
    silver: &TokenSequence,
    beta: f64,
) -> Result<(f64, f64), TrainError> {
    let pos = score_sequence(&model.sequence_loglik(enc, gold)?, beta)?;
    let neg = score_sequence(&model.sequence_loglik(enc, silver)?, beta)?;
    Ok((pos, neg))
}

/// How well a model separates gold from its own top beam output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HingeReport {
    pub pairs: usize,
    /// Pairs with zero margin loss; a silver summary equal to the gold one counts.
    pub satisfied: usize,
    /// Pairs with `pos >= neg + gamma` computed literally.
    pub strict: usize,
    pub silver_equals_gold: usize,
}

impl HingeReport {
    pub fn satisfied_rate(&self) -> f64 {
        self.satisfied as f64 / self.pairs.max(1) as f64
    }
    pub fn strict_rate(&self) -> f64 {
        self.strict as f64 / self.pairs.max(1) as f64
    }
    pub fn exact_match_rate(&self) -> f64 {
        self.silver_equals_gold as f64 / self.pairs.max(1) as f64
    }
}

/// Inference-mode hinge statistics over `pairs`.
pub fn hinge_report(
    model: &Seq2SeqModel,
    pairs: &[ExamplePair],
    decode: &DecodeConfig,
    gamma: f64,
) -> Result<HingeReport, TrainError> {
    let mut r = HingeReport::default();
    for p in pairs {
        let enc = model.encode(&p.document, None)?;
        let silver = beam_search(model, &enc, decode)?.swap_remove(0).tokens;
        let (pos, neg) = pair_scores(model, &enc, &p.summary, &silver, decode.length_penalty_beta)?;
        let same = silver == p.summary;
        r.pairs += 1;
        r.silver_equals_gold += usize::from(same);
        r.strict += usize::from(pos >= neg + gamma);
        r.satisfied += usize::from(same || contrastive_loss(pos, neg, gamma)? == 0.0);
    }
    Ok(r)
}

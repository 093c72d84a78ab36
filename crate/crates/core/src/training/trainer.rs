use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{ExamplePair, Vocab};
use crate::decoding::{generate_silver, DecodeConfig};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::rouge::{mean_scores, score_texts, RougeScores};
use crate::seed::derive_seed;

use super::early_stop::Decision;
use super::step::{train_step_consum, train_step_ss, SsLevel, StepReport, TrainState};
use super::{Mode, TrainError, TrainingConfig};

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_VAL: u64 = 0x5641_4c53;
const PHASE_WARM: u64 = 1;
const PHASE_MAIN: u64 = 2;

/// Beam settings used both for silver generation and evaluation.
pub fn decode_config(cfg: &TrainingConfig, model: &ModelConfig) -> DecodeConfig {
    DecodeConfig { beam_size: cfg.beam_size, length_penalty_beta: cfg.beta, max_len: model.max_sum_len }
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub l_nll: Option<f64>,
    pub l_con: Option<f64>,
    pub loss: Option<f64>,
    pub hinge_rate: Option<f64>,
    pub pos_score: Option<f64>,
    pub neg_score: Option<f64>,
    pub rouge1_f: Option<f64>,
    pub rouge2_f: Option<f64>,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: Option<f64>,
    pub lr: Option<f64>,
}

impl MetricsRow {
    fn train(split: &str, step: usize, r: &StepReport, mode: Mode) -> Self {
        let con = mode.uses_silver_scores();
        Self {
            step,
            split: split.into(),
            l_nll: Some(r.l_nll),
            l_con: Some(r.l_con),
            loss: Some(r.loss),
            hinge_rate: con.then_some(r.hinge_rate),
            pos_score: Some(r.pos_score),
            neg_score: r.neg_score,
            rouge1_f: None,
            rouge2_f: None,
            rouge_l_f: None,
            lr: Some(r.lr),
        }
    }

    fn validation(step: usize, s: &RougeScores) -> Self {
        Self {
            step,
            split: "val".into(),
            l_nll: None,
            l_con: None,
            loss: None,
            hinge_rate: None,
            pos_score: None,
            neg_score: None,
            rouge1_f: Some(s.r1.f1),
            rouge2_f: Some(s.r2.f1),
            rouge_l_f: Some(s.rl.f1),
            lr: None,
        }
    }
}

/// Training and validation splits plus the vocabulary used to turn
/// decoded ids back into words for scoring.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [ExamplePair],
    pub val: &'a [ExamplePair],
    pub vocab: &'a Vocab,
}

/// Fixed, seed-determined subsample of validation indices in ascending order.
pub fn validation_subsample(n_val: usize, val_samples: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_val).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_VAL])));
    idx.truncate(val_samples.min(n_val));
    idx.sort_unstable();
    idx
}

/// Mean Rouge of beam outputs on the selected validation pairs.
pub fn validate(
    model: &Seq2SeqModel,
    val: &[ExamplePair],
    indices: &[usize],
    decode: &DecodeConfig,
    vocab: &Vocab,
) -> Result<RougeScores, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let mut scores = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &val[i];
        let out = generate_silver(model, &p.document, decode)?;
        scores.push(score_texts(&vocab.detokenize(out.ids()), &vocab.detokenize(p.summary.ids())));
    }
    Ok(mean_scores(&scores))
}

/// Validates, snapshots on improvement, and restores the best snapshot when
/// patience runs out.
pub fn validate_and_maybe_stop(
    state: &mut TrainState,
    val: &[ExamplePair],
    indices: &[usize],
    vocab: &Vocab,
) -> Result<(Decision, RougeScores), TrainError> {
    let scores = validate(&state.model, val, indices, &state.decode, vocab)?;
    Ok((record_validation(state, scores.r2.f1), scores))
}

/// Feeds one monitored Rouge-2 value to the stopping rule: snapshots the
/// parameters on improvement and restores the best snapshot on stop.
pub fn record_validation(state: &mut TrainState, rouge2: f64) -> Decision {
    let decision = state.early.observe(rouge2);
    match decision {
        Decision::Improved => state.best = Some(state.model.params().to_vec()),
        Decision::Stop => restore_best(state),
        Decision::Continue => {}
    }
    decision
}

fn restore_best(state: &mut TrainState) {
    if let Some(best) = &state.best {
        state.model.params_mut().clone_from_slice(best);
    }
}

pub struct PhaseOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub stopped_early: bool,
}

/// Runs one phase to its step budget or to early stopping. Validation
/// happens only when `val` is given; the best snapshot is restored at the
/// end of a validated phase.
pub fn run_phase(
    model: Seq2SeqModel,
    cfg: &TrainingConfig,
    train: &[ExamplePair],
    val: Option<(&[ExamplePair], &Vocab)>,
    phase: u64,
    split: &str,
) -> Result<PhaseOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let budget = cfg.max_epochs * steps_per_epoch;
    let total = cfg.max_steps.map_or(budget, |m| m.min(budget));
    let val_every = ((cfg.val_frequency * steps_per_epoch as f64).ceil() as usize).max(1);
    let indices = match val {
        Some(([], _)) => return Err(TrainError::EmptyValidation),
        Some((v, _)) => validation_subsample(v.len(), cfg.val_samples, cfg.seed),
        None => Vec::new(),
    };
    let mut state = TrainState::new(model, cfg.clone(), total, phase)?;
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let mut last_decision = None;
    log::info!(
        "{split}: mode {}, {} pairs, {steps_per_epoch} steps/epoch, {total} steps, validation every {val_every}",
        cfg.mode.as_str(),
        train.len()
    );
    'epochs: for epoch in 0.. {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, phase, epoch])));
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= total {
                break 'epochs;
            }
            let batch: Vec<&ExamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let report = match cfg.mode {
                Mode::Consum | Mode::NllOnly | Mode::ConOnly => train_step_consum(&mut state, &batch)?,
                Mode::SsSum => train_step_ss(&mut state, &batch, SsLevel::Sum)?,
                Mode::SsToken => train_step_ss(&mut state, &batch, SsLevel::Token)?,
            };
            metrics.push(MetricsRow::train(split, state.step, &report, cfg.mode));
            if let Some((v, vocab)) = val {
                if state.step % val_every == 0 {
                    let (d, s) = validate_and_maybe_stop(&mut state, v, &indices, vocab)?;
                    log::info!("step {}: val rouge-2 {:.4} ({d:?})", state.step, s.r2.f1);
                    metrics.push(MetricsRow::validation(state.step, &s));
                    last_decision = Some(d);
                    if d == Decision::Stop {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if let Some((v, vocab)) = val {
        if !stopped_early {
            if state.step % val_every != 0 {
                let (d, s) = validate_and_maybe_stop(&mut state, v, &indices, vocab)?;
                metrics.push(MetricsRow::validation(state.step, &s));
                last_decision = Some(d);
            }
            if last_decision != Some(Decision::Improved) {
                restore_best(&mut state);
            }
        }
    }
    Ok(PhaseOutcome { state, metrics, stopped_early })
}

/// Plain NLL training of every trainable parameter, encoder included, for
/// `warm_start_epochs`. Returns the model unchanged when that is zero.
pub fn warm_start(
    model: Seq2SeqModel,
    train: &[ExamplePair],
    cfg: &TrainingConfig,
) -> Result<(Seq2SeqModel, Vec<MetricsRow>), TrainError> {
    if cfg.warm_start_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let warm = TrainingConfig {
        mode: Mode::NllOnly,
        freeze_encoder: false,
        learning_rate: cfg.warm_start_lr,
        max_epochs: cfg.warm_start_epochs,
        max_steps: None,
        ..cfg.clone()
    };
    let out = run_phase(model, &warm, train, None, PHASE_WARM, "warm_start")?;
    Ok((out.state.model, out.metrics))
}

pub struct TrainOutcome {
    pub model: Seq2SeqModel,
    pub optimizer: super::AdamW,
    pub metrics: Vec<MetricsRow>,
    pub steps: usize,
    pub stopped_early: bool,
    pub best_rouge2: Option<f64>,
}

/// The configured mode with validation and early stopping, starting from `model`.
pub fn train_main(model: Seq2SeqModel, data: TrainData<'_>, cfg: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    let out = run_phase(model, cfg, data.train, Some((data.val, data.vocab)), PHASE_MAIN, "train")?;
    Ok(TrainOutcome {
        best_rouge2: out.state.early.best,
        steps: out.state.step,
        model: out.state.model,
        optimizer: out.state.optimizer,
        metrics: out.metrics,
        stopped_early: out.stopped_early,
    })
}

/// Warm start followed by the configured mode.
pub fn train(model: Seq2SeqModel, data: TrainData<'_>, cfg: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (model, mut metrics) = warm_start(model, data.train, cfg)?;
    let mut out = train_main(model, data, cfg)?;
    metrics.append(&mut out.metrics);
    out.metrics = metrics;
    Ok(out)
}

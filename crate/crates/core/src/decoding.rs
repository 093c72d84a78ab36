//! Length-penalized beam search, its exhaustive oracle, and sequence scoring.
//!
//! A hypothesis with `m` generated tokens (EOS included, BOS excluded) and
//! summed log-likelihood `s` scores `s / m^beta`. The same score ranks
//! partial hypotheses at every pruning step and finished ones at the end.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, TokenSequence, BOS, EOS};
use crate::model::{EncoderOutput, ModelError, Seq2SeqModel};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("log-likelihoods must be <= 0, got {0}")]
    PositiveLoglik(f64),
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("search space {vocab}^{max_len} exceeds the exhaustive-search limit of {limit}")]
    SearchSpaceTooLarge { vocab: usize, max_len: usize, limit: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty_beta: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 4, length_penalty_beta: 0.6, max_len: 8 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be positive".into()));
        }
        if !self.length_penalty_beta.is_finite() || self.length_penalty_beta <= 0.0 {
            return Err(DecodeError::Config(format!(
                "length_penalty_beta must be > 0, got {}",
                self.length_penalty_beta
            )));
        }
        if self.max_len == 0 {
            return Err(DecodeError::Config("max_len must be positive".into()));
        }
        if self.length_penalty_beta >= 1.0 {
            warn!(
                "length_penalty_beta = {} >= 1.0; summarization normally uses a value below 1",
                self.length_penalty_beta
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// BOS-prefixed; EOS-terminated once finished.
    pub tokens: TokenSequence,
    pub sum_loglik: f64,
    pub finished: bool,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// `1 / m^beta`; scores multiply by this so every code path rounds identically.
pub fn inverse_length_penalty(m: usize, beta: f64) -> f64 {
    1.0 / (m as f64).powf(beta)
}

/// Length-normalized beam score of a fully scored sequence.
pub fn score_sequence(per_token_logliks: &[f64], beta: f64) -> Result<f64, DecodeError> {
    if per_token_logliks.is_empty() {
        return Err(DecodeError::EmptySequence);
    }
    if let Some(&p) = per_token_logliks.iter().find(|&&v| v > 0.0) {
        return Err(DecodeError::PositiveLoglik(p));
    }
    let sum = per_token_logliks.iter().fold(0.0, |a, b| a + b);
    Ok(sum * inverse_length_penalty(per_token_logliks.len(), beta))
}

/// Descending score, then lexicographically smaller tokens first.
pub fn rank_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn first_generable() -> TokenId {
    // PAD and BOS are never generated.
    EOS
}

fn check_lengths(model: &Seq2SeqModel, cfg: &DecodeConfig) -> Result<(), DecodeError> {
    cfg.validate()?;
    if cfg.max_len > model.config().max_sum_len {
        return Err(DecodeError::Config(format!(
            "max_len {} exceeds the model's max_sum_len {}",
            cfg.max_len,
            model.config().max_sum_len
        )));
    }
    Ok(())
}

pub fn beam_search(
    model: &Seq2SeqModel,
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>, DecodeError> {
    check_lengths(model, cfg)?;
    let vocab = model.config().vocab_size as TokenId;
    let mut alive: Vec<(Vec<TokenId>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished = Vec::new();
    for m in 1..=cfg.max_len {
        let inv = inverse_length_penalty(m, cfg.length_penalty_beta);
        let mut candidates = Vec::new();
        for (tokens, sum) in &alive {
            let lp = model.next_token_logprobs(enc, tokens)?;
            let range = if m == cfg.max_len { EOS..EOS + 1 } else { first_generable()..vocab };
            for t in range {
                let mut next = tokens.clone();
                next.push(t);
                let s = sum + lp[t as usize];
                candidates.push(BeamHypothesis {
                    tokens: TokenSequence(next),
                    sum_loglik: s,
                    finished: t == EOS,
                    score: s * inv,
                });
            }
        }
        candidates.sort_by(rank_order);
        candidates.truncate(cfg.beam_size);
        alive.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                alive.push((c.tokens.0, c.sum_loglik));
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.sort_by(rank_order);
    Ok(finished)
}

/// Scores every EOS-terminated sequence of at most `max_len` generated tokens.
pub fn exhaustive_search(
    model: &Seq2SeqModel,
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>, DecodeError> {
    check_lengths(model, cfg)?;
    let v = model.config().vocab_size;
    let too_large = (v as u64).checked_pow(cfg.max_len as u32).is_none_or(|n| n > EXHAUSTIVE_LIMIT);
    if too_large {
        return Err(DecodeError::SearchSpaceTooLarge { vocab: v, max_len: cfg.max_len, limit: EXHAUSTIVE_LIMIT });
    }
    let mut out = Vec::new();
    let mut prefix = vec![BOS];
    expand(model, enc, cfg, &mut prefix, 0.0, &mut out)?;
    out.sort_by(rank_order);
    Ok(out)
}

fn expand(
    model: &Seq2SeqModel,
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
    prefix: &mut Vec<TokenId>,
    sum: f64,
    out: &mut Vec<BeamHypothesis>,
) -> Result<(), DecodeError> {
    let m = prefix.len();
    let lp = model.next_token_logprobs(enc, prefix)?;
    let s = sum + lp[EOS as usize];
    let mut done = prefix.clone();
    done.push(EOS);
    out.push(BeamHypothesis {
        tokens: TokenSequence(done),
        sum_loglik: s,
        finished: true,
        score: s * inverse_length_penalty(m, cfg.length_penalty_beta),
    });
    if m < cfg.max_len {
        for t in EOS + 1..model.config().vocab_size as TokenId {
            prefix.push(t);
            expand(model, enc, cfg, prefix, sum + lp[t as usize], out)?;
            prefix.pop();
        }
    }
    Ok(())
}

/// Top-ranked beam output for `source` under inference-mode encoding.
pub fn generate_silver(
    model: &Seq2SeqModel,
    source: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<TokenSequence, DecodeError> {
    let enc = model.encode(source, None)?;
    let ranked = beam_search(model, &enc, cfg)?;
    Ok(ranked.into_iter().next().expect("beam search always finishes at least one hypothesis").tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn tiny(vocab: usize, max_sum_len: usize, seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_doc_len: 6,
            max_sum_len,
            dropout_rate: 0.0,
        };
        Seq2SeqModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn score_of_single_token_ignores_beta() {
        for beta in [0.3, 0.6, 1.0, 2.0] {
            assert_eq!(score_sequence(&[-1.0], beta).unwrap(), -1.0);
        }
    }

    #[test]
    fn score_of_two_tokens() {
        let s = score_sequence(&[-1.0, -2.0], 0.8).unwrap();
        let expected = -3.0 / 2f64.powf(0.8);
        assert!((s - expected).abs() < 1e-12);
        assert!((s + 1.7230475).abs() < 1e-6);
    }

    #[test]
    fn score_rejects_empty() {
        assert!(matches!(score_sequence(&[], 0.6), Err(DecodeError::EmptySequence)));
    }

    #[test]
    fn default_beam_settings() {
        let d = DecodeConfig::default();
        assert_eq!(d.beam_size, 4);
        assert_eq!(d.length_penalty_beta, 0.6);
    }

    #[test]
    fn exhaustive_enumerates_all_terminated_sequences() {
        // Generable tokens are EOS and one word: [EOS] and [a, EOS].
        let m = tiny(4, 2, 1);
        let enc = m.encode(&TokenSequence::new(vec![3]), None).unwrap();
        let all =
            exhaustive_search(&m, &enc, &DecodeConfig { beam_size: 1, length_penalty_beta: 0.6, max_len: 2 }).unwrap();
        let mut seqs: Vec<_> = all.iter().map(|h| h.tokens.0.clone()).collect();
        seqs.sort();
        assert_eq!(seqs, vec![vec![BOS, EOS], vec![BOS, 3, EOS]]);
        assert!(all.iter().all(|h| h.tokens.ends_with_eos() && h.finished));
    }

    #[test]
    fn exhaustive_guards_search_space() {
        let m = tiny(40, 5, 1);
        let enc = m.encode(&TokenSequence::new(vec![3]), None).unwrap();
        let r = exhaustive_search(&m, &enc, &DecodeConfig { beam_size: 1, length_penalty_beta: 0.6, max_len: 5 });
        assert!(matches!(r, Err(DecodeError::SearchSpaceTooLarge { .. })));
    }

    #[test]
    fn forced_eos_model_yields_single_hypothesis() {
        let mut m = tiny(6, 4, 2);
        let v = m.config().vocab_size;
        m.param_mut("out_proj.weight").unwrap().values_mut().iter_mut().for_each(|x| *x = 0.0);
        let b = m.param_mut("out_proj.bias").unwrap().values_mut();
        for (i, x) in b.iter_mut().enumerate() {
            *x = if i == EOS as usize { 0.0 } else { -1000.0 };
        }
        let enc = m.encode(&TokenSequence::new(vec![4, 5]), None).unwrap();
        let hyps = beam_search(&m, &enc, &DecodeConfig { beam_size: 1, length_penalty_beta: 0.6, max_len: 4 }).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].tokens.ids(), &[BOS, EOS]);
        let f_eos = m.next_token_logprobs(&enc, &[BOS]).unwrap()[EOS as usize];
        assert_eq!(hyps[0].score, f_eos);
        assert!(f_eos.abs() < 1e-12 && v == 6);
        let wide = beam_search(&m, &enc, &DecodeConfig { beam_size: 4, length_penalty_beta: 0.6, max_len: 4 }).unwrap();
        assert_eq!(wide[0].tokens.ids(), &[BOS, EOS]);
    }

    #[test]
    fn beam_agrees_with_exhaustive_when_saturated() {
        for seed in 0..10 {
            let m = tiny(6, 4, seed);
            let enc = m.encode(&TokenSequence::new(vec![3, 4, 5]), None).unwrap();
            let cfg = DecodeConfig { beam_size: 6usize.pow(4), length_penalty_beta: 0.6, max_len: 4 };
            let b = beam_search(&m, &enc, &cfg).unwrap();
            let e = exhaustive_search(&m, &enc, &cfg).unwrap();
            assert_eq!(b[0].tokens, e[0].tokens);
            assert!((b[0].score - e[0].score).abs() <= 1e-12);
            assert_eq!(b.len(), e.len());
        }
    }

    #[test]
    fn hypotheses_are_consistent_and_ranked() {
        let m = tiny(8, 5, 3);
        let enc = m.encode(&TokenSequence::new(vec![3, 4, 7]), None).unwrap();
        let cfg = DecodeConfig { beam_size: 3, length_penalty_beta: 0.7, max_len: 5 };
        let hyps = beam_search(&m, &enc, &cfg).unwrap();
        assert_eq!(hyps, beam_search(&m, &enc, &cfg).unwrap());
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &hyps {
            let mlen = h.generated_len();
            assert!(mlen <= cfg.max_len);
            assert!((h.score - h.sum_loglik / (mlen as f64).powf(cfg.length_penalty_beta)).abs() < 1e-12);
            assert!(h.finished && h.tokens.ends_with_eos());
            let rescored = m.sequence_loglik(&enc, &h.tokens).unwrap();
            assert_eq!(score_sequence(&rescored, cfg.length_penalty_beta).unwrap().to_bits(), h.score.to_bits());
        }
    }

    #[test]
    fn silver_is_deterministic() {
        let m = tiny(8, 5, 4);
        let src = TokenSequence::new(vec![3, 4, 7, 5]);
        let cfg = DecodeConfig { beam_size: 4, length_penalty_beta: 0.6, max_len: 5 };
        let a = generate_silver(&m, &src, &cfg).unwrap();
        assert_eq!(a, generate_silver(&m, &src, &cfg).unwrap());
        assert!(a.starts_with_bos() && a.ends_with_eos());
    }

    #[test]
    fn max_len_beyond_model_is_rejected() {
        let m = tiny(8, 3, 4);
        let enc = m.encode(&TokenSequence::new(vec![3]), None).unwrap();
        let r = beam_search(&m, &enc, &DecodeConfig { beam_size: 2, length_penalty_beta: 0.6, max_len: 4 });
        assert!(matches!(r, Err(DecodeError::Config(_))));
    }

    proptest! {
        #[test]
        fn score_is_increasing_in_each_loglik(v in proptest::collection::vec(-5.0f64..-0.01, 1..8), i in 0usize..8, bump in 0.001f64..0.01, beta in 0.1f64..1.5) {
            let i = i % v.len();
            let mut w = v.clone();
            w[i] += bump;
            prop_assert!(score_sequence(&w, beta).unwrap() > score_sequence(&v, beta).unwrap());
        }

        #[test]
        fn score_increases_with_beta_for_negative_sums(v in proptest::collection::vec(-5.0f64..-0.01, 2..8), beta in 0.1f64..1.5, d in 0.01f64..0.5) {
            prop_assert!(score_sequence(&v, beta + d).unwrap() > score_sequence(&v, beta).unwrap());
        }
    }
}

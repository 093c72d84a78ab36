//! Teacher-forced NLL, the margin ranking loss between gold and silver beam
//! scores, and their weighted combination.
//!
//! Each objective has a plain `f64` form and a tape form. Both compute the
//! same floating-point expression in the same order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("cannot compute a loss over an empty sequence")]
    EmptySequence,
    #[error("margin must be >= 0, got {0}")]
    NegativeMargin(f64),
    #[error("non-finite loss input")]
    NonFinite,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Loss terms of one gold/silver pair, or their batch average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_nll: f64,
    pub l_con: f64,
    pub total: f64,
    pub hinge_active: bool,
    pub pos_score: f64,
    pub neg_score: f64,
}

impl LossBreakdown {
    pub fn new(l_nll: f64, pos_score: f64, neg_score: f64, gamma: f64, lambda_nll: f64) -> Self {
        let l_con = contrastive_value(pos_score, neg_score, gamma);
        Self {
            l_nll,
            l_con,
            total: combined_value(l_nll, l_con, lambda_nll),
            hinge_active: l_con > 0.0,
            pos_score,
            neg_score,
        }
    }
}

/// `-sum(logliks)`
pub fn nll_loss(per_token_logliks: &[f64]) -> Result<f64, LossError> {
    if per_token_logliks.is_empty() {
        return Err(LossError::EmptySequence);
    }
    if per_token_logliks.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(-per_token_logliks.iter().fold(0.0, |a, b| a + b))
}

pub fn nll_loss_on(tape: &mut Tape<'_>, per_token_logliks: Var) -> Result<Var, LossError> {
    let s = tape.sum(per_token_logliks)?;
    Ok(tape.scale(s, -1.0)?)
}

fn contrastive_value(pos: f64, neg: f64, gamma: f64) -> f64 {
    let x = neg - pos + gamma;
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `max(0, neg - pos + gamma)`
pub fn contrastive_loss(pos_score: f64, neg_score: f64, gamma: f64) -> Result<f64, LossError> {
    if !(pos_score.is_finite() && neg_score.is_finite() && gamma.is_finite()) {
        return Err(LossError::NonFinite);
    }
    if gamma < 0.0 {
        return Err(LossError::NegativeMargin(gamma));
    }
    Ok(contrastive_value(pos_score, neg_score, gamma))
}

/// Hinge on the tape. Inside the flat region every input receives exactly zero gradient.
pub fn contrastive_loss_on(tape: &mut Tape<'_>, pos_score: Var, neg_score: Var, gamma: f64) -> Result<Var, LossError> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(LossError::NegativeMargin(gamma));
    }
    let neg_pos = tape.scale(pos_score, -1.0)?;
    let diff = tape.add(neg_score, neg_pos)?;
    let shifted = tape.add_scalar(diff, gamma)?;
    Ok(tape.relu(shifted)?)
}

fn combined_value(l_nll: f64, l_con: f64, lambda_nll: f64) -> f64 {
    lambda_nll * l_nll + l_con
}

pub fn combined_loss(l_nll: f64, l_con: f64, lambda_nll: f64) -> f64 {
    combined_value(l_nll, l_con, lambda_nll)
}

/// `lambda_nll * l_nll + l_con`. Either term may be absent (an all-zero
/// hinge, or a disabled NLL term); at least one must be present.
pub fn combined_loss_on(
    tape: &mut Tape<'_>,
    l_nll: Option<Var>,
    l_con: Option<Var>,
    lambda_nll: f64,
) -> Result<Option<Var>, LossError> {
    for v in l_nll.iter().chain(l_con.iter()) {
        tape.check(*v)?;
    }
    let nll = match l_nll {
        Some(v) if lambda_nll != 0.0 => Some(tape.scale(v, lambda_nll)?),
        _ => None,
    };
    Ok(match (nll, l_con) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    })
}

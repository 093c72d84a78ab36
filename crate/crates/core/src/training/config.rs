use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// NLL plus the gold-over-silver margin loss.
    Consum,
    NllOnly,
    /// Margin loss alone; the NLL weight is treated as zero.
    ConOnly,
    /// Scheduled sampling, whole decoder input replaced.
    SsSum,
    /// Scheduled sampling, per-position replacement.
    SsToken,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Consum => "consum",
            Mode::NllOnly => "nll_only",
            Mode::ConOnly => "con_only",
            Mode::SsSum => "ss_sum",
            Mode::SsToken => "ss_token",
        }
    }

    pub fn uses_silver_scores(&self) -> bool {
        matches!(self, Mode::Consum | Mode::ConOnly)
    }

    pub fn is_scheduled_sampling(&self) -> bool {
        matches!(self, Mode::SsSum | Mode::SsToken)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Margin of the ranking loss.
    pub gamma: f64,
    /// Length-penalty exponent, shared by silver generation and evaluation.
    pub beta: f64,
    pub lambda_nll: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub mode: Mode,
    pub ss_prob: f64,
    /// Size of the fixed validation subsample; clipped to the split size.
    pub val_samples: usize,
    /// Fraction of an epoch between validations.
    pub val_frequency: f64,
    pub patience: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub beam_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps; the earlier of the two limits wins.
    pub max_steps: Option<usize>,
    /// Epochs of plain NLL training on every parameter before the configured
    /// mode starts. This stands in for starting from an already fine-tuned model.
    pub warm_start_epochs: usize,
    pub warm_start_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            beta: 0.8,
            lambda_nll: 1.0,
            learning_rate: 3e-4,
            weight_decay: 1e-8,
            batch_size: 8,
            freeze_encoder: true,
            mode: Mode::Consum,
            ss_prob: 0.5,
            val_samples: 1000,
            val_frequency: 0.01,
            patience: 4,
            warmup_fraction: 0.05,
            seed: 42,
            beam_size: 4,
            max_epochs: 10,
            max_steps: None,
            warm_start_epochs: 0,
            warm_start_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn field(name: &'static str, reason: String) -> TrainError {
    TrainError::Config { field: name, reason }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let finite_nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(field(name, format!("must be a finite value >= 0, got {v}")))
            }
        };
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(field(name, format!("must be a finite value > 0, got {v}")))
            }
        };
        let count =
            |name: &'static str, v: usize| if v > 0 { Ok(()) } else { Err(field(name, "must be positive".into())) };
        finite_nonneg("gamma", self.gamma)?;
        positive("beta", self.beta)?;
        finite_nonneg("lambda_nll", self.lambda_nll)?;
        positive("learning_rate", self.learning_rate)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        count("batch_size", self.batch_size)?;
        if !(0.0..=1.0).contains(&self.ss_prob) {
            return Err(field("ss_prob", format!("must be in [0, 1], got {}", self.ss_prob)));
        }
        count("val_samples", self.val_samples)?;
        if !(self.val_frequency > 0.0 && self.val_frequency <= 1.0) {
            return Err(field("val_frequency", format!("must be in (0, 1], got {}", self.val_frequency)));
        }
        count("patience", self.patience)?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(field("warmup_fraction", format!("must be in [0, 1), got {}", self.warmup_fraction)));
        }
        count("beam_size", self.beam_size)?;
        count("max_epochs", self.max_epochs)?;
        if self.max_steps == Some(0) {
            return Err(field("max_steps", "must be positive when set".into()));
        }
        positive("warm_start_lr", self.warm_start_lr)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field(name, format!("must be in [0, 1), got {b}")));
            }
        }
        positive("adam_eps", self.adam_eps)?;
        if self.mode == Mode::ConOnly && self.lambda_nll != 0.0 {
            log::warn!("mode con_only ignores lambda_nll = {}", self.lambda_nll);
        }
        Ok(())
    }

    /// Weight on the NLL term actually used by the configured mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::ConOnly => 0.0,
            Mode::Consum => self.lambda_nll,
            Mode::NllOnly | Mode::SsSum | Mode::SsToken => 1.0,
        }
    }
}

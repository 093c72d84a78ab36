/// Outcome of one validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// New best score; the caller should snapshot parameters.
    Improved,
    Continue,
    /// Patience exhausted; the caller should restore the best snapshot.
    Stop,
}

/// Patience counter over a monitored score where larger is better.
/// Only a strict improvement resets the counter.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_improvement: 0 }
    }

    pub fn observe(&mut self, score: f64) -> Decision {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_improvement = 0;
            return Decision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

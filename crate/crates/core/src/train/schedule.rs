use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored loss has
/// gone `patience` epochs without improving by more than `min_delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b - self.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep training; `improved` marks a new best epoch.
    Continue { improved: bool },
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn check(&mut self, loss: f64) -> StopDecision {
        match self.best {
            Some(b) if loss >= b - self.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue { improved: false }
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
                StopDecision::Continue { improved: true }
            }
        }
    }
}

use serde::{Deserialize, Serialize};

/// Optimization hyperparameters carried by the network section of a cfg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Images per optimizer step.
    pub batch: usize,
    /// Micro-batches the batch is split into; memory only, gradients are
    /// averaged over the whole batch.
    pub subdivisions: usize,
    pub momentum: f64,
    pub decay: f64,
    pub learning_rate: f64,
    pub burn_in: usize,
    pub max_batches: usize,
    pub steps: Vec<usize>,
    pub scales: Vec<f64>,
    pub ignore_thresh: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            subdivisions: 16,
            momentum: 0.9,
            decay: 0.0005,
            learning_rate: 0.001,
            burn_in: 250,
            max_batches: 4000,
            steps: vec![1000],
            scales: vec![0.1],
            ignore_thresh: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn micro_batch(&self) -> usize {
        self.batch / self.subdivisions.max(1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch == 0 || self.subdivisions == 0 {
            out.push("batch and subdivisions must be >= 1".to_string());
        } else if !self.batch.is_multiple_of(self.subdivisions) {
            out.push(format!(
                "batch {} is not divisible by subdivisions {}",
                self.batch, self.subdivisions
            ));
        }
        if self.max_batches > 0 && self.burn_in >= self.max_batches {
            out.push(format!(
                "burn_in {} must be below max_batches {}",
                self.burn_in, self.max_batches
            ));
        }
        if self.steps.len() != self.scales.len() {
            out.push(format!(
                "{} steps but {} scales",
                self.steps.len(),
                self.scales.len()
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.decay < 0.0 || self.learning_rate < 0.0 {
            out.push("decay and learning_rate must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.ignore_thresh) {
            out.push(format!("ignore_thresh {} outside [0, 1]", self.ignore_thresh));
        }
        out
    }
}

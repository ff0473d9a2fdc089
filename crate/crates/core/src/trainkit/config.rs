use serde::{Deserialize, Serialize};

use crate::distill::GatePolicy;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Step size for trainable tensors outside the head: the whole encoder
    /// for a teacher, the PEFT blocks for a student.
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy; 0 disables.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Shuffling and, for students, PEFT initialisation.
    pub seed: u64,
    /// Student objective; ignored when training a teacher.
    pub gate: GatePolicy,
    /// Compute the teacher's logits for the student's training set once
    /// instead of once per minibatch.
    pub cache_teacher_logits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 3e-3,
            lr_head: 3e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            gate: GatePolicy::default(),
            cache_teacher_logits: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for the fully fine-tuned teacher.
    pub fn teacher() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            max_epochs: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr_backbone) || !pos(self.lr_head) || !pos(self.eps) {
            return Err(Error::Config(format!(
                "learning rates and eps must be positive: {} {} {}",
                self.lr_backbone, self.lr_head, self.eps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.gate.validate()
    }
}

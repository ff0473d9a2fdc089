use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-example KD term is weighted against cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `g·ce + (1−g)·kd` with `g` the teacher's normalised entropy.
    Entropy,
    /// `ce + kd` when the teacher is right, `ce` alone when it is wrong.
    Hard,
    /// Fixed `0.5·ce + 0.5·kd`.
    #[serde(rename = "none")]
    Ungated,
}

impl GateMode {
    pub fn tag(self) -> &'static str {
        match self {
            GateMode::Entropy => "entropy",
            GateMode::Hard => "hard",
            GateMode::Ungated => "none",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(GateMode::Entropy),
            "hard" => Ok(GateMode::Hard),
            "none" => Ok(GateMode::Ungated),
            other => Err(Error::Config(format!("unknown gate mode {other:?} (entropy, hard, none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatePolicy {
    pub mode: GateMode,
    pub temperature: f64,
    /// With `kd = false` the loss is plain cross-entropy whatever the mode.
    pub kd: bool,
    /// Replace each example's gate by the batch mean.
    pub batch_mean_gate: bool,
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            mode: GateMode::Entropy,
            temperature: 2.0,
            kd: true,
            batch_mean_gate: false,
        }
    }
}

impl GatePolicy {
    pub fn new(mode: GateMode, temperature: f64) -> Result<Self> {
        let p = Self {
            mode,
            temperature,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    /// Cross-entropy only, the "without KD" baseline.
    pub fn without_kd() -> Self {
        Self {
            mode: GateMode::Ungated,
            kd: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// `(w_ce, w_kd)` for one example with gate `g`.
    pub fn weights(&self, g: f64, teacher_correct: bool) -> (f64, f64) {
        if !self.kd {
            return (1.0, 0.0);
        }
        match self.mode {
            GateMode::Entropy => (g, 1.0 - g),
            GateMode::Hard => (1.0, if teacher_correct { 1.0 } else { 0.0 }),
            GateMode::Ungated => (0.5, 0.5),
        }
    }
}

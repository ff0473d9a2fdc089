use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// One bottleneck adapter per layer per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Bottleneck width; `0` means a quarter of each branch width.
    pub bottleneck: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { bottleneck: 0 }
    }
}

impl AdapterConfig {
    pub fn bottleneck_for(&self, width: usize) -> usize {
        if self.bottleneck == 0 {
            (width / 4).max(1)
        } else {
            self.bottleneck
        }
    }
}

/// Learnable prompt vectors injected at every layer of both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub length: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { length: 4 }
    }
}

/// Low-rank update of the query, key and value projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale `γ`; `None` means `2 / rank`.
    pub gamma: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, gamma: None }
    }
}

impl LoraConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(2.0 / self.rank as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftVariant {
    Adapter(AdapterConfig),
    Prompt(PromptConfig),
    Lora(LoraConfig),
}

impl PeftVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            PeftVariant::Adapter(_) => "adapter",
            PeftVariant::Prompt(_) => "prompt",
            PeftVariant::Lora(_) => "lora",
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let widths = [cfg.vision_width, cfg.text_width];
        match self {
            PeftVariant::Adapter(a) => {
                for w in widths {
                    let r = a.bottleneck_for(w);
                    if r >= w {
                        return Err(Error::Config(format!("adapter bottleneck {r} must be below width {w}")));
                    }
                }
            }
            PeftVariant::Prompt(p) => {
                let capacity = cfg.vision_seq().min(cfg.max_tokens);
                if p.length == 0 || p.length > capacity {
                    return Err(Error::Config(format!(
                        "prompt length {} outside 1..={capacity} (shortest branch sequence)",
                        p.length
                    )));
                }
            }
            PeftVariant::Lora(l) => {
                for w in widths {
                    if l.rank == 0 || 2 * l.rank > w {
                        return Err(Error::Config(format!(
                            "LoRA rank {} must lie in 1..={} for width {w}",
                            l.rank,
                            w / 2
                        )));
                    }
                }
                if !l.gamma().is_finite() {
                    return Err(Error::Config("LoRA scale must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Closed-form count of the scalars this variant adds to a model.
    pub fn added_parameters(&self, cfg: &EncoderConfig) -> usize {
        let widths = [cfg.vision_width, cfg.text_width];
        let l = cfg.layers;
        match self {
            PeftVariant::Adapter(a) => widths.iter().map(|&w| l * 2 * w * a.bottleneck_for(w)).sum(),
            PeftVariant::Prompt(p) => widths.iter().map(|&w| l * p.length * w).sum(),
            // Q, K, V are square: A is r×w and B is w×r.
            PeftVariant::Lora(c) => widths.iter().map(|&w| l * 3 * c.rank * (w + w)).sum(),
        }
    }
}

/// Scalars in the classifier head, which trains alongside any attachment.
pub fn head_parameters(cfg: &EncoderConfig) -> usize {
    cfg.classes * 2 * cfg.embed_dim + cfg.classes
}

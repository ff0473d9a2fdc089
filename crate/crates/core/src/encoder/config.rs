use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a [`DualEncoderModel`](super::DualEncoderModel).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer layers per branch.
    pub layers: usize,
    pub vision_width: usize,
    pub text_width: usize,
    /// Width of the shared embedding space each branch projects into.
    pub embed_dim: usize,
    pub heads: usize,
    /// Patch-feature vectors per image.
    pub patches: usize,
    /// Token slots per sentence, padding included.
    pub max_tokens: usize,
    pub vocab: usize,
    pub classes: usize,
    /// Hidden width of the feed-forward block, as a multiple of the branch width.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            vision_width: 32,
            text_width: 32,
            embed_dim: 16,
            heads: 4,
            patches: 12,
            max_tokens: 12,
            vocab: 256,
            classes: 2,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.heads == 0 {
            return fail("heads must be positive".into());
        }
        for (name, w) in [("vision_width", self.vision_width), ("text_width", self.text_width)] {
            if w == 0 || w % self.heads != 0 {
                return fail(format!("{name} {w} is not divisible by {} heads", self.heads));
            }
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("patches", self.patches),
            ("max_tokens", self.max_tokens),
            ("vocab", self.vocab),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Vision sequence length: classification token plus patches.
    pub fn vision_seq(&self) -> usize {
        self.patches + 1
    }
}

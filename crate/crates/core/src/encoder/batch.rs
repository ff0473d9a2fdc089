use super::{EncoderConfig, PAD_ID};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A packed minibatch of image–text pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u64>,
    /// `[batch, patches, vision_width]`
    pub patches: Tensor,
    /// Row-major `[batch, max_tokens]`; [`PAD_ID`] marks padding.
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let b = self.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if self.ids.len() != b {
            return Err(Error::shape("batch", format!("{} ids for {b} labels", self.ids.len())));
        }
        if self.patches.shape() != [b, cfg.patches, cfg.vision_width] {
            return Err(Error::shape(
                "batch",
                format!(
                    "patches {:?}, expected [{b}, {}, {}]",
                    self.patches.shape(),
                    cfg.patches,
                    cfg.vision_width
                ),
            ));
        }
        if self.tokens.len() != b * cfg.max_tokens {
            return Err(Error::shape(
                "batch",
                format!("{} token ids, expected {b}x{}", self.tokens.len(), cfg.max_tokens),
            ));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= cfg.classes) {
            return Err(Error::invalid(format!("label {l} outside {} classes", cfg.classes)));
        }
        if let Some(row) = self.tokens.chunks(cfg.max_tokens).position(|r| r.iter().all(|&t| t == PAD_ID)) {
            return Err(Error::invalid(format!("token row {row} is all padding")));
        }
        Ok(())
    }
}

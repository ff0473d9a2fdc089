use super::{Dataset, Example, GenSpec, Vocab};
use crate::encoder::PAD_ID;
use crate::error::{Error, Result};

/// Re-derives the label from the sentence tokens and the stored scene alone:
/// 1 iff the sentence names an attribute the scene does not have.
pub fn derive_label(spec: &GenSpec, ex: &Example) -> Result<usize> {
    let vocab = Vocab::new(spec)?;
    let words = ex.tokens.iter().take_while(|&&t| t != PAD_ID);
    let (mut shape, mut color) = (None, None);
    for &t in words {
        if let Some(s) = vocab.shape_of(t) {
            shape = Some(s);
        }
        if let Some(c) = vocab.color_of(t) {
            color = Some(c);
        }
    }
    let (Some(shape), Some(color)) = (shape, color) else {
        return Err(Error::format(format!("example {} names no shape or colour", ex.id)));
    };
    let congruent = shape == ex.meta.shape as usize && color == ex.meta.color as usize;
    Ok(usize::from(!congruent))
}

/// Ids of examples whose stored label disagrees with [`derive_label`].
pub fn verify_labels(data: &Dataset) -> Result<Vec<u64>> {
    let mut bad = Vec::new();
    for ex in &data.examples {
        if derive_label(&data.spec, ex)? != ex.label {
            bad.push(ex.id);
        }
    }
    Ok(bad)
}

//! Post-hoc analyses over trained models and evaluation records.

mod cca;
mod records;

pub use cca::{canonical_correlations, cca_profile, mean_cca, CcaRow, Matrix, RIDGE};
pub use records::{
    confidence_stats, error_breakdown, export_embeddings, gate_curve, quantile, ClassConfidence, EmbeddingRecord,
    ErrorCounts, GatePoint,
};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tape;
use crate::encoder::DualEncoderModel;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;
use crate::trainkit::EVAL_CHUNK;

/// Pooled hidden states after every layer of both branches: the
/// classification token for vision, the last real token for text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationDump {
    pub tag: String,
    pub ids: Vec<u64>,
    pub vision: Vec<Matrix>,
    pub text: Vec<Matrix>,
}

pub fn dump_activations(model: &DualEncoderModel, data: &Dataset, idx: &[usize], tag: &str) -> Result<ActivationDump> {
    if idx.is_empty() {
        return Err(Error::invalid("cannot dump activations for an empty index set"));
    }
    let cfg = &model.config;
    let mut vision = vec![Vec::new(); cfg.layers];
    let mut text = vec![Vec::new(); cfg.layers];
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &data.batch(chunk), true)?;
        for (l, v) in out.image.layer_states.iter().enumerate() {
            vision[l].extend_from_slice(tape.value(*v));
        }
        for (l, v) in out.text.layer_states.iter().enumerate() {
            text[l].extend_from_slice(tape.value(*v));
        }
    }
    let n = idx.len();
    let wrap = |layers: Vec<Vec<f64>>, width: usize| -> Result<Vec<Matrix>> {
        layers.into_iter().map(|v| Matrix::new(n, width, v)).collect()
    };
    Ok(ActivationDump {
        tag: tag.to_string(),
        ids: idx.iter().map(|&i| data.examples[i].id).collect(),
        vision: wrap(vision, cfg.vision_width)?,
        text: wrap(text, cfg.text_width)?,
    })
}

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::distill::entropy_gate;
use crate::encoder::DualEncoderModel;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;
use crate::trainkit::{predict_logits, ExampleRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatePoint {
    /// Largest teacher probability.
    pub confidence: f64,
    /// KD weight `1 − g`.
    pub weight: f64,
}

/// `(confidence, 1 − g)` for each teacher record, sorted by confidence.
pub fn gate_curve(teacher: &[ExampleRecord]) -> Result<Vec<GatePoint>> {
    let mut pts = teacher
        .iter()
        .map(|r| {
            let confidence = r.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(GatePoint {
                confidence,
                weight: 1.0 - entropy_gate(&r.probs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pts.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then(a.weight.total_cmp(&b.weight)));
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    /// Student errors per true class.
    pub errors: Vec<usize>,
    /// Per true class: student wrong where the teacher is right.
    pub student_only: Vec<usize>,
}

/// Class-wise errors of `student`, and those the teacher avoids. Records are matched by position and must agree on ids.
pub fn error_breakdown(student: &[ExampleRecord], teacher: &[ExampleRecord], classes: usize) -> Result<ErrorCounts> {
    if student.len() != teacher.len() {
        return Err(Error::invalid(format!("{} student vs {} teacher records", student.len(), teacher.len())));
    }
    let mut errors = vec![0; classes];
    let mut student_only = vec![0; classes];
    for (s, t) in student.iter().zip(teacher) {
        if s.id != t.id || s.label != t.label {
            return Err(Error::invalid(format!("record {} is not aligned with teacher record {}", s.id, t.id)));
        }
        if s.label >= classes {
            return Err(Error::invalid(format!("label {} outside {classes} classes", s.label)));
        }
        if s.pred != s.label {
            errors[s.label] += 1;
            if t.pred == t.label {
                student_only[s.label] += 1;
            }
        }
    }
    Ok(ErrorCounts { errors, student_only })
}

/// Quantile by linear interpolation between order statistics at position `(n − 1)·q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class: usize,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Quartiles of the predicted-class probability for each true class.
pub fn confidence_stats(records: &[ExampleRecord], classes: usize) -> Vec<ClassConfidence> {
    (0..classes)
        .map(|c| {
            let mut v: Vec<f64> = records.iter().filter(|r| r.label == c).map(|r| r.confidence).collect();
            v.sort_by(f64::total_cmp);
            let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
            ClassConfidence {
                class: c,
                count: v.len(),
                q1,
                median,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub logit0: f64,
    pub logit1: f64,
    pub label: usize,
    pub tag: String,
}

/// Two-class logits per example, for external plotting.
pub fn export_embeddings(model: &DualEncoderModel, data: &Dataset, idx: &[usize], tag: &str) -> Result<Vec<EmbeddingRecord>> {
    if model.config.classes != 2 {
        return Err(Error::invalid(format!("embedding export needs 2 classes, model has {}", model.config.classes)));
    }
    let logits = predict_logits(model, data, idx)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(k, &i)| EmbeddingRecord {
            id: data.examples[i].id,
            logit0: logits.row(k)[0],
            logit1: logits.row(k)[1],
            label: data.examples[i].label,
            tag: tag.to_string(),
        })
        .collect())
}

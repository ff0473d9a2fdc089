use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::distill::softmax_with_temperature;
use crate::encoder::DualEncoderModel;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

/// Examples per inference forward; bounds peak memory, does not affect results.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: u64,
    pub label: usize,
    pub teacher_pred: Option<usize>,
    pub pred: usize,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub records: Vec<ExampleRecord>,
}

/// Evaluation-mode logits for `idx`, `[idx.len(), classes]`.
pub fn predict_logits(model: &DualEncoderModel, data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    if idx.is_empty() {
        return Err(Error::invalid("cannot run inference on an empty index set"));
    }
    let mut values = Vec::with_capacity(idx.len() * model.config.classes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        values.extend(model.logits(&data.batch(chunk))?.into_values());
    }
    Tensor::new(&[idx.len(), model.config.classes], values)
}

/// Accuracy and unweighted mean of per-class F1, with 0/0 taken as 0.
pub fn accuracy_and_macro_f1(labels: &[usize], preds: &[usize], classes: usize) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    if labels.len() != preds.len() {
        return Err(Error::shape("macro_f1", format!("{} labels vs {} predictions", labels.len(), preds.len())));
    }
    if let Some(&c) = labels.iter().chain(preds).find(|&&c| c >= classes) {
        return Err(Error::invalid(format!("class {c} outside {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1: f64 = (0..classes)
        .map(|c| {
            let p = ratio(tp[c], tp[c] + fp[c]);
            let r = ratio(tp[c], tp[c] + fneg[c]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    let acc = tp.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok((acc, f1 / classes as f64))
}

/// Scores `model` on `idx`. `teacher_preds`, when given, is aligned with `idx`.
pub fn evaluate(
    model: &DualEncoderModel,
    data: &Dataset,
    idx: &[usize],
    teacher_preds: Option<&[usize]>,
) -> Result<Evaluation> {
    if let Some(t) = teacher_preds {
        if t.len() != idx.len() {
            return Err(Error::shape("evaluate", format!("{} teacher predictions for {} examples", t.len(), idx.len())));
        }
    }
    let logits = predict_logits(model, data, idx)?;
    let preds = logits.argmax_rows();
    let classes = model.config.classes;
    let labels: Vec<usize> = idx.iter().map(|&i| data.examples[i].label).collect();
    let (accuracy, macro_f1) = accuracy_and_macro_f1(&labels, &preds, classes)?;
    let records = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let p = softmax_with_temperature(logits.row(k), 1.0)?;
            Ok(ExampleRecord {
                id: data.examples[i].id,
                label: labels[k],
                teacher_pred: teacher_preds.map(|t| t[k]),
                pred: preds[k],
                confidence: p[preds[k]],
                probs: p,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        accuracy,
        macro_f1,
        records,
    })
}

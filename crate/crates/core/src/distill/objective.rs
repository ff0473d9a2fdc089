use super::{entropy, entropy_gate, softmax_with_temperature, GatePolicy, PROB_FLOOR};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Everything the student objective needs from the teacher for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSignal {
    pub classes: usize,
    pub temperature: f64,
    pub teacher_logits: Tensor,
    /// Temperature-1 probabilities, row-major `[B, C]`.
    pub probs: Vec<f64>,
    /// `softmax(z_T / T)`, row-major `[B, C]`.
    pub soft: Vec<f64>,
    /// `H(probs)` in nats.
    pub entropy: Vec<f64>,
    /// Per-example gate from `probs`.
    pub gate: Vec<f64>,
}

impl DistillSignal {
    pub fn new(teacher_logits: &Tensor, temperature: f64) -> Result<Self> {
        let [b, c] = *teacher_logits.shape() else {
            return Err(Error::shape(
                "distill_signal",
                format!("teacher logits {:?} are not 2-D", teacher_logits.shape()),
            ));
        };
        let mut probs = Vec::with_capacity(b * c);
        let mut soft = Vec::with_capacity(b * c);
        let mut ent = Vec::with_capacity(b);
        let mut gate = Vec::with_capacity(b);
        for i in 0..b {
            let p = softmax_with_temperature(teacher_logits.row(i), 1.0)?;
            ent.push(entropy(&p));
            gate.push(entropy_gate(&p)?);
            probs.extend_from_slice(&p);
            soft.extend(softmax_with_temperature(teacher_logits.row(i), temperature)?);
        }
        Ok(Self {
            classes: c,
            temperature,
            teacher_logits: teacher_logits.clone(),
            probs,
            soft,
            entropy: ent,
            gate,
        })
    }

    pub fn len(&self) -> usize {
        self.gate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gate.is_empty()
    }

    pub fn teacher_predictions(&self) -> Vec<usize> {
        self.teacher_logits.argmax_rows()
    }

    pub fn probs_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn soft_row(&self, i: usize) -> &[f64] {
        &self.soft[i * self.classes..(i + 1) * self.classes]
    }
}

/// Per-example diagnostics of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    /// Gate actually applied (the batch mean when that flag is set).
    pub g: f64,
    pub ce: f64,
    pub kd: f64,
    pub combined: f64,
    /// A student probability fell below the floor where the teacher's did not.
    pub clamped: bool,
}

pub struct Objective {
    /// Scalar batch mean of the per-example objective.
    pub loss: Var,
    pub records: Vec<DistillRecord>,
}

/// Builds the batch objective on `tape` for `student_logits: [B, C]`.
pub fn distill_objective(
    tape: &mut Tape,
    student_logits: Var,
    signal: &DistillSignal,
    labels: &[usize],
    policy: &GatePolicy,
) -> Result<Objective> {
    policy.validate()?;
    if policy.kd && policy.temperature != signal.temperature {
        return Err(Error::invalid(format!(
            "signal softened at T={} but policy asks for T={}",
            signal.temperature, policy.temperature
        )));
    }
    let shape = tape.shape(student_logits).to_vec();
    let (b, c) = (signal.len(), signal.classes);
    if shape != [b, c] {
        return Err(Error::shape(
            "distill_objective",
            format!("student logits {shape:?} vs teacher [{b}, {c}]"),
        ));
    }
    if labels.len() != b {
        return Err(Error::shape("distill_objective", format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let t = signal.temperature;

    let log_p = tape.log_softmax(student_logits)?;
    let nll = tape.pick(log_p, labels)?;
    let ce = tape.scale(nll, -1.0);

    // T²·(Σ y_T log y_T − Σ y_T log max(y_S, floor)); the first sum is a constant.
    let z_t = tape.scale(student_logits, 1.0 / t);
    let log_q = tape.log_softmax(z_t)?;
    let log_q = tape.clamp_min(log_q, PROB_FLOOR.ln());
    let soft = tape.constant_from(&[b, c], signal.soft.clone())?;
    let cross = tape.mul(soft, log_q)?;
    let cross = tape.row_sum(cross)?;
    let neg_entropy: Vec<f64> = (0..b).map(|i| -entropy(signal.soft_row(i)) * t * t).collect();
    let neg_entropy = tape.constant_from(&[b], neg_entropy)?;
    let scaled = tape.scale(cross, -t * t);
    let kd = tape.add(scaled, neg_entropy)?;

    let gates: Vec<f64> = if policy.batch_mean_gate {
        let m = signal.gate.iter().sum::<f64>() / b as f64;
        vec![m; b]
    } else {
        signal.gate.clone()
    };
    let preds = signal.teacher_predictions();
    let (w_ce, w_kd): (Vec<f64>, Vec<f64>) =
        (0..b).map(|i| policy.weights(gates[i], preds[i] == labels[i])).unzip();

    let wc = tape.constant_from(&[b], w_ce.clone())?;
    let weighted_ce = tape.mul(wc, ce)?;
    let wk = tape.constant_from(&[b], w_kd.clone())?;
    let weighted_kd = tape.mul(wk, kd)?;
    let per_example = tape.add(weighted_ce, weighted_kd)?;
    let loss = tape.mean(per_example);
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::Numerical("distillation objective is not finite".into()));
    }

    let log_q_values = tape.value(log_q);
    let records = (0..b)
        .map(|i| {
            let clamped = (0..c).any(|j| signal.soft_row(i)[j] > 0.0 && log_q_values[i * c + j] <= PROB_FLOOR.ln());
            DistillRecord {
                g: gates[i],
                ce: tape.value(ce)[i],
                kd: tape.value(kd)[i],
                combined: tape.value(per_example)[i],
                clamped,
            }
        })
        .collect();
    Ok(Objective { loss, records })
}

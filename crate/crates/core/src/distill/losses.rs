use super::{GatePolicy, PROB_FLOOR, SUM_TOL};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// `softmax(z / t)`, shifted by the row maximum.
pub fn softmax_with_temperature(z: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `−log softmax(z)[label]` per row of `logits: [B, C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let [b, c] = logits.shape() else {
        return Err(Error::shape("cross_entropy", format!("logits {:?} are not 2-D", logits.shape())));
    };
    if labels.len() != *b {
        return Err(Error::shape("cross_entropy", format!("{} labels for {b} rows", labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= *c {
                return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
            }
            let z = logits.row(i);
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - z[y])
        })
        .collect()
}

/// One example's KD value and whether the probability floor was hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdTerm {
    pub value: f64,
    pub clamped: bool,
}

/// `T²·Σ y_T(i)·log(y_T(i)/y_S(i))` on already-softened distributions.
pub fn kd_loss(teacher: &[f64], student: &[f64], t: f64) -> Result<KdTerm> {
    check_temperature(t)?;
    check_distribution(teacher, "teacher distribution")?;
    check_distribution(student, "student distribution")?;
    if teacher.len() != student.len() {
        return Err(Error::shape(
            "kd_loss",
            format!("{} teacher classes vs {} student classes", teacher.len(), student.len()),
        ));
    }
    let mut kl = 0.0;
    let mut clamped = false;
    for (&p, &q) in teacher.iter().zip(student) {
        if p == 0.0 {
            continue;
        }
        if q < PROB_FLOOR {
            clamped = true;
        }
        kl += p * (p.ln() - q.max(PROB_FLOOR).ln());
    }
    Ok(KdTerm {
        value: t * t * kl,
        clamped,
    })
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H(p) / log C`, clipped into `[0, 1]` against rounding.
pub fn entropy_gate(p: &[f64]) -> Result<f64> {
    check_distribution(p, "teacher distribution")?;
    if p.len() < 2 {
        return Err(Error::invalid("entropy gate needs at least two classes"));
    }
    Ok((entropy(p) / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

/// One example's objective under `policy`. `teacher_correct` is consulted only by the hard gate.
pub fn combined_loss(ce: f64, kd: f64, g: f64, teacher_correct: bool, policy: &GatePolicy) -> Result<f64> {
    policy.validate()?;
    if policy.kd && policy.mode == super::GateMode::Entropy && !(0.0..=1.0).contains(&g) {
        return Err(Error::invalid(format!("gate {g} outside [0, 1]")));
    }
    let (a, b) = policy.weights(g, teacher_correct);
    Ok(if b == 0.0 { a * ce } else { a * ce + b * kd })
}

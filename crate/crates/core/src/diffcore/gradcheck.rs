//! Central-difference validation of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

fn check_step(h: f64) -> Result<()> {
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-5, 1e-3]")));
    }
    Ok(())
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + DENOM_FLOOR)
}

/// Central difference refined by one Richardson step, `(4·D(h/2) − D(h)) / 3`.
/// The leading `h²` truncation term cancels, so a step large enough to keep
/// rounding noise small still resolves gradients many orders below the loss.
fn central<E>(mut eval: E, orig: f64, h: f64) -> Result<f64>
where
    E: FnMut(f64) -> Result<f64>,
{
    let d = |eval: &mut E, step: f64| -> Result<f64> { Ok((eval(orig + step)? - eval(orig - step)?) / (2.0 * step)) };
    let coarse = d(&mut eval, h)?;
    let fine = d(&mut eval, h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [s] => Ok(*s),
        other => Err(Error::shape("finite_difference_check", format!("f returned {} values", other.len()))),
    }
}

/// Max relative error between the tape gradient of `f` at `x` and a central difference.
///
/// `f` maps an input node to a scalar node on the same tape.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let y = f(&mut tape, xv)?;
    scalar(&tape, y)?;
    let ad = tape.gradients(y)?[0].clone().unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        scalar(&tape, y)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.values()[i];
        let fd = central(
            |v| {
                probe.values_mut()[i] = v;
                eval(&probe)
            },
            orig,
            h,
        )?;
        probe.values_mut()[i] = orig;
        worst = worst.max(rel_err(ad[i], fd));
    }
    Ok(worst)
}

/// Same check against every element of every trainable tensor in a parameter store.
pub fn finite_difference_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(finite_difference_pairs_params(store, f, h)?
        .iter()
        .map(|p| rel_err(p.analytic, p.numeric))
        .fold(0.0, f64::max))
}

/// One compared gradient entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Tape gradient and central difference for every trainable scalar, for
/// callers that need a criterion other than the pointwise relative error.
pub fn finite_difference_pairs_params<F>(store: &ParamStore, f: F, h: f64) -> Result<Vec<GradPair>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_step(h)?;
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let y = f(&mut tape, &work)?;
    scalar(&tape, y)?;
    tape.backward(y, &mut work)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let y = f(&mut tape, s)?;
        scalar(&tape, y)
    };
    let ids: Vec<_> = store.ids().collect();
    let mut pairs = Vec::new();
    let mut probe = store.clone();
    for id in ids {
        let t = work.get(id);
        if !t.is_trainable() {
            continue;
        }
        let ad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for (i, &analytic) in ad.iter().enumerate() {
            let orig = store.get(id).values()[i];
            let numeric = central(
                |v| {
                    probe.get_mut(id).values_mut()[i] = v;
                    eval(&probe)
                },
                orig,
                h,
            )?;
            probe.get_mut(id).values_mut()[i] = orig;
            pairs.push(GradPair {
                name: store.name(id).to_string(),
                index: i,
                analytic,
                numeric,
            });
        }
    }
    Ok(pairs)
}

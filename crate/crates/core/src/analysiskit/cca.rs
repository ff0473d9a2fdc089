use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ActivationDump;
use crate::encoder::BranchKind;
use crate::error::{Error, Result};

/// Default covariance ridge.
pub const RIDGE: f64 = 1e-6;

/// Row-major `rows × cols` matrix of pooled states, one row per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("matrix", format!("{} values for {rows}x{cols}", values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }
}

fn centered(m: &Matrix) -> DMatrix<f64> {
    let mut x = m.to_dmatrix();
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    x
}

fn inv_sqrt(s: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Canonical correlations of `x` and `y`, descending and clipped to `[0, 1]`.
pub fn canonical_correlations(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Vec<f64>> {
    if x.rows != y.rows {
        return Err(Error::shape("cca", format!("{} vs {} examples", x.rows, y.rows)));
    }
    if x.rows <= x.cols.max(y.cols) {
        return Err(Error::invalid(format!(
            "cca needs more examples ({}) than dimensions ({} and {})",
            x.rows, x.cols, y.cols
        )));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    let (xc, yc) = (centered(x), centered(y));
    let n = (x.rows - 1) as f64;
    let sxx = xc.transpose() * &xc / n + DMatrix::identity(x.cols, x.cols) * ridge;
    let syy = yc.transpose() * &yc / n + DMatrix::identity(y.cols, y.cols) * ridge;
    let sxy = xc.transpose() * &yc / n;
    let m = inv_sqrt(sxx) * sxy * inv_sqrt(syy);
    let mut sv: Vec<f64> = m.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(x.cols.min(y.cols));
    Ok(sv)
}

/// Mean canonical correlation over `min(d₁, d₂)` directions.
pub fn mean_cca(x: &Matrix, y: &Matrix, ridge: f64) -> Result<f64> {
    let c = canonical_correlations(x, y, ridge)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaRow {
    pub branch: BranchKind,
    /// 0-based.
    pub layer: usize,
    pub mean_cca: f64,
}

/// Layer-wise similarity of two aligned dumps, vision layers first.
pub fn cca_profile(a: &ActivationDump, b: &ActivationDump, ridge: f64) -> Result<Vec<CcaRow>> {
    if a.ids != b.ids {
        return Err(Error::invalid("activation dumps cover different examples"));
    }
    if a.vision.len() != b.vision.len() || a.text.len() != b.text.len() {
        return Err(Error::invalid(format!(
            "layer counts differ: {}/{} vs {}/{}",
            a.vision.len(),
            a.text.len(),
            b.vision.len(),
            b.text.len()
        )));
    }
    let mut rows = Vec::new();
    for (branch, xs, ys) in [(BranchKind::Vision, &a.vision, &b.vision), (BranchKind::Text, &a.text, &b.text)] {
        for (layer, (x, y)) in xs.iter().zip(ys).enumerate() {
            rows.push(CcaRow {
                branch,
                layer,
                mean_cca: mean_cca(x, y, ridge)?,
            });
        }
    }
    Ok(rows)
}

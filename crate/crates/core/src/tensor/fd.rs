use super::DenseMatrix;
use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Central-difference Jacobian `J[i][j] = (f(x + h·e_j)_i − f(x − h·e_j)_i) / 2h`.
///
/// Columns are evaluated independently, so the result does not depend on `exec`.
pub fn fd_jacobian<F>(f: F, x: &[f64], h: f64, exec: Exec) -> Result<DenseMatrix>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = f(x);
    let rows = base.len();
    let columns = exec.map(x.len(), |j| -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        if plus.len() != rows || minus.len() != rows {
            return Err(Error::ShapeMismatch("function output length changed".into()));
        }
        let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
        if col.iter().all(|v| v.is_finite()) {
            Ok(col)
        } else {
            Err(Error::NonFinite(format!("finite-difference column {j}")))
        }
    });
    let mut jac = DenseMatrix::zeros(rows, x.len());
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            jac[(i, j)] = v;
        }
    }
    Ok(jac)
}

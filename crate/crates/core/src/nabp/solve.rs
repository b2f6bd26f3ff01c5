use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{lu_factor, DenseMatrix, SparseMatrix};

/// Row access to the Jacobian of an affine layer map.
pub trait RowSource: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn row_into(&self, i: usize, out: &mut [f64]);

    fn row_vec(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.ncols()];
        self.row_into(i, &mut v);
        v
    }
}

impl RowSource for SparseMatrix {
    fn nrows(&self) -> usize {
        self.rows()
    }
    fn ncols(&self) -> usize {
        self.cols()
    }
    fn row_into(&self, i: usize, out: &mut [f64]) {
        self.row_dense_into(i, out)
    }
}

impl RowSource for DenseMatrix {
    fn nrows(&self) -> usize {
        self.rows()
    }
    fn ncols(&self) -> usize {
        self.cols()
    }
    fn row_into(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(i))
    }
}

/// Which system was solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    /// The first `p` rows formed a nonsingular square system.
    Square,
    /// Later rows replaced dependent ones to reach `p` independent rows.
    Substituted,
    /// Fewer than `p` independent rows exist; minimum-norm solution over them.
    MinimumNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub path: SolvePath,
    /// Output neurons whose equations were enforced, in flat order.
    pub rows_selected: Vec<usize>,
    /// `max |W_sel·x + b_sel − y_sel|`.
    pub residual: f64,
}

impl SolveDiagnostics {
    pub fn fallback(&self) -> bool {
        self.path == SolvePath::MinimumNorm
    }
}

/// Rows whose Gram–Schmidt residual falls below this fraction of their own
/// norm are treated as dependent.
const INDEPENDENCE_TOLERANCE: f64 = 1e-9;
const RIDGE: f64 = 1e-8;

/// Recovers `x` (length `p = rows.ncols()`) from `y = W·x + offset`.
///
/// Solves with the first `p` rows when they are nonsingular, otherwise with
/// the first `p` linearly independent rows in flat order. If the whole matrix
/// has rank below `p`, returns the minimum-norm `x` that satisfies a maximal
/// independent subset of the rows exactly.
pub fn invert_affine_square<R: RowSource + ?Sized>(
    rows: &R,
    offset: &[f64],
    y: &[f64],
    exec: Exec,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let q = rows.nrows();
    let p = rows.ncols();
    if offset.len() != q || y.len() != q {
        return Err(Error::ShapeMismatch(format!(
            "affine system has {q} rows but offset has {} and values {}",
            offset.len(),
            y.len()
        )));
    }
    let rhs_of = |sel: &[usize]| -> Vec<f64> { sel.iter().map(|&i| y[i] - offset[i]).collect() };

    if q >= p {
        let first: Vec<usize> = (0..p).collect();
        if let Some(x) = square_solve(rows, &first, &rhs_of(&first), exec)? {
            return finish(rows, offset, y, x, first, SolvePath::Square, exec);
        }
    }

    let selected = independent_rows(rows, p, exec);
    if selected.len() == p {
        if let Some(x) = square_solve(rows, &selected, &rhs_of(&selected), exec)? {
            return finish(rows, offset, y, x, selected, SolvePath::Substituted, exec);
        }
    }
    let x = minimum_norm_solve(rows, &selected, &rhs_of(&selected), exec)?;
    finish(rows, offset, y, x, selected, SolvePath::MinimumNorm, exec)
}

fn gather(rows: &(impl RowSource + ?Sized), sel: &[usize], exec: Exec) -> DenseMatrix {
    let p = rows.ncols();
    let data = exec.map(sel.len(), |k| rows.row_vec(sel[k])).concat();
    DenseMatrix::from_vec(sel.len(), p, data).expect("gathered rows")
}

fn square_solve(rows: &(impl RowSource + ?Sized), sel: &[usize], rhs: &[f64], exec: Exec) -> Result<Option<Vec<f64>>> {
    let w = gather(rows, sel, exec);
    let lu = lu_factor(&w, exec)?;
    if lu.is_singular() {
        return Ok(None);
    }
    Ok(Some(lu.solve(rhs)?))
}

/// `x = Wᵀ (W Wᵀ)⁻¹ rhs` over the selected rows, with a small ridge if the
/// Gram matrix is numerically singular.
fn minimum_norm_solve(rows: &(impl RowSource + ?Sized), sel: &[usize], rhs: &[f64], exec: Exec) -> Result<Vec<f64>> {
    let p = rows.ncols();
    if sel.is_empty() {
        return Ok(vec![0.0; p]);
    }
    let w = gather(rows, sel, exec);
    let mut gram = w.matmul(&w.transpose(), exec);
    let lu = lu_factor(&gram, exec)?;
    let z = if lu.is_singular() {
        let scale = (0..sel.len()).fold(0.0f64, |m, i| m.max(gram[(i, i)])).max(1.0);
        for i in 0..sel.len() {
            gram[(i, i)] += RIDGE * scale;
        }
        lu_factor(&gram, exec)?.solve(rhs).map_err(|_| Error::RankDeficient)?
    } else {
        lu.solve(rhs)?
    };
    let x = w.vjp(&z);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::RankDeficient)
    }
}

fn finish(
    rows: &(impl RowSource + ?Sized),
    offset: &[f64],
    y: &[f64],
    x: Vec<f64>,
    rows_selected: Vec<usize>,
    path: SolvePath,
    exec: Exec,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    let residual = exec
        .map(rows_selected.len(), |k| {
            let i = rows_selected[k];
            let r = rows.row_vec(i);
            let fx: f64 = r.iter().zip(&x).map(|(a, b)| a * b).sum();
            (fx + offset[i] - y[i]).abs()
        })
        .into_iter()
        .fold(0.0, f64::max);
    Ok((
        x,
        SolveDiagnostics {
            path,
            rows_selected,
            residual,
        },
    ))
}

/// Greedy scan in flat order keeping each row that is linearly independent of
/// those already kept (classical Gram–Schmidt, two passes), up to `limit`.
pub fn independent_rows<R: RowSource + ?Sized>(rows: &R, limit: usize, exec: Exec) -> Vec<usize> {
    let p = rows.ncols();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut r = vec![0.0; p];
    for i in 0..rows.nrows() {
        if kept.len() == limit {
            break;
        }
        rows.row_into(i, &mut r);
        let norm0 = norm(&r);
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            if basis.is_empty() {
                break;
            }
            let coeffs = exec.map(basis.len(), |k| dot(&basis[k], &r));
            let chunk = p.div_ceil(16).max(64);
            exec.for_each_chunk_mut(&mut r, chunk, |c, part| {
                let base = c * chunk;
                for (j, v) in part.iter_mut().enumerate() {
                    let s: f64 = basis.iter().zip(&coeffs).map(|(b, k)| k * b[base + j]).sum();
                    *v -= s;
                }
            });
        }
        let rest = norm(&r);
        if rest > INDEPENDENCE_TOLERANCE * norm0 {
            basis.push(r.iter().map(|v| v / rest).collect());
            kept.push(i);
        }
    }
    kept
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaled_identity_inverts_directly() {
        let mut w = DenseMatrix::identity(4);
        for i in 0..4 {
            w[(i, i)] = 2.0;
        }
        let (x, d) = invert_affine_square(&w, &[0.0; 4], &[2.0, 4.0, 6.0, 8.0], Exec::Sequential).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.path, SolvePath::Square);
        assert_eq!(d.rows_selected, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dependent_leading_rows_are_substituted() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (x, d) = invert_affine_square(&w, &[0.0, 0.0, 1.0], &[3.0, 3.0, 5.0], Exec::Sequential).unwrap();
        assert_eq!(d.path, SolvePath::Substituted);
        assert_eq!(d.rows_selected, vec![0, 2]);
        assert!((x[0] - 3.0).abs() < 1e-12 && (x[1] - 4.0).abs() < 1e-12);
        assert!(!d.fallback());
    }

    #[test]
    fn rank_deficient_falls_back_to_minimum_norm() {
        // Both rows constrain only x0 + x1.
        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let (x, d) = invert_affine_square(&w, &[0.0, 0.0], &[2.0, 4.0], Exec::Sequential).unwrap();
        assert!(d.fallback());
        assert_eq!(d.rows_selected, vec![0]);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_system_reproduces_selected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let w = DenseMatrix::from_rows(&rows).unwrap();
        let y = [0.3, -2.0, 1.5];
        let b = [0.1, 0.2, 0.3];
        let (x, d) = invert_affine_square(&w, &b, &y, Exec::Parallel).unwrap();
        assert!(d.fallback());
        assert!(d.residual < 1e-10, "{}", d.residual);
        let fx = w.matvec(&x, Exec::Sequential);
        for i in 0..3 {
            assert!((fx[i] + b[i] - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn random_invertible_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let rows: Vec<Vec<f64>> = (0..n + 5)
            .map(|i| {
                (0..n)
                    .map(|j| rng.gen_range(-1.0..1.0) + if i == j { 4.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let w = DenseMatrix::from_rows(&rows).unwrap();
        let b: Vec<f64> = (0..n + 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n + 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (x, d) = invert_affine_square(&w, &b, &y, Exec::Sequential).unwrap();
        assert_eq!(d.path, SolvePath::Square);
        let fx = w.matvec(&x, Exec::Sequential);
        for i in 0..n {
            assert!((fx[i] + b[i] - y[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sequential_and_parallel_selection_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                if i % 3 == 1 {
                    vec![0.0; 25]
                } else {
                    (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect()
                }
            })
            .collect();
        let w = DenseMatrix::from_rows(&rows).unwrap();
        let s = independent_rows(&w, 25, Exec::Sequential);
        let p = independent_rows(&w, 25, Exec::Parallel);
        assert_eq!(s, p);
        assert!(s.iter().all(|i| i % 3 != 1));
    }
}

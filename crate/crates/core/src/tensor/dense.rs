use crate::error::{Error, Result};
use crate::par::Exec;

/// A pivot is treated as zero when its magnitude is below this fraction of
/// the largest absolute entry of the factored matrix.
pub const PIVOT_RELATIVE_THRESHOLD: f64 = 1e-10;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}×{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged matrix rows".into()));
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64], exec: Exec) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length");
        exec.map(self.rows, |i| dot(self.row(i), x))
    }

    /// `vᵀ · self`, summing rows in increasing order for every column.
    pub fn vjp(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "vjp length");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix, exec: Exec) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let ot = other.transpose();
        let data = exec
            .map(self.rows, |i| {
                let r = self.row(i);
                (0..ot.rows).map(|j| dot(r, ot.row(j))).collect::<Vec<_>>()
            })
            .concat();
        DenseMatrix {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LU factorisation with partial pivoting, `P·A = L·U`.
///
/// `L` (unit lower) and `U` are packed into one matrix.
#[derive(Clone, Debug)]
pub struct LuFactors {
    permutation: Vec<usize>,
    packed: DenseMatrix,
    singular: Option<(usize, f64, f64)>,
}

impl LuFactors {
    /// `permutation[i]` is the row of `A` that ends up in row `i` of `P·A`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn is_singular(&self) -> bool {
        self.singular.is_some()
    }

    pub fn lower(&self) -> DenseMatrix {
        let n = self.packed.rows;
        let mut l = DenseMatrix::identity(n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = self.packed[(i, j)];
            }
        }
        l
    }

    pub fn upper(&self) -> DenseMatrix {
        let n = self.packed.rows;
        let mut u = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                u[(i, j)] = self.packed[(i, j)];
            }
        }
        u
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.packed.rows;
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "right-hand side has {} entries for a {n}×{n} system",
                b.len()
            )));
        }
        if let Some((column, pivot, threshold)) = self.singular {
            return Err(Error::SingularMatrix {
                column,
                pivot,
                threshold,
            });
        }
        let mut x: Vec<f64> = self.permutation.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.packed.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.packed.row(i);
            let s = dot(&row[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / row[i];
        }
        Ok(x)
    }
}

/// Factors a square matrix. A too-small pivot marks the factors singular
/// but elimination still runs to completion.
pub fn lu_factor(a: &DenseMatrix, exec: Exec) -> Result<LuFactors> {
    if a.rows != a.cols {
        return Err(Error::ShapeMismatch(format!(
            "LU needs a square matrix, got {}×{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let threshold = PIVOT_RELATIVE_THRESHOLD * a.max_abs();
    let mut m = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut singular = None;

    for k in 0..n {
        let (p, pivot_abs) =
            (k..n)
                .map(|i| (i, m[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if p != k {
            for j in 0..n {
                m.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        if !(pivot_abs > threshold) {
            if singular.is_none() {
                singular = Some((k, pivot_abs, threshold));
            }
            continue;
        }
        let pivot_row: Vec<f64> = m.row(k)[k..].to_vec();
        let below = &mut m.data[(k + 1) * n..];
        exec.for_each_chunk_mut(below, n, |_, row| {
            let factor = row[k] / pivot_row[0];
            row[k] = factor;
            if factor != 0.0 {
                for (r, &u) in row[k + 1..].iter_mut().zip(&pivot_row[1..]) {
                    *r -= factor * u;
                }
            }
        });
    }

    Ok(LuFactors {
        permutation: perm,
        packed: m,
        singular,
    })
}

/// Solves `a·x = b` by partially pivoted LU.
pub fn lu_solve(a: &DenseMatrix, b: &[f64], exec: Exec) -> Result<Vec<f64>> {
    lu_factor(a, exec)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_well_conditioned(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = rng.gen_range(-1.0..1.0);
            }
            a[(i, i)] += n as f64;
        }
        a
    }

    #[test]
    fn identity_and_diagonal() {
        let x = lu_solve(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0], Exec::Sequential).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(lu_solve(&a, &[6.0, 8.0], Exec::Sequential).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn random_twenty_by_twenty_recovers_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_well_conditioned(20, &mut rng);
        let xs: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b = a.matvec(&xs, Exec::Sequential);
        let x = lu_solve(&a, &b, Exec::Sequential).unwrap();
        for (got, want) in x.iter().zip(&xs) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn factors_reconstruct_permuted_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = DenseMatrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                a[(i, j)] = rng.gen_range(-1.0..1.0);
            }
        }
        let lu = lu_factor(&a, Exec::Sequential).unwrap();
        assert!(!lu.is_singular());
        let prod = lu.lower().matmul(&lu.upper(), Exec::Sequential);
        for i in 0..6 {
            for j in 0..6 {
                let pa = a[(lu.permutation()[i], j)];
                assert!((prod[(i, j)] - pa).abs() <= 1e-10 * a.max_abs());
            }
        }
    }

    #[test]
    fn singular_matrix_reported() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            lu_solve(&a, &[1.0, 1.0], Exec::Sequential),
            Err(Error::SingularMatrix { .. })
        ));
        let z = DenseMatrix::zeros(3, 3);
        assert!(lu_factor(&z, Exec::Sequential).unwrap().is_singular());
    }

    #[test]
    fn parallel_elimination_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_well_conditioned(64, &mut rng);
        let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = lu_solve(&a, &b, Exec::Sequential).unwrap();
        let p = lu_solve(&a, &b, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }

    proptest::proptest! {
        #[test]
        fn residual_bounded(seed in 0u64..500, n in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_well_conditioned(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let x = lu_solve(&a, &b, Exec::Sequential).unwrap();
            let r = a.matvec(&x, Exec::Sequential);
            let bmax = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (ri, bi) in r.iter().zip(&b) {
                proptest::prop_assert!((ri - bi).abs() <= 1e-8 * (1.0 + bmax));
            }
        }
    }
}

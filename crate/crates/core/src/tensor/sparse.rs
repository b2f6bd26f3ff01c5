use super::dense::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Compressed sparse row matrix. Entries within a row are sorted by column
/// and unique, so iteration yields triplets in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists that are already sorted.
    pub fn from_sorted_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (r, row) in rows.iter().enumerate() {
            for (k, &(c, v)) in row.iter().enumerate() {
                if c >= cols {
                    return Err(Error::ShapeMismatch(format!("entry ({r}, {c}) outside {cols} columns")));
                }
                if k > 0 && row[k - 1].0 >= c {
                    return Err(Error::ShapeMismatch(format!(
                        "row {r} columns are not strictly increasing"
                    )));
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from unordered triplets; duplicates are rejected.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for (r, c, v) in entries {
            if r >= rows {
                return Err(Error::ShapeMismatch(format!("entry row {r} outside {rows} rows")));
            }
            if per_row[r].last().is_some_and(|&(pc, _)| pc == c) {
                return Err(Error::ShapeMismatch(format!("duplicate entry ({r}, {c})")));
            }
            per_row[r].push((c, v));
        }
        SparseMatrix::from_sorted_rows(cols, per_row)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn row_dense_into(&self, r: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (cols, vals) = self.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            out[c] = v;
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.cols];
        for (r, c, v) in self.entries() {
            per_row[c].push((r, v));
        }
        SparseMatrix::from_sorted_rows(self.rows, per_row).expect("transpose preserves ordering")
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64], exec: Exec) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length");
        exec.map(self.rows, |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
        })
    }

    /// `vᵀ · self`. Each output column sums its rows in increasing order.
    pub fn vjp(&self, v: &[f64], exec: Exec) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "vjp length");
        let t = self.transpose();
        exec.map(t.rows, |c| {
            let (rows, vals) = t.row(c);
            let picked: Vec<f64> = rows.iter().map(|&r| v[r]).collect();
            dot(vals, &picked)
        })
    }
}

//! Row-compressed sparse helpers on top of `nalgebra-sparse`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

pub type Csr = CsrMatrix<f64>;

/// Extracts `A(rows, cols)`. Index lists must be sorted ascending so that
/// column indices of the result stay sorted.
pub fn submatrix(a: &Csr, rows: &[usize], cols: &[usize]) -> Csr {
    let mut col_map = vec![usize::MAX; a.ncols()];
    for (j, &c) in cols.iter().enumerate() {
        col_map[c] = j;
    }
    let mut offsets = Vec::with_capacity(rows.len() + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    offsets.push(0);
    for &r in rows {
        let row = a.row(r);
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            let j = col_map[c];
            if j != usize::MAX {
                indices.push(j);
                values.push(v);
            }
        }
        offsets.push(indices.len());
    }
    Csr::try_from_csr_data(rows.len(), cols.len(), offsets, indices, values)
        .expect("sorted index sets give a valid CSR pattern")
}

pub fn spmv(a: &Csr, x: &[f64]) -> DVector<f64> {
    assert_eq!(a.ncols(), x.len(), "spmv dimension mismatch");
    DVector::from_iterator(
        a.nrows(),
        a.row_iter()
            .map(|row| row.col_indices().iter().zip(row.values()).map(|(&c, &v)| v * x[c]).sum()),
    )
}

/// `A * X` for a dense right-hand side block.
pub fn spmm(a: &Csr, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), x.nrows(), "spmm dimension mismatch");
    let mut out = DMatrix::zeros(a.nrows(), x.ncols());
    for (i, row) in a.row_iter().enumerate() {
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            for k in 0..x.ncols() {
                out[(i, k)] += v * x[(c, k)];
            }
        }
    }
    out
}

/// `sum_k c_k A_k` for matrices sharing one sparsity pattern.
pub fn combine(terms: &[(f64, &Csr)]) -> Csr {
    let (_, first) = terms[0];
    let mut values = vec![0.0; first.nnz()];
    for (c, m) in terms {
        assert!(
            m.row_offsets() == first.row_offsets() && m.col_indices() == first.col_indices(),
            "combined matrices must share a pattern"
        );
        for (acc, v) in values.iter_mut().zip(m.values()) {
            *acc += c * v;
        }
    }
    Csr::try_from_pattern_and_values(first.pattern().clone(), values).expect("pattern reused")
}

pub fn to_dense(a: &Csr) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

/// Largest entry of `|A - A^T|` relative to the largest entry of `|A|`.
pub fn asymmetry(a: &Csr) -> f64 {
    let scale = a.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (i, j, v) in a.triplet_iter() {
        let t = a.get_entry(j, i).map(|e| e.into_value()).unwrap_or(0.0);
        worst = worst.max((v - t).abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

/// Sparse Cholesky factorization of a symmetric positive-definite matrix.
pub struct SpdSolver {
    chol: CscCholesky<f64>,
    n: usize,
}

impl SpdSolver {
    pub fn factor(a: &Csr) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
        }
        // A symmetric CSR matrix is its own CSC transpose.
        let (offsets, indices, values) = a.csr_data();
        let csc = CscMatrix::try_from_csc_data(
            a.nrows(),
            a.ncols(),
            offsets.to_vec(),
            indices.to_vec(),
            values.to_vec(),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let chol = CscCholesky::factor(&csc).map_err(|e| Error::Singular(format!("{e}")))?;
        Ok(SpdSolver { chol, n: a.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length mismatch");
        let mut x = DMatrix::from_column_slice(self.n, 1, b.as_slice());
        self.chol.solve_mut(&mut x);
        DVector::from_column_slice(x.as_slice())
    }
}

/// Writes a coordinate-format Matrix Market file.
pub fn write_matrix_market<W: Write>(a: &Csr, mut w: W) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
    for (i, j, v) in a.triplet_iter() {
        writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra_sparse::CooMatrix;

    fn tridiag(n: usize) -> Csr {
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(i, i, 2.0);
            if i > 0 {
                coo.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                coo.push(i, i + 1, -1.0);
            }
        }
        Csr::from(&coo)
    }

    #[test]
    fn submatrix_slices_rows_and_columns() {
        let a = tridiag(5);
        let s = submatrix(&a, &[1, 2, 3], &[0, 2, 4]);
        let d = to_dense(&s);
        assert_eq!(d, DMatrix::from_row_slice(3, 3, &[-1.0, -1.0, 0.0, 0.0, 2.0, 0.0, 0.0, -1.0, -1.0]));
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = tridiag(6);
        let x_true = DVector::from_fn(6, |i, _| (i as f64).sin());
        let b = spmv(&a, x_true.as_slice());
        let x = SpdSolver::factor(&a).unwrap().solve(&b);
        assert!((x - x_true).amax() < 1e-13);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = combine(&[(-1.0, &tridiag(4))]);
        assert!(SpdSolver::factor(&a).is_err());
    }

    #[test]
    fn matrix_market_header() {
        let mut buf = Vec::new();
        write_matrix_market(&tridiag(3), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general\n3 3 7\n"));
    }
}

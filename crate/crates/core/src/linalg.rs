//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Column-major design matrix with named columns.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_rows: usize,
    pub names: Vec<String>,
    /// `data[j * n_rows + i]` is row `i`, column `j`.
    pub data: Vec<f64>,
}

impl Design {
    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn row_dot(&self, i: usize, beta: &[f64]) -> f64 {
        beta.iter().enumerate().map(|(j, b)| b * self.data[j * self.n_rows + i]).sum()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n_rows, self.n_cols(), &self.data)
    }

    /// Restricts to the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Design {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols());
        for j in 0..self.n_cols() {
            let c = self.col(j);
            data.extend(rows.iter().map(|&i| c[i]));
        }
        Design { n_rows: rows.len(), names: self.names.clone(), data }
    }
}

/// Indices of columns that are (numerically) linear combinations of earlier
/// columns, found by modified Gram-Schmidt.
pub fn dependent_columns(design: &Design) -> Vec<usize> {
    let n = design.n_rows;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..design.n_cols() {
        let mut v = design.col(j).to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in &basis {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0.max(1.0) * (n as f64).sqrt().max(1.0) {
            dependent.push(j);
        } else {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    dependent
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.cholesky().map(|c| c.solve(b))
}

//! Minimal dense matrix helpers for the small systems this crate solves
//! (class counts and per-stratum covariance blocks are tiny).

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub m: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize, m: usize) -> Self {
        Matrix {
            n,
            m,
            data: vec![0.0; n * m],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = 1.0;
        }
        out
    }

    #[cfg(test)]
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut out = Matrix::zeros(n, m);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), m, "ragged matrix rows");
            for (j, &v) in row.iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.m).map(|j| self[(i, j)]).collect())
            .collect()
    }

    /// Quadratic form `v' A v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert_eq!(self.n, self.m);
        assert_eq!(v.len(), self.n);
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.m {
                acc += v[i] * self[(i, j)] * v[j];
            }
        }
        acc
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.m);
        (0..self.n)
            .map(|i| (0..self.m).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    /// Force exact symmetry by averaging with the transpose.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.n, self.m);
        for i in 0..self.n {
            for j in (i + 1)..self.m {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Invert by Gauss-Jordan elimination with partial pivoting. Returns the
    /// inverse together with the effective rank; `None` entries mean a pivot
    /// fell below `tol` relative to the largest pivot encountered, in which
    /// case the matrix is treated as rank deficient and no inverse exists.
    pub fn invert(&self, rel_tol: f64) -> Result<Matrix, usize> {
        assert_eq!(self.n, self.m, "inverse of a non-square matrix");
        let n = self.n;
        let mut a = self.clone();
        let mut inv = Matrix::identity(n);
        let mut max_pivot: f64 = 0.0;
        for col in 0..n {
            // pick the largest remaining pivot in this column
            let mut pivot_row = col;
            let mut pivot_val = a[(col, col)].abs();
            for r in (col + 1)..n {
                if a[(r, col)].abs() > pivot_val {
                    pivot_val = a[(r, col)].abs();
                    pivot_row = r;
                }
            }
            max_pivot = max_pivot.max(pivot_val);
            if pivot_val <= rel_tol * max_pivot || pivot_val == 0.0 {
                return Err(col);
            }
            if pivot_row != col {
                a.swap_rows(col, pivot_row);
                inv.swap_rows(col, pivot_row);
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor != 0.0 {
                    for j in 0..n {
                        let ac = a[(col, j)];
                        let ic = inv[(col, j)];
                        a[(r, j)] -= factor * ac;
                        inv[(r, j)] -= factor * ic;
                    }
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..self.m {
            self.data.swap(a * self.m + j, b * self.m + j);
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.m + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.m + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_identity() {
        let inv = Matrix::identity(3).invert(1e-12).unwrap();
        assert_eq!(inv, Matrix::identity(3));
    }

    #[test]
    fn inverse_round_trip() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let inv = a.invert(1e-12).unwrap();
        // a * inv = I
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += a[(i, k)] * inv[(k, j)];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_matrix_is_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(a.invert(1e-9).is_err());
    }

    #[test]
    fn quad_form_matches_manual() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let v = [1.0, -2.0];
        // 2*1 + 1*(-2)*2 + 3*4 = 2 - 4 + 12 = 10
        assert!((a.quad_form(&v) - 10.0).abs() < 1e-14);
    }
}

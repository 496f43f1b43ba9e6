//! Minimal dense matrix/vector helpers.
//!
//! The models here are small enough that plain row-major `Vec<f64>`
//! storage with explicit loops is simpler and easier to audit than an
//! external linear-algebra stack.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// y = Aᵀ x  (x has length rows, result has length cols).
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (yc, &a) in y.iter_mut().zip(row) {
                *yc += a * xr;
            }
        }
        y
    }

    /// y = A x  (x has length cols, result has length rows).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Clips each row to Euclidean norm at most `cap`.
    pub fn clip_rows(&mut self, cap: f64) {
        for r in 0..self.rows {
            let row = self.row_mut(r);
            let n = norm(row);
            if n > cap {
                let s = cap / n;
                for v in row {
                    *v *= s;
                }
            }
        }
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows)
            .map(|r| norm(self.row(r)))
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Numerically stable softmax over a slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Log-softmax over a slice.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

/// Largest singular value of a matrix, by power iteration on AᵀA.
pub fn spectral_norm(a: &Mat, iters: usize) -> f64 {
    let mut v = vec![1.0 / (a.cols as f64).sqrt(); a.cols];
    let mut sigma = 0.0;
    for _ in 0..iters {
        let av = a.mul_vec(&v);
        let atav = a.tr_mul_vec(&av);
        let n = norm(&atav);
        if n == 0.0 {
            return 0.0;
        }
        for (vi, &wi) in v.iter_mut().zip(&atav) {
            *vi = wi / n;
        }
        sigma = norm(&a.mul_vec(&v));
    }
    sigma
}

/// Solves the square system A x = b by Gaussian elimination with
/// partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> crate::Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(crate::LabError::Usage("solve needs a square system".into()));
    }
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row = a.row(r).to_vec();
            row.push(b[r]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col].abs() < 1e-12 {
            return Err(crate::LabError::Usage("singular system".into()));
        }
        m.swap(col, pivot);
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = m[r][n];
        for c in (r + 1)..n {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.3, -1.2, 4.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tr_mul_matches_mul_of_transpose() {
        let a = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let y = a.tr_mul_vec(&[1.0, -1.0]);
        assert_eq!(y, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn clip_rows_caps_norms() {
        let mut a = Mat {
            rows: 2,
            cols: 2,
            data: vec![3.0, 4.0, 0.1, 0.0],
        };
        a.clip_rows(1.0);
        assert!((norm(a.row(0)) - 1.0).abs() < 1e-12);
        assert!((a.get(1, 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let mut a = Mat::zeros(3, 3);
        a.set(0, 0, 0.5);
        a.set(1, 1, 2.0);
        a.set(2, 2, -1.0);
        let s = spectral_norm(&a, 200);
        assert!((s - 2.0).abs() < 1e-9, "{s}");
    }
}

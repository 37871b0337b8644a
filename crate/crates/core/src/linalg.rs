//! Small dense linear algebra used by the retrieval projection, LoRA factors,
//! and the toy backend. Row-major `f64` throughout; operation order is fixed
//! so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::seed::SeedRng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeedRng) -> Self {
        let mut data = vec![0.0; rows * cols];
        for v in &mut data {
            *v = rng.next_gaussian() * std;
        }
        Self { rows, cols, data }
    }

    /// Rows form an orthonormal set (Gram-Schmidt on a seeded gaussian
    /// matrix). Requires `rows <= cols`.
    pub fn orthonormal_rows(rows: usize, cols: usize, rng: &mut SeedRng) -> Self {
        assert!(rows <= cols, "orthonormal_rows requires rows <= cols");
        let mut m = Self::gaussian(rows, cols, 1.0, rng);
        for i in 0..rows {
            for j in 0..i {
                let proj = dot(m.row(i), m.row(j));
                let (head, tail) = m.data.split_at_mut(i * cols);
                let row_j = &head[j * cols..(j + 1) * cols];
                let row_i = &mut tail[..cols];
                for (a, b) in row_i.iter_mut().zip(row_j) {
                    *a -= proj * b;
                }
            }
            let n = norm(m.row(i));
            assert!(n > 1e-12, "degenerate gaussian draw during orthonormalization");
            let inv = 1.0 / n;
            for v in &mut m.data[i * cols..(i + 1) * cols] {
                *v *= inv;
            }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self (m×k) * other (k×n)`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-normalize; `None` when the norm is numerically zero.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n <= 1e-12 {
        return None;
    }
    let inv = 1.0 / n;
    Some(a.iter().map(|v| v * inv).collect())
}

/// Elementwise `(1 - t) * a + t * b`.
pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matvec_is_identity() {
        let m = Matrix::identity(4);
        let x = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(m.matvec(&x), x);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let mut rng = SeedRng::new(9);
        let m = Matrix::orthonormal_rows(8, 32, &mut rng);
        for i in 0..8 {
            for j in 0..=i {
                let d = dot(m.row(i), m.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10, "rows {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn normalized_rejects_zero() {
        assert!(normalized(&[0.0, 0.0]).is_none());
        let v = normalized(&[3.0, 4.0]).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-15);
    }
}

//! Dense row-major `f64` matrices and the handful of kernels the codec needs.
//!
//! Every kernel computes each output row from the corresponding input row
//! alone, in a fixed order, so a session produces bit-identical numbers
//! whether it is evaluated alone or inside a batch.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self::from_vec(rows, 1, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a * w` for `a: n x k`, `w: k x m`.
pub fn matmul(a: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(a.cols, w.rows, "matmul inner dimension");
    let (n, k, m) = (a.rows, a.cols, w.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy(orow, aik, &w.data[kk * m..(kk + 1) * m]);
            }
        }
    }
    out
}

/// `g * w^T` for `g: n x m`, `w: k x m`.
pub fn matmul_bt(g: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(g.cols, w.cols, "matmul_bt inner dimension");
    let (n, m, k) = (g.rows, g.cols, w.rows);
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for kk in 0..k {
            out.data[i * k + kk] = dot(grow, &w.data[kk * m..(kk + 1) * m]);
        }
    }
    out
}

/// `a^T * g` for `a: n x k`, `g: n x m`.
pub fn matmul_at(a: &Matrix, g: &Matrix) -> Matrix {
    assert_eq!(a.rows, g.rows, "matmul_at outer dimension");
    let (n, k, m) = (a.rows, a.cols, g.cols);
    let mut out = Matrix::zeros(k, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let grow = &g.data[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy(&mut out.data[kk * m..(kk + 1) * m], aik, grow);
            }
        }
    }
    out
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Batches are stored one sample per row; layer weights are stored
/// `input_dim x output_dim` so a forward pass is `batch * weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Tensor2D::from_vec", rows * cols, data.len()));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor2D::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2D {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2D::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width tensor has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut t = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor2D) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self * rhs`
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(Error::dim("matmul", self.cols, rhs.rows));
        }
        let mut out = Tensor2D::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            &self.data,
            (self.cols, 1),
            &rhs.data,
            (rhs.cols, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self^T * rhs`
    pub fn matmul_tn(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != rhs.rows {
            return Err(Error::dim("matmul_tn", self.rows, rhs.rows));
        }
        let mut out = Tensor2D::zeros(self.cols, rhs.cols);
        gemm(
            self.cols,
            self.rows,
            rhs.cols,
            &self.data,
            (1, self.cols),
            &rhs.data,
            (rhs.cols, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self * rhs^T`
    pub fn matmul_nt(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.cols {
            return Err(Error::dim("matmul_nt", self.cols, rhs.cols));
        }
        let mut out = Tensor2D::zeros(self.rows, rhs.rows);
        gemm(
            self.rows,
            self.cols,
            rhs.rows,
            &self.data,
            (self.cols, 1),
            &rhs.data,
            (1, rhs.cols),
            &mut out.data,
        );
        Ok(out)
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.iter_rows()
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T * v`
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.iter_rows().zip(v) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the row-major output `c` (m x n); all three are sized by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn products_agree_with_triple_loop() {
        let a = Tensor2D::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let b = Tensor2D::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        let expect = naive(&a, &b);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let got_tn = a.transpose().matmul_tn(&b).unwrap();
        assert_eq!(got_tn.shape(), (3, 2));
        for (x, y) in got_tn.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let got_nt = a.matmul_nt(&b.transpose()).unwrap();
        for (x, y) in got_nt.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor2D::from_vec(2, 2, vec![1.0; 3]).is_err());
        let a = Tensor2D::zeros(2, 3);
        assert!(a.matmul(&Tensor2D::zeros(2, 3)).is_err());
    }
}

use serde::Serialize;

use super::KernelError;
use crate::num::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor2<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor2<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self, KernelError> {
        Self::from_vec(rows, cols, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(x: S) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: S) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
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

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: S) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, KernelError> {
        if self.cols != other.rows {
            return Err(KernelError::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self @ other^T`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self, KernelError> {
        if self.cols != other.cols {
            return Err(KernelError::shape("matmul_t", self.shape(), other.shape()));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(other.row(j))
                .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
        }))
    }

    /// `self^T @ other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self, KernelError> {
        if self.rows != other.rows {
            return Err(KernelError::shape("t_matmul", self.shape(), other.shape()));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b * b)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor2<T> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor2::<f64>::from_fn(3, 2, |r, c| (r * 2 + c) as f64 - 1.5);
        let b = Tensor2::<f64>::from_fn(2, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 0.5));
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, a.matmul_t(&b.transpose()).unwrap());
        assert_eq!(ab, a.transpose().t_matmul(&b).unwrap());
        assert_eq!(ab.get(2, 3), a.get(2, 0) * b.get(0, 3) + a.get(2, 1) * b.get(1, 3));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor2::<f64>::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
        assert!(Tensor2::<f64>::from_vec(2, 2, vec![1.0]).is_err());
    }
}

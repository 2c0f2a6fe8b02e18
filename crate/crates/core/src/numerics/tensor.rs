use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major array of `f64`.
///
/// Every tensor has at least one axis and no zero-length axes; scalars are
/// stored as `[1, 1]` so that every graph value is a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidTensor(format!(
                "entry {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a matrix, panicking on an inconsistent length. Intended for
    /// literals and internally computed buffers whose size is known.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} given {} values", data.len());
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self { shape: vec![rows, cols], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::InvalidTensor("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self::matrix(rows, cols, vec![v; rows * cols])
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (or the leading extent of any tensor).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extents collapsed into one.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidTensor(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// `out += a · b` for row-major `a` (m×k), `b` (k×n), `out` (m×n).
///
/// Each output entry accumulates over `k` in ascending order, so a row's
/// result does not depend on how many other rows are in the batch.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a` (m×n), `b` (k×n), `out` (m×k).
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out += aᵀ · b` for `a` (m×k), `b` (m×n), `out` (k×n).
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn transposed_products_agree_with_plain_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut ab = [0.0; 4];
        gemm_acc(&a, &b, &mut ab, 2, 3, 2);
        assert_eq!(ab, [-1.0, 7.5, -1.0, 18.0]);

        // bt is b transposed (2x3); a · (bt)ᵀ == a · b
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        let mut ab2 = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut ab2, 2, 3, 2);
        assert_eq!(ab, ab2);

        // at is a transposed (3x2); (at)ᵀ · b == a · b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut ab3 = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut ab3, 3, 2, 2);
        assert_eq!(ab, ab3);
    }
}

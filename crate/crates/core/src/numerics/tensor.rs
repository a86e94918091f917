//! Dense row-major 2-D tensors and the three matmul kernels the tape needs.

use crate::error::{AptError, Result};
use num_traits::Float;

/// Element type for the engine: f32 in production, f64 for gradient checks.
pub trait Scalar:
    Float + num_traits::FromPrimitive + std::fmt::Debug + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 convertible to scalar")
    }

    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn to_f64c(self) -> f64 {
        self
    }
}

/// Row-major matrix. Row vectors are [1 x c], per-row scalars [r x 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![E::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AptError::invariant(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn full(rows: usize, cols: usize, v: E) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> E {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: E) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[E] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Convert element type (f32 <-> f64). Widening is exact.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| F::from_f64c(v.to_f64c())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}

/// out += a [m x k] * b [k x n]. i-k-j loop order keeps the inner loop
/// contiguous in both b and out.
pub(crate) fn mm_nn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// out += a [m x k] * b^T where b is [n x k]; a contiguous dot per cell.
pub(crate) fn mm_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            orow[j] = orow[j] + acc;
        }
    }
}

/// out += a^T * b where a is [k x m], b is [k x n]; axpy rows keep the inner
/// loop contiguous.
pub(crate) fn mm_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    let (k, m) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), (m, n));
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate().take(m) {
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] = orow[j] + api * brow[j];
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Exec};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(1, 1, v)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
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

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `start..start + len` as a new tensor.
    pub fn cols_slice(&self, start: usize, len: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Tensor {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_with(other, Exec::default())
    }

    pub fn matmul_with(&self, other: &Tensor, exec: Exec) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            exec,
            Operand::plain(self),
            Operand::plain(other),
            &mut out.data,
            false,
        );
        Ok(out)
    }
}

/// Row block size for the chunked product. Fixed so the floating-point
/// evaluation order never depends on the number of workers.
const ROW_BLOCK: usize = 64;

/// A matrix view described by its logical shape and strides.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> Operand<'a> {
    pub(crate) fn plain(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rows: t.rows,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn transposed(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rows: t.cols,
            cols: t.rows,
            rs: 1,
            cs: t.cols as isize,
        }
    }
}

/// `c (+)= a · b` with `c` row-major and contiguous, split into row blocks.
pub(crate) fn gemm(exec: Exec, a: Operand<'_>, b: Operand<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    exec.for_each_chunk_mut(c, ROW_BLOCK * n, |start, block| {
        let r0 = start / n;
        let rows = block.len() / n;
        // SAFETY: the operand slices cover every element addressed through
        // the given shapes and strides, and `block` is exactly rows x n.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(r0 as isize * a.rs),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

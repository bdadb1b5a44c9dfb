use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar type usable by the differentiable primitives.
///
/// Model math runs in `f32`; finite-difference oracles instantiate the same
/// code at `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(last < len, "gemm operand too short: need {} have {}", last + 1, len);
}

macro_rules! impl_float {
    ($ty:ty) => {
        impl Float for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let v = &mut c[i * c_strides.0 + j * c_strides.1];
                            *v = if beta == 0.0 { 0.0 } else { beta * *v };
                        }
                    }
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above. The
                // crate computes `dst = alpha' * dst + beta' * lhs * rhs`.
                unsafe {
                    gemm::gemm(
                        m,
                        n,
                        k,
                        c.as_mut_ptr(),
                        c_strides.1 as isize,
                        c_strides.0 as isize,
                        beta != 0.0,
                        a.as_ptr(),
                        a_strides.1 as isize,
                        a_strides.0 as isize,
                        b.as_ptr(),
                        b_strides.1 as isize,
                        b_strides.0 as isize,
                        beta,
                        alpha,
                        false,
                        false,
                        false,
                        gemm::Parallelism::None,
                    );
                }
            }
        }
    };
}

impl_float!(f32);
impl_float!(f64);

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let shown: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, " {shown:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 3]).numel(), 6);
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 1.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}

//! Dense row-major tensors.
//!
//! Activations use `[H, W, C]` layout, convolution kernels `[Kh, Kw, Cin, Cout]`,
//! fully connected weights `[out, in]`, and batched ROI features `[R, h, w, C]`.

use crate::error::{Result, TdmError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scalar type of every tensor. 64-bit by default; the `f32` feature selects
/// 32-bit reals for training builds.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// True when tensors hold 64-bit reals (required by gradient checks).
pub const IS_F64: bool = std::mem::size_of::<Real>() == 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TdmError::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: Real, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let u: f64 = rng.gen::<f64>();
            ((2.0 * u - 1.0) as Real) * bound
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
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

    /// Size of the trailing (channel) axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// `(H, W, C)` of a rank-3 activation.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(TdmError::shape("hwc", format!("expected rank 3, got {:?}", s))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TdmError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> Real {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn fill(&mut self, value: Real) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

/// `c = a * b + beta * c` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    rsa: usize,
    csa: usize,
    b: &[Real],
    rsb: usize,
    csb: usize,
    beta: Real,
    c: &mut [Real],
    n_c: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= (m - 1) * n_c + n);
    // SAFETY: the bounds asserted above hold for every caller in this crate;
    // all pointers come from live slices that do not alias `c`.
    unsafe {
        #[cfg(not(feature = "f32"))]
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
            beta,
            c.as_mut_ptr(),
            n_c as isize,
            1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
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
            beta,
            c.as_mut_ptr(),
            n_c as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transposed a: a^T * b = [1 3; 2 4] * b = [26 30; 38 44]
        gemm(2, 2, 2, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}

//! A small deterministic neural-network engine: NCHW tensors, the layers the
//! estimator needs, MSE/BCE losses, SGD and Adam, and finite-difference gradient
//! checks. Everything is generic over [`Scalar`] so verification runs in
//! `f64` while training may use `f32`.

mod checkpoint;
mod gradcheck;
mod kernels;
mod layers;
mod loss;
mod model;
mod optim;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LossKind, TensorCheck};
pub use kernels::{conv2d_output_size, conv_transpose2d_output_size};
pub use layers::{
    dropout, BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Dropout, Layer, LayerSpec, Param,
    BN_EPSILON, BN_MOMENTUM,
};
pub use loss::{bce_loss, mse_loss, BCE_CLAMP};
pub use model::{sgd_step, Sequential};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the engine.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// "f32" or "f64", recorded in result files.
    const NAME: &'static str;
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← A·B + beta·C` for row-major A (m×k), B (k×n), C (m×n) with
    /// explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (usize, usize), b: &[Self], b_strides: (usize, usize), beta: Self, c: &mut [Self], c_row: usize);
}

fn check_gemm(m: usize, k: usize, n: usize, a: (usize, (usize, usize)), b: (usize, (usize, usize)), c: (usize, usize)) {
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 { 0 } else { (rows - 1) * rs + (cols - 1) * cs + 1 }
    };
    assert!(span(m, k, a.1) <= a.0 && span(k, n, b.1) <= b.0 && span(m, n, (c.1, 1)) <= c.0, "gemm operand out of bounds");
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (usize, usize), b: &[Self], (rsb, csb): (usize, usize), beta: Self, c: &mut [Self], c_row: usize) {
        check_gemm(m, k, n, (a.len(), (rsa, csa)), (b.len(), (rsb, csb)), (c.len(), c_row));
        // SAFETY: every operand's strided extent was checked against its slice.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize,
                csb as isize, beta, c.as_mut_ptr(), c_row as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], (rsa, csa): (usize, usize), b: &[Self], (rsb, csb): (usize, usize), beta: Self, c: &mut [Self], c_row: usize) {
        check_gemm(m, k, n, (a.len(), (rsa, csa)), (b.len(), (rsb, csb)), (c.len(), c_row));
        // SAFETY: every operand's strided extent was checked against its slice.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize,
                csb as isize, beta, c.as_mut_ptr(), c_row as isize, 1,
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, dropout active.
    Train,
    /// Running statistics in BN, dropout off.
    Eval,
}

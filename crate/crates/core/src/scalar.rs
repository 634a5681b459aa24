//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All tensor math is written once against [`Scalar`]; `f32` is the training
//! type and `f64` the oracle/test type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as tensor element.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype name, used in error messages and report echoes.
    const NAME: &'static str;

    /// `c = op(a) * op(b) + beta * c` where `a` is `m x k` and `b` is `k x n`
    /// after the optional transposes. All buffers are dense row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); storage is (cols x rows) when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: bounds checked above; strides describe dense
                // row-major buffers of exactly the asserted sizes.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Tolerances used across the test and acceptance suites, kept in one table.
pub mod tolerance {
    /// Central finite-difference step for 64-bit gradient checks.
    pub const FD_STEP: f64 = 1e-5;
    /// Max relative error between autodiff and finite differences.
    pub const FD_REL_ERR: f64 = 1e-4;
    /// Denominator floor of that relative error, so near-zero gradients are
    /// judged on absolute error instead.
    pub const FD_FLOOR: f64 = 1e-4;
    /// Softmax rows must sum to one within this bound.
    pub const SOFTMAX_SUM: f64 = 1e-6;
    /// Hand-computed mixture vs implementation.
    pub const MIXTURE: f64 = 1e-10;
    /// Smoothing must be the exact per-token arithmetic mean.
    pub const SMOOTHING: f64 = 1e-12;
    /// Manual forward oracles (classification tables, render-and-score).
    pub const MANUAL_FORWARD: f64 = 1e-8;
    /// Float16 summary store, per element relative error.
    pub const F16_REL_ERR: f64 = 0.01;
}

//! Scalar abstraction so the same model code runs in 32-bit for training and
//! inference and in 64-bit for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// Row-major `c = a · bᵀ + beta · c` with `a: m×k`, `b: n×k`, `c: m×n`.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Row-major `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Row-major `c = aᵀ · b + beta · c` with `a: k×m`, `b: k×n`, `c: m×n`.
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: bounds checked above, strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), 1, k as isize,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    )
                }
            }

            fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: as above.
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    )
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: as above.
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

//! Row-major dense helpers over `f32`/`f64` backed by `matrixmultiply`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type the transformer can run in.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A B + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn of(x: f64) -> Self {
                x as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Extents are checked so the raw-pointer call stays in bounds.
                let span = |r: usize, c: usize, rs: isize, cs: isize| {
                    if r == 0 || c == 0 {
                        0
                    } else {
                        (r - 1) * rs as usize + (c - 1) * cs as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `C (m x n) = A (m x k) * B (k x n)`, overwriting `C`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, F::zero(), c, n as isize, 1);
}

/// `C (k x n) += A^T * B` with `A (m x k)`, `B (m x n)`.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(k, m, n, F::one(), a, 1, k as isize, b, n as isize, 1, F::one(), c, n as isize, 1);
}

/// `C (m x k) = A * B^T` with `A (m x n)`, `B (k x n)`, overwriting `C`.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    F::gemm(m, n, k, F::one(), a, n as isize, 1, b, 1, n as isize, F::zero(), c, k as isize, 1);
}

/// Add `bias` to every row of `x` (`rows x bias.len()`).
pub fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Accumulate column sums of `x` into `acc`.
pub fn col_sum_acc<F: Scalar>(x: &[F], acc: &mut [F]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

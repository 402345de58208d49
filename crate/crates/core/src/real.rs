//! Floating point abstraction shared by the network code.
//!
//! Models run in `f32`; gradient checks promote the same model to `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// General matrix multiply `c = alpha * a * b + beta * c` on strided
    /// row-major views. Strides are `(row, col)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_stride: (isize, isize),
        b: &[Self],
        b_stride: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_stride: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, stride: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(stride.0 >= 0 && stride.1 >= 0, "negative strides unsupported");
    let last = (rows - 1) as isize * stride.0 + (cols - 1) as isize * stride.1;
    assert!((last as usize) < len, "matrix view out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_stride: (isize, isize),
                b: &[Self],
                b_stride: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_stride: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_stride);
                check_extent(b.len(), k, n, b_stride);
                check_extent(c.len(), m, n, c_stride);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above, and `c` is a
                // unique borrow so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_stride.0,
                        a_stride.1,
                        b.as_ptr(),
                        b_stride.0,
                        b_stride.1,
                        beta,
                        c.as_mut_ptr(),
                        c_stride.0,
                        c_stride.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `(rows, cols)` strides for a dense matrix, optionally transposed.
pub(crate) fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c (m x n) = op(a) * op(b) + beta * c` where `a` is stored `m x k`
/// (or `k x m` if `ta`) and `b` stored `k x n` (or `n x k` if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    c: &mut [R],
    accumulate: bool,
) {
    let a_cols = if ta { m } else { k };
    let b_cols = if tb { k } else { n };
    let beta = if accumulate { R::one() } else { R::zero() };
    R::gemm(
        m,
        k,
        n,
        R::one(),
        a,
        strides(a_cols, ta),
        b,
        strides(b_cols, tb),
        beta,
        c,
        (n as isize, 1),
    );
}

//! Strided GEMM over the storage float type.
//!
//! `c = alpha * a · b + beta * c` with `a` viewed as m×k and `b` as k×n
//! through (row stride, column stride) pairs, so transposed operands are
//! just swapped strides. The kernel is single-threaded and deterministic.

use crate::tensor::Float;

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: &[Float],
    a_strides: (usize, usize),
    b: &[Float],
    b_strides: (usize, usize),
    beta: Float,
    c: &mut [Float],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    debug_assert!(c.len() > (m - 1) * c_strides.0 + (n - 1) * c_strides.1);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        kernel(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as kernel;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as kernel;

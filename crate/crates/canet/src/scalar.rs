//! Scalar abstraction over f32/f64.
//!
//! Training runs in f32; gradient checking runs the identical code in f64
//! so central differences have enough headroom. The trait carries the GEMM
//! dispatch and the little-endian byte layout used by checkpoints.

use num_traits::Float;
use std::fmt;

pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    /// Checkpoint dtype code.
    const DTYPE: u8;
    /// Bytes per element on disk.
    const BYTES: usize;

    fn fr(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C, with explicit strides
    /// (row stride, column stride) per matrix.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn fr(x: f64) -> Self { x as f32 }
    fn as_f64(self) -> f64 { self as f64 }
    fn write_le(self, out: &mut Vec<u8>) { out.extend_from_slice(&self.to_le_bytes()); }
    fn read_le(bytes: &[u8]) -> Self { f32::from_le_bytes(bytes[..4].try_into().unwrap()) }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn fr(x: f64) -> Self { x }
    fn as_f64(self) -> f64 { self }
    fn write_le(self, out: &mut Vec<u8>) { out.extend_from_slice(&self.to_le_bytes()); }
    fn read_le(bytes: &[u8]) -> Self { f64::from_le_bytes(bytes[..8].try_into().unwrap()) }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major GEMM over slices: C[m,n] = alpha*A·B + beta*C.
/// `at`/`bt` transpose A/B logically (no copies, stride tricks).
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize, k: usize, n: usize,
    alpha: f64,
    a: &[S], at: bool,
    b: &[S], bt: bool,
    beta: f64,
    c: &mut [S],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!(a.len(), m * k, "gemm: A is {} elements, expected {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: B is {} elements, expected {k}x{n}", b.len());
    assert_eq!(c.len(), m * n, "gemm: C is {} elements, expected {m}x{n}", c.len());
    // A stored row-major as [m,k] (or [k,m] when transposed).
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        // Degenerate contraction: gemm would be a no-op product; apply beta.
        let bs = S::fr(beta);
        for v in c.iter_mut() {
            *v = *v * bs;
        }
        return;
    }
    unsafe {
        S::gemm_raw(
            m, k, n,
            S::fr(alpha),
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            S::fr(beta),
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

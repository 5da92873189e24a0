//! Reference CPU kernels with hand-written backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod resample;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batch_norm, batch_norm_backward, BatchNormState, BnCache, BnMode, BnParams};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use linear::{linear, linear_backward};
pub use loss::{mse_loss, softmax_cross_entropy, DEFAULT_IGNORE_INDEX};
pub use resample::{
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, upsample,
    upsample_backward, UpsampleMode,
};

/// Minimum multiply-accumulate count before a kernel fans out over rayon.
pub(crate) const PAR_THRESHOLD: usize = 1 << 18;

/// Row-major `C = A B + beta C` with `A: m x k`, `B: k x n`, `C: m x n`.
/// `ta`/`tb` mean the operand is stored transposed (`k x m`, `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: crate::tensor::Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertion bounds every strided index.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

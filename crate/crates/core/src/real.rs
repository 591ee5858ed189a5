use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type for tensors and layers.
///
/// Training runs in `f32`; gradient checks instantiate the same code in `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw strided `c = alpha * a * b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`.
    ///
    /// Panics if any addressed element falls outside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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

    /// Dense row-major gemm; `a_t` means `a` is stored k×m, `b_t` means `b` is stored n×k.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
        let sa = if a_t { (1, m) } else { (k, 1) };
        let sb = if b_t { (1, k) } else { (n, 1) };
        Self::gemm_strided(m, k, n, alpha, a, sa, b, sb, beta, c, (n, 1));
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
                    assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(last(m, n, rsc, csc) < c.len(), "gemm: out out of bounds");
                // SAFETY: every addressed element was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

//! Scalar element types. A run picks one precision and every tape, model
//! and optimizer in that run is instantiated with it.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Additive stand-in for -inf in attention masks.
    const MASK_SENTINEL: Self;
    const PRECISION: Precision;

    fn from_f64_lossy(x: f64) -> Self;

    /// `c = op(a) * op(b) (+ c if accumulate)` for row-major `a` (m x k after
    /// `op`), `b` (k x n after `op`) and `c` (m x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical (rows x cols) view; stored as (cols x rows) when transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $sentinel:expr, $prec:expr, $kernel:path) => {
        impl Real for $t {
            const MASK_SENTINEL: Self = $sentinel;
            const PRECISION: Precision = $prec;

            fn from_f64_lossy(x: f64) -> Self {
                x as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides describe dense row-major
                // buffers of exactly these logical shapes.
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

impl_real!(f32, -1e9, Precision::F32, matrixmultiply::sgemm);
impl_real!(f64, -1e300, Precision::F64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4., 5., 10., 11.]);

        // aT stored as 3x2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut c2 = [0.0; 4];
        f64::gemm(2, 3, 2, &at, true, &b, false, &mut c2, false);
        assert_eq!(c2, c);

        // bT stored as 2x3, accumulate on top of c
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        f64::gemm(2, 3, 2, &a, false, &bt, true, &mut c2, true);
        assert_eq!(c2, [8., 10., 20., 22.]);
    }

    #[test]
    fn zero_k_clears_or_keeps() {
        let mut c = [3.0f32; 4];
        f32::gemm(2, 0, 2, &[], false, &[], false, &mut c, true);
        assert_eq!(c, [3.0; 4]);
        f32::gemm(2, 0, 2, &[], false, &[], false, &mut c, false);
        assert_eq!(c, [0.0; 4]);
    }
}

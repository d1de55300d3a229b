use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Scalar type a tensor can hold. Models run in `f32`; finite-difference
/// oracles re-run the same graphs in `f64`.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = a·b + beta·c` on strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
}

macro_rules! check_extent {
    ($m:expr, $k:expr, $n:expr, $a:expr, $sa:expr, $b:expr, $sb:expr, $c:expr) => {
        // Largest element offset touched by each strided view.
        let reach = |rows: usize, cols: usize, (rs, cs): (isize, isize)| -> usize {
            if rows == 0 || cols == 0 {
                0
            } else {
                (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
            }
        };
        assert!($sa.0 >= 0 && $sa.1 >= 0 && $sb.0 >= 0 && $sb.1 >= 0);
        assert!(reach($m, $k, $sa) <= $a.len(), "gemm: lhs view out of bounds");
        assert!(reach($k, $n, $sb) <= $b.len(), "gemm: rhs view out of bounds");
        assert!($m * $n <= $c.len(), "gemm: output view out of bounds");
    };
}

impl Element for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_extent!(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every view was bounds-checked above; `c` is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_extent!(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

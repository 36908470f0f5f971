//! Scalar element trait switching the whole engine between f32 and f64.
//!
//! Precision is a type parameter rather than a runtime branch: verification
//! and reproducibility tests instantiate `f64`, training defaults to `f32`.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};

/// Element type tag, stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" | "32" => Ok(Dtype::F32),
            "f64" | "float64" | "64" => Ok(Dtype::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// Floating-point element of every tensor in the engine.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// General strided matrix multiply: `c = alpha * a·b + beta * c`.
    ///
    /// `a` is m×k, `b` is k×n, `c` is m×n; `(rs, cs)` are row/column strides
    /// in elements, so transposed operands are expressed by swapping strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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

    fn write_slice<W: Write>(w: &mut W, data: &[Self]) -> std::io::Result<()>;
    fn read_slice<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<Self>>;
}

fn check_strides(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    assert!(rows > 0 && cols > 0, "gemm: empty {what}");
    let max = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (max as usize) < len,
        "gemm: {what} buffer too small (len {len}, max index {max})"
    );
}

macro_rules! impl_elem {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Elem for $ty {
            const DTYPE: Dtype = $dtype;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm_strided(
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
                check_strides(a.len(), m, k, rsa, csa, "lhs");
                check_strides(b.len(), k, n, rsb, csb, "rhs");
                check_strides(c.len(), m, n, rsc, csc, "out");
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

            fn write_slice<W: Write>(w: &mut W, data: &[Self]) -> std::io::Result<()> {
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            }

            fn read_slice<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<Self>> {
                const SZ: usize = std::mem::size_of::<$ty>();
                let mut buf = vec![0u8; len * SZ];
                r.read_exact(&mut buf)?;
                Ok(buf
                    .chunks_exact(SZ)
                    .map(|c| <$ty>::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    };
}

impl_elem!(f32, Dtype::F32, matrixmultiply::sgemm);
impl_elem!(f64, Dtype::F64, matrixmultiply::dgemm);

/// Row-major `c = a(m×k) · b(k×n) + beta·c`.
pub fn matmul<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm_strided(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_rhs() {
        // a(1×2) · bᵀ where b is stored 2×2 row-major.
        let a = [1.0f32, 2.0];
        let b = [1.0f32, 2.0, 3.0, 4.0]; // bᵀ = [1 3; 2 4]
        let mut c = [0.0f32; 2];
        f32::gemm_strided(1, 2, 2, 1.0, &a, 2, 1, &b, 1, 2, 0.0, &mut c, 2, 1);
        assert_eq!(c, [5.0, 11.0]);
    }

    #[test]
    fn dtype_roundtrip() {
        for d in [Dtype::F32, Dtype::F64] {
            assert_eq!(Dtype::from_code(d.code()), Some(d));
        }
        assert_eq!(Dtype::from_code(7), None);
    }
}

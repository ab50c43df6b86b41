//! Dense rank-4 tensors and the differentiable operator set the network is
//! built from.
//!
//! [`Tensor`] is a plain value: a `(batch, channels, rows, cols)` array in
//! row-major order. Gradient bookkeeping lives on the [`Graph`] tape, which
//! records every operator application and replays adjoints in reverse.

mod conv;
mod graph;
mod gradcheck;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{BnMode, Graph, RunningMoments, Var};

use crate::error::{Error, Result};

/// Floating-point element type of the whole stack. Implemented for `f32`
/// (training precision) and `f64` (tight gradcheck precision).
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` for row-major-strided matrices.
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
    ($t:ty, $bits:expr, $gemm:path) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn as_f64(self) -> f64 {
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
                let max_idx = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
                    (rows.max(1) - 1) * rs.unsigned_abs() + (cols.max(1) - 1) * cs.unsigned_abs()
                };
                assert!(max_idx(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
                if k > 0 {
                    assert!(max_idx(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
                }
                assert!(max_idx(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
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

impl_scalar!(f32, 32, matrixmultiply::sgemm);
impl_scalar!(f64, 64, matrixmultiply::dgemm);

/// Dimensions of a rank-4 tensor: `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "tensor dimensions must all be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        Ok(Shape { n, c, h, w })
    }

    /// Total element count `n*c*h*w`.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of the `(n, c)` plane.
    #[inline(always)]
    pub fn plane(&self, n: usize, c: usize) -> usize {
        (n * self.c + c) * self.h * self.w
    }

    #[inline(always)]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array in row-major `(n, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Config(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    /// Convenience constructor from `f64` literals, mostly for tests.
    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        self.data[((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        self.data[((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x] = v;
    }

    /// The `(n, c)` spatial plane as a slice of length `h*w`.
    #[inline(always)]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.shape.plane(n, c);
        &self.data[start..start + self.shape.plane_len()]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Exact element-for-element conversion between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(Shape::new(0, 1, 1, 1).is_err());
        assert!(Shape::new(1, 1, 0, 1).is_err());
        assert!(Shape::new(2, 3, 4, 5).is_ok());
    }

    #[test]
    fn tensor_data_length_must_match_shape() {
        let s = Shape::new(1, 2, 2, 2).unwrap();
        assert!(Tensor::<f32>::new(s, vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::new(s, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn plane_indexing() {
        let s = Shape::new(2, 3, 2, 2).unwrap();
        let t = Tensor::<f32>::new(s, (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(1, 2, 1, 1), 23.0);
        assert_eq!(t.plane(1, 0), &[12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn gemm_small_matmul() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}

//! Minimal volumetric deep-learning engine: dense `[C, D, H, W]` tensors,
//! im2col/GEMM convolutions and a define-by-run reverse-mode tape.
//!
//! Batches are handled by the caller (one graph per sample, gradients
//! accumulated), which keeps every op free of a batch axis.

mod conv;
mod graph;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rustfft::FftNum;
use serde::{Deserialize, Serialize};

pub use conv::ConvGeom;
pub use graph::{fft_channels, Backward, Graph, Var};

/// Floating-point element type of the engine (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FftNum + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C <- alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m x k`,
    /// `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) <- A B + beta C`. `ta`/`tb` mean the operand is
/// stored transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], beta: T) {
    let lda = if ta { m } else { k };
    let ldb = if tb { k } else { n };
    matmul_ld(m, k, n, (a, lda, ta), (b, ldb, tb), (c, n), beta);
}

/// [`matmul`] on sub-matrices with explicit leading dimensions: each operand
/// is `(data, leading dimension[, stored transposed])`.
pub fn matmul_ld<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    (a, lda, ta): (&[T], usize, bool),
    (b, ldb, tb): (&[T], usize, bool),
    (c, ldc): (&mut [T], usize),
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, ld: usize| if rows == 0 || cols == 0 { 0 } else { (rows - 1) * ld + cols };
    let (ar, ac) = if ta { (k, m) } else { (m, k) };
    let (br, bc) = if tb { (n, k) } else { (k, n) };
    assert!(ac <= lda && bc <= ldb && n <= ldc, "leading dimension too small");
    assert!(
        a.len() >= extent(ar, ac, lda) && b.len() >= extent(br, bc, ldb) && c.len() >= extent(m, n, ldc),
        "matmul operand too small"
    );
    // matrixmultiply packs transposed operands slowly; a blocked copy into
    // row-major order is much cheaper than the difference
    let a_plain;
    let (a, lda) = if ta {
        a_plain = transpose(a, k, m, lda);
        (&a_plain[..], k)
    } else {
        (a, lda)
    };
    let b_plain;
    let (b, ldb) = if tb {
        b_plain = transpose(b, n, k, ldb);
        (&b_plain[..], n)
    } else {
        (b, ldb)
    };
    // SAFETY: extents checked above; c is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            ldb as isize,
            1,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Row-major transpose of a `rows x cols` matrix with leading dimension `ld`.
pub fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, ld: usize) -> Vec<T> {
    const B: usize = 16;
    let mut dst = vec![T::zero(); rows * cols];
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    dst[j * rows + i] = src[i * ld + j];
                }
            }
        }
    }
    dst
}

/// Dense `[channels, depth, height, width]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    pub fn filled(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap())).collect(),
        }
    }

    /// Per-voxel index of the largest channel.
    pub fn argmax_channels(&self) -> Vec<u8> {
        let v = self.voxels();
        (0..v)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels() {
                    if self.data[c * v + i] > self.data[best * v + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

pub type ParamId = usize;

/// Flat list of named parameters owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.params[id].value
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::c(v.to_f64().unwrap())).collect(),
                })
                .collect(),
        }
    }
}

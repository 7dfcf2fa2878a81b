//! Dense row-major matrices and the one matrix-multiply kernel every layer
//! runs through.
//!
//! The kernel accumulates each output element strictly in ascending order of
//! the contraction index, starting from whatever value `c` already holds.
//! Tiling only changes which elements are computed together, never the order
//! of additions for a given element, so a row of output is bit-identical no
//! matter how many other rows were computed in the same call. Streaming
//! inference relies on this.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Floating point element type. `f32` for inference and training, `f64` for
/// finite-difference gradient checks.
pub trait Real: Float + AddAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S = f32> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[S]>>(cols: usize, rows: &[R]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[S]> + '_ {
        // chunks_exact on an empty slice with cols == 0 would panic
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn append_rows(&mut self, other: &Self) {
        assert_eq!(self.cols, other.cols, "column mismatch on append");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn vstack(parts: &[Self], cols: usize) -> Self {
        let mut out = Self::zeros(0, cols);
        for p in parts {
            out.append_rows(p);
        }
        out
    }

    pub fn map<T: Real>(&self, f: impl Fn(S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Matrix<T> {
        self.map(|v| T::of(v.as_f64()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        transpose_into(&self.data, self.rows, self.cols, &mut out.data);
        out
    }
}

/// `dst[c * rows + r] = src[r * cols + c]`
pub fn transpose_into<S: Copy>(src: &[S], rows: usize, cols: usize, dst: &mut [S]) {
    debug_assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Strided view of the left operand: element `(i, p)` is at
/// `data[offset + i * row_stride + p * col_stride]`.
#[derive(Clone, Copy)]
pub struct Lhs<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// Row-major right operand with contiguous columns: element `(p, j)` is at
/// `data[offset + p * row_stride + j]`.
#[derive(Clone, Copy)]
pub struct Rhs<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub row_stride: usize,
}

/// Row-major output with contiguous columns.
pub struct Out<'a, S> {
    pub data: &'a mut [S],
    pub offset: usize,
    pub row_stride: usize,
}

const MR: usize = 8;
const NR: usize = 16;

/// `C[m×n] += A[m×k] · B[k×n]`.
///
/// Every element is updated as `c = c + a[i,p] * b[p,j]` for `p = 0, 1, ..., k-1`
/// in that order, with no fused multiply-add.
pub fn gemm<S: Real>(m: usize, n: usize, k: usize, a: Lhs<'_, S>, b: Rhs<'_, S>, c: Out<'_, S>) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let Out {
        data: cdata,
        offset: coff,
        row_stride: rsc,
    } = c;
    // full MR-row panels of A, stored p-major so the kernel reads them in order
    let full_m = m - m % MR;
    let mut apack = vec![S::zero(); full_m * k];
    for (panel, dst) in apack.chunks_exact_mut(MR * k).enumerate() {
        for (p, col) in dst.chunks_exact_mut(MR).enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = a.data[a.offset + (panel * MR + r) * a.row_stride + p * a.col_stride];
            }
        }
    }
    // single-frame streaming calls have no full panel and skip the packing
    let mut bpack = vec![S::zero(); if full_m > 0 { k * NR } else { 0 }];
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        if nr == NR && full_m > 0 {
            for (p, dst) in bpack.chunks_exact_mut(NR).enumerate() {
                let bb = b.offset + p * b.row_stride + j0;
                dst.copy_from_slice(&b.data[bb..bb + NR]);
            }
            for (panel, ap) in apack.chunks_exact(MR * k).enumerate() {
                micro_full(ap, &bpack, panel * MR, j0, cdata, coff, rsc);
            }
        }
        if nr < NR || full_m < m {
            let rows = if nr < NR { 0..m } else { full_m..m };
            micro_edge(rows, nr, k, &a, &b, j0, cdata, coff, rsc);
        }
        j0 += NR;
    }
}

#[inline(always)]
fn micro_full<S: Real>(ap: &[S], bp: &[S], i0: usize, j0: usize, c: &mut [S], coff: usize, rsc: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<S>() == std::any::TypeId::of::<f32>() && std::arch::is_x86_feature_detected!("avx512f") {
        let base = coff + i0 * rsc + j0;
        assert!(base + (MR - 1) * rsc + NR <= c.len() && bp.len() * MR == ap.len() * NR);
        // SAFETY: S is f32 (checked above), bounds asserted, feature detected.
        unsafe {
            avx512::micro_f32(
                ap.as_ptr().cast(),
                bp.as_ptr().cast(),
                ap.len() / MR,
                c.as_mut_ptr().cast::<f32>().add(base),
                rsc,
            );
        }
        return;
    }
    let mut acc = [[S::zero(); NR]; MR];
    for (r, acc_row) in acc.iter_mut().enumerate() {
        let base = coff + (i0 + r) * rsc + j0;
        acc_row.copy_from_slice(&c[base..base + NR]);
    }
    for (acol, brow) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        let acol: &[S; MR] = acol.try_into().unwrap();
        let brow: &[S; NR] = brow.try_into().unwrap();
        for r in 0..MR {
            let av = acol[r];
            for j in 0..NR {
                acc[r][j] = acc[r][j] + av * brow[j];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        let base = coff + (i0 + r) * rsc + j0;
        c[base..base + NR].copy_from_slice(acc_row);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    /// Same arithmetic as the generic kernel: separate multiply and add, `p` ascending.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn micro_f32(ap: *const f32, bp: *const f32, k: usize, c: *mut f32, rsc: usize) {
        const _: () = assert!(MR == 8 && NR == 16);
        let mut acc = [_mm512_setzero_ps(); MR];
        for (r, a) in acc.iter_mut().enumerate() {
            *a = _mm512_loadu_ps(c.add(r * rsc));
        }
        for p in 0..k {
            let b = _mm512_loadu_ps(bp.add(p * NR));
            let a = ap.add(p * MR);
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let prod = _mm512_mul_ps(_mm512_set1_ps(*a.add(r)), b);
                *acc_r = _mm512_add_ps(*acc_r, prod);
            }
        }
        for (r, a) in acc.iter().enumerate() {
            _mm512_storeu_ps(c.add(r * rsc), *a);
        }
    }
}

#[inline(never)]
#[allow(clippy::too_many_arguments)]
fn micro_edge<S: Real>(
    rows: std::ops::Range<usize>,
    nr: usize,
    k: usize,
    a: &Lhs<'_, S>,
    b: &Rhs<'_, S>,
    j0: usize,
    c: &mut [S],
    coff: usize,
    rsc: usize,
) {
    for i in rows {
        let arow = a.offset + i * a.row_stride;
        let cbase = coff + i * rsc + j0;
        let mut acc = [S::zero(); NR];
        acc[..nr].copy_from_slice(&c[cbase..cbase + nr]);
        for p in 0..k {
            let av = a.data[arow + p * a.col_stride];
            let bb = b.offset + p * b.row_stride + j0;
            let brow = &b.data[bb..bb + nr];
            for j in 0..nr {
                acc[j] = acc[j] + av * brow[j];
            }
        }
        c[cbase..cbase + nr].copy_from_slice(&acc[..nr]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c0: &[f32]) -> Vec<f32> {
        let mut c = c0.to_vec();
        for i in 0..m {
            for j in 0..n {
                let mut s = c[i * n + j];
                for p in 0..k {
                    s = s + a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_in_order_scalar_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n, k) in &[(1, 1, 1), (4, 16, 3), (5, 17, 9), (13, 40, 64), (3, 8, 0), (9, 33, 5)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f32> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect = naive(m, n, k, &a, &b, &c0);
            let mut c = c0.clone();
            gemm(
                m,
                n,
                k,
                Lhs { data: &a, offset: 0, row_stride: k, col_stride: 1 },
                Rhs { data: &b, offset: 0, row_stride: n },
                Out { data: &mut c, offset: 0, row_stride: n },
            );
            assert_eq!(c, expect, "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn transposed_lhs_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, n, k) = (6, 20, 7);
        // a stored as k×m, read transposed
        let at: Vec<f64> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0f64; m * n];
        gemm(
            m,
            n,
            k,
            Lhs { data: &at, offset: 0, row_stride: 1, col_stride: m },
            Rhs { data: &b, offset: 0, row_stride: n },
            Out { data: &mut c, offset: 0, row_stride: n },
        );
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| at[p * m + i] * b[p * n + j]).sum();
                assert!((s - c[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_results_independent_of_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, n, k) = (11, 48, 37);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut full = vec![0.0f32; m * n];
        gemm(
            m,
            n,
            k,
            Lhs { data: &a, offset: 0, row_stride: k, col_stride: 1 },
            Rhs { data: &b, offset: 0, row_stride: n },
            Out { data: &mut full, offset: 0, row_stride: n },
        );
        for i in 0..m {
            let mut one = vec![0.0f32; n];
            gemm(
                1,
                n,
                k,
                Lhs { data: &a, offset: i * k, row_stride: k, col_stride: 1 },
                Rhs { data: &b, offset: 0, row_stride: n },
                Out { data: &mut one, offset: 0, row_stride: n },
            );
            assert_eq!(&full[i * n..(i + 1) * n], &one[..]);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Matrix::from_vec(3, 5, (0..15).map(|v| v as f32).collect());
        let t = m.transpose();
        assert_eq!(t.rows(), 5);
        assert_eq!(t.get(4, 2), m.get(2, 4));
        assert_eq!(t.transpose(), m);
    }
}

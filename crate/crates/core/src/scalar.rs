//! Floating-point scalar abstraction shared by the embedding and retrieval code.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point element of an embedding: `f32` or `f64`.
///
/// Besides the arithmetic from [`Float`], a scalar knows its little-endian
/// byte encoding so that embedding caches and image-feature indexes can be
/// written for either width.
pub trait Scalar: Float + FromPrimitive + NumCast + Debug + Default + Send + Sync + 'static {
    /// Size of one encoded element in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element from exactly `BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).unwrap_or_else(Self::nan)
    }

    /// Backend for [`dot`]. Overrides must match [`dot_portable`] bit for bit.
    #[inline]
    fn dot_kernel(a: &[Self], b: &[Self]) -> Self {
        dot_portable(a, b)
    }

    /// Backend for [`dot4`]. Overrides must match [`dot4_portable`] bit for bit.
    #[inline]
    fn dot4_kernel(rows: [&[Self]; 4], col: &[Self]) -> [Self; 4] {
        dot4_portable(rows, col)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }

    #[inline]
    fn dot_kernel(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len());
        #[cfg(target_arch = "x86_64")]
        if avx::available() {
            // SAFETY: AVX support checked at runtime; lengths are equal.
            return unsafe { avx::dot(a, b) };
        }
        dot_portable(a, b)
    }

    #[inline]
    fn dot4_kernel(rows: [&[Self]; 4], col: &[Self]) -> [Self; 4] {
        assert!(rows.iter().all(|r| r.len() == col.len()));
        #[cfg(target_arch = "x86_64")]
        if avx::available() {
            // SAFETY: AVX support checked at runtime; lengths are equal.
            return unsafe { avx::dot4(rows, col) };
        }
        dot4_portable(rows, col)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

const LANES: usize = 8;

/// Dot product with a fixed eight-lane accumulation order.
///
/// Every similarity in the crate goes through this kernel, so the blocked and
/// the per-query retrieval paths produce bitwise-identical scores.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    S::dot_kernel(a, b)
}

/// Four dot products of `rows` against `col`, each bitwise equal to
/// `dot(rows[i], col)`. Sharing the loads of `col` cuts memory traffic in
/// the retrieval inner loop.
#[inline]
pub fn dot4<S: Scalar>(rows: [&[S]; 4], col: &[S]) -> [S; 4] {
    S::dot4_kernel(rows, col)
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::{reduce, LANES};

    #[inline]
    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx")
    }

    #[inline(always)]
    unsafe fn lanes(v: __m256) -> [f32; LANES] {
        let mut out = [0f32; LANES];
        _mm256_storeu_ps(out.as_mut_ptr(), v);
        out
    }

    #[inline(always)]
    unsafe fn tail(a: &[f32], b: &[f32], from: usize) -> f32 {
        let mut t = 0f32;
        for j in from..a.len() {
            t += a[j] * b[j];
        }
        t
    }

    /// Same arithmetic as the portable kernel: separate multiply and add per
    /// lane (no fused multiply-add), identical final reduction.
    #[target_feature(enable = "avx")]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let full = a.len() / LANES * LANES;
        let mut acc = _mm256_setzero_ps();
        let mut i = 0;
        while i < full {
            let x = _mm256_loadu_ps(a.as_ptr().add(i));
            let y = _mm256_loadu_ps(b.as_ptr().add(i));
            acc = _mm256_add_ps(acc, _mm256_mul_ps(x, y));
            i += LANES;
        }
        reduce(&lanes(acc), tail(a, b, full))
    }

    #[target_feature(enable = "avx")]
    pub unsafe fn dot4(rows: [&[f32]; 4], col: &[f32]) -> [f32; 4] {
        let full = col.len() / LANES * LANES;
        let [p0, p1, p2, p3] = rows.map(|r| r.as_ptr());
        let (mut a0, mut a1, mut a2, mut a3) = (
            _mm256_setzero_ps(),
            _mm256_setzero_ps(),
            _mm256_setzero_ps(),
            _mm256_setzero_ps(),
        );
        let mut i = 0;
        while i < full {
            let c = _mm256_loadu_ps(col.as_ptr().add(i));
            a0 = _mm256_add_ps(a0, _mm256_mul_ps(_mm256_loadu_ps(p0.add(i)), c));
            a1 = _mm256_add_ps(a1, _mm256_mul_ps(_mm256_loadu_ps(p1.add(i)), c));
            a2 = _mm256_add_ps(a2, _mm256_mul_ps(_mm256_loadu_ps(p2.add(i)), c));
            a3 = _mm256_add_ps(a3, _mm256_mul_ps(_mm256_loadu_ps(p3.add(i)), c));
            i += LANES;
        }
        [
            reduce(&lanes(a0), tail(rows[0], col, full)),
            reduce(&lanes(a1), tail(rows[1], col, full)),
            reduce(&lanes(a2), tail(rows[2], col, full)),
            reduce(&lanes(a3), tail(rows[3], col, full)),
        ]
    }
}

/// `acc[l] += x[l] * y[l]` per lane, as a separate multiply and add.
#[inline(always)]
fn lane_fma<S: Scalar>(acc: &mut [S; LANES], x: &[S], y: &[S]) {
    let x: &[S; LANES] = x.try_into().expect("lane chunk");
    let y: &[S; LANES] = y.try_into().expect("lane chunk");
    for l in 0..LANES {
        acc[l] = acc[l] + x[l] * y[l];
    }
}

#[inline(always)]
fn reduce<S: Scalar>(acc: &[S; LANES], tail: S) -> S {
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// Portable eight-lane dot product.
pub fn dot_portable<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        lane_fma(&mut acc, xa, xb);
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    reduce(&acc, tail)
}

pub fn dot4_portable<S: Scalar>(rows: [&[S]; 4], col: &[S]) -> [S; 4] {
    let mut acc = [[S::zero(); LANES]; 4];
    let full = col.len() / LANES * LANES;
    let [r0, r1, r2, r3] = rows.map(|r| r[..full].chunks_exact(LANES));
    for ((((c, x0), x1), x2), x3) in col[..full].chunks_exact(LANES).zip(r0).zip(r1).zip(r2).zip(r3) {
        lane_fma(&mut acc[0], x0, c);
        lane_fma(&mut acc[1], x1, c);
        lane_fma(&mut acc[2], x2, c);
        lane_fma(&mut acc[3], x3, c);
    }
    let mut out = [S::zero(); 4];
    for (q, (r, a)) in rows.iter().zip(acc.iter()).enumerate() {
        let mut tail = S::zero();
        for j in full..col.len() {
            tail = tail + r[j] * col[j];
        }
        out[q] = reduce(a, tail);
    }
    out
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

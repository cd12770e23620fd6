use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element dtype tag, used by checkpoints and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
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

/// Float element for tensors and the tape. f32 is the training dtype; f64
/// exists so gradient checks run the identical code path at higher precision.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// c[m,n] += a[m,k] · b[k,n]
    fn gemm_nn(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
        gemm_nn_generic(c, a, b, m, k, n);
    }

    /// c[m,n] += a[m,k] · b[n,k]ᵀ
    fn gemm_nt(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
        gemm_nt_generic(c, a, b, m, k, n);
    }

    /// c[m,n] += a[s,m]ᵀ · b[s,n]
    fn gemm_tn(c: &mut [Self], a: &[Self], b: &[Self], s: usize, m: usize, n: usize) {
        gemm_tn_generic(c, a, b, s, m, n);
    }
}

pub(crate) fn gemm_nn_generic<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn gemm_nt_generic<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

pub(crate) fn gemm_tn_generic<S: Scalar>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    s: usize,
    m: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), s * m);
    debug_assert_eq!(b.len(), s * n);
    debug_assert_eq!(c.len(), m * n);
    for r in 0..s {
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a[r * m..(r + 1) * m].iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn gemm_nn(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
        #[cfg(target_arch = "x86_64")]
        if simd::wide_ok() {
            unsafe { simd::gemm_nn_f32(c, a, b, m, k, n) };
            return;
        }
        gemm_nn_generic(c, a, b, m, k, n);
    }

    fn gemm_nt(c: &mut [Self], a: &[Self], b: &[Self], m: usize, k: usize, n: usize) {
        #[cfg(target_arch = "x86_64")]
        if simd::wide_ok() {
            unsafe { simd::gemm_nt_f32(c, a, b, m, k, n) };
            return;
        }
        gemm_nt_generic(c, a, b, m, k, n);
    }

    fn gemm_tn(c: &mut [Self], a: &[Self], b: &[Self], s: usize, m: usize, n: usize) {
        #[cfg(target_arch = "x86_64")]
        if simd::wide_ok() {
            unsafe { simd::gemm_tn_f32(c, a, b, s, m, n) };
            return;
        }
        gemm_tn_generic(c, a, b, s, m, n);
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// The crate is built for the x86-64 baseline (SSE2), but training is matmul
/// bound, so the f32 kernels re-run the same loops inside functions compiled
/// with AVX2+FMA when the host supports them. Same loop order, so results on
/// a given machine are deterministic run to run.
#[cfg(target_arch = "x86_64")]
mod simd {
    pub fn wide_ok() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_nn_f32(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_nt_f32(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = av.mul_add(bv, acc);
                }
                c[i * n + j] += acc;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemm_tn_f32(c: &mut [f32], a: &[f32], b: &[f32], s: usize, m: usize, n: usize) {
        for r in 0..s {
            let b_row = &b[r * n..(r + 1) * n];
            for (i, &av) in a[r * m..(r + 1) * m].iter().enumerate() {
                let c_row = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }
}

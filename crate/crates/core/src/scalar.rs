//! Scalar abstraction shared by every numerical module.
//!
//! All of the linear algebra is written against [`Real`], which is satisfied by
//! `f32` and `f64`. Tolerances are stored as `f64` and converted on use, so the
//! thresholds quoted throughout the crate are only meaningful in double
//! precision; single precision is supported for exploratory use.

use nalgebra::{DMatrix, DVector, RealField};
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the crate: `f32` or `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Complex dense matrix.
pub type CMat<T> = DMatrix<Complex<T>>;
/// Complex dense column vector.
pub type CVec<T> = DVector<Complex<T>>;
/// Real dense matrix.
pub type RMat<T> = DMatrix<T>;
/// Real dense column vector.
pub type RVec<T> = DVector<T>;

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts a working scalar into `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn cplx<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

#[inline]
pub fn creal<T: Real>(re: T) -> Complex<T> {
    Complex::new(re, T::zero())
}

/// Numerical thresholds used across the crate.
///
/// Kept in one record so that test suites and the library agree on every
/// cut-off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Entrywise Hermiticity check for externally supplied matrices.
    pub hermitian: f64,
    /// `‖U†U − 1‖` bound accepted for unitaries.
    pub unitary: f64,
    /// Negative eigenvalues down to this magnitude are clamped to zero.
    pub psd_clamp: f64,
    /// Eigenvalues below the negative of this value are a PSD violation.
    pub psd_fail: f64,
    /// Eigenvalues above this count towards the rank of a density matrix.
    pub rank: f64,
    /// Minimum gap between positive eigenvalues.
    pub gap: f64,
    /// Eigenvalue pairs with `λ_k + λ_l` below this are skipped in the QFIM.
    pub pair_sum: f64,
    /// Outcome probabilities below this contribute nothing to a CFIM.
    pub prob_floor: f64,
    /// Trace normalisation check for density matrices.
    pub trace: f64,
    /// Completeness check for POVMs.
    pub povm: f64,
    /// Antisymmetry check for real antisymmetric input.
    pub antisym: f64,
}

pub const TOL: Tolerances = Tolerances {
    hermitian: 1e-12,
    unitary: 1e-10,
    psd_clamp: 1e-10,
    psd_fail: 1e-8,
    rank: 1e-8,
    gap: 1e-8,
    pair_sum: 1e-12,
    prob_floor: 1e-12,
    trace: 1e-10,
    povm: 1e-8,
    antisym: 1e-10,
};

//! Complex dense linear algebra helpers, matrix functions and Haar sampling.

use nalgebra::{ComplexField, SymmetricEigen};
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{creal, lit, to_f64, CMat, CVec, RMat, RVec, Real, TOL};

/// Hermitian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HermMat<T: Real>(CMat<T>);

impl<T: Real> HermMat<T> {
    /// Validates `m` against the Hermiticity tolerance, then symmetrises it.
    pub fn new(m: CMat<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidDimension(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let dev = max_abs(&(&m - m.adjoint()));
        if dev > TOL.hermitian {
            return Err(Error::NotHermitian(dev));
        }
        Ok(Self::symmetrize(m))
    }

    /// Returns `(M + M†)/2` without validation.
    pub fn symmetrize(m: CMat<T>) -> Self {
        let half = creal(lit::<T>(0.5));
        let h = (&m + m.adjoint()) * half;
        HermMat(h)
    }

    pub fn from_real(m: &RMat<T>) -> Self {
        Self::symmetrize(m.map(creal))
    }

    pub fn identity(dim: usize) -> Self {
        HermMat(CMat::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &CMat<T> {
        &self.0
    }

    pub fn into_mat(self) -> CMat<T> {
        self.0
    }
}

/// Unitary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryMat<T: Real>(CMat<T>);

impl<T: Real> UnitaryMat<T> {
    pub fn new(m: CMat<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidDimension(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let dev = unitarity_defect(&m);
        if dev > TOL.unitary {
            return Err(Error::NotUnitary(dev));
        }
        Ok(UnitaryMat(m))
    }

    pub fn identity(dim: usize) -> Self {
        UnitaryMat(CMat::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &CMat<T> {
        &self.0
    }

    pub fn into_mat(self) -> CMat<T> {
        self.0
    }

    /// `self · other`, skipping re-validation.
    pub fn compose(&self, other: &UnitaryMat<T>) -> UnitaryMat<T> {
        UnitaryMat(&self.0 * &other.0)
    }
}

/// Spectral norm of `U†U − 1`.
pub fn unitarity_defect<T: Real>(m: &CMat<T>) -> f64 {
    let n = m.ncols();
    let d = m.adjoint() * m - CMat::<T>::identity(n, n);
    spectral_norm(&d)
}

/// Largest entry magnitude.
pub fn max_abs<T: Real>(m: &CMat<T>) -> f64 {
    m.iter().map(|z| to_f64(z.modulus())).fold(0.0, f64::max)
}

pub fn max_abs_real<T: Real>(m: &RMat<T>) -> f64 {
    m.iter().map(|x| to_f64(x.abs())).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(m: &CMat<T>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    to_f64(sv.max())
}

/// Samples a Haar-distributed unitary of size `dim`.
///
/// A complex Ginibre matrix is QR-factorised and the columns of `Q` are
/// rephased so that the diagonal of `R` is real-positive, which makes the
/// result exactly Haar distributed.
pub fn haar_unitary<T: Real, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<UnitaryMat<T>> {
    if dim == 0 {
        return Err(Error::InvalidDimension("Haar unitary of dimension 0".into()));
    }
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let g = CMat::<T>::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex::new(lit(re * scale), lit(im * scale))
    });
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        let rjj = r[(j, j)];
        let mag = rjj.modulus();
        let phase = if mag > T::zero() {
            rjj.unscale(mag)
        } else {
            Complex::new(T::one(), T::zero())
        };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    Ok(UnitaryMat(q))
}

/// Sum of singular values.
pub fn trace_norm<T: Real>(m: &CMat<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone().svd(false, false).singular_values.sum()
}

/// Eigendecomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermEig<T: Real> {
    /// Eigenvalues in ascending order.
    pub values: RVec<T>,
    /// Matching eigenvectors as columns.
    pub vectors: CMat<T>,
}

impl<T: Real> HermEig<T> {
    /// Reassembles `V diag(λ) V†`.
    pub fn recompose(&self) -> CMat<T> {
        recompose(&self.vectors, self.values.as_slice())
    }

    pub fn vector(&self, k: usize) -> CVec<T> {
        self.vectors.column(k).into_owned()
    }
}

/// `V diag(λ) V†`.
pub fn recompose<T: Real>(vectors: &CMat<T>, values: &[T]) -> CMat<T> {
    let mut scaled = vectors.clone();
    for (j, &l) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(l);
    }
    scaled * vectors.adjoint()
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
///
/// Each eigenvector's first component with magnitude above `1e-8` is made
/// real-positive. Ties in the eigenvalues keep the solver's order.
pub fn herm_eig<T: Real>(m: &HermMat<T>) -> HermEig<T> {
    let n = m.dim();
    if n == 0 {
        return HermEig {
            values: RVec::zeros(0),
            vectors: CMat::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(m.as_mat().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = RVec::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = CMat::zeros(n, n);
    for (j, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        fix_phase_first(&mut v);
        vectors.set_column(j, &v);
    }
    HermEig { values, vectors }
}

/// Hermitian eigendecomposition of an unvalidated matrix; the input is
/// checked against the Hermiticity tolerance first.
pub fn herm_eig_checked<T: Real>(m: &CMat<T>) -> Result<HermEig<T>> {
    Ok(herm_eig(&HermMat::new(m.clone())?))
}

/// Rotates `v` so that its first non-negligible component is real-positive.
pub fn fix_phase_first<T: Real>(v: &mut CVec<T>) {
    let thresh = lit::<T>(1e-8);
    if let Some(z) = v.iter().find(|z| z.modulus() > thresh).copied() {
        let phase = z.conj().unscale(z.modulus());
        v.iter_mut().for_each(|c| *c *= phase);
    }
}

/// Rotates `v` so that its largest-magnitude component is real-positive.
///
/// Ties are resolved towards the lowest index, with a relative slack so that
/// rounding noise cannot flip the choice.
pub fn fix_phase_largest<T: Real>(v: &mut CVec<T>) {
    let Some(best) = v.iter().map(|z| z.modulus()).reduce(|a, b| if b > a { b } else { a }) else {
        return;
    };
    if best <= T::zero() {
        return;
    }
    let slack = best * lit(1e-9);
    if let Some(z) = v.iter().find(|z| z.modulus() >= best - slack).copied() {
        let phase = z.conj().unscale(z.modulus());
        v.iter_mut().for_each(|c| *c *= phase);
    }
}

/// Principal square root of a positive semidefinite matrix.
pub fn psd_sqrt<T: Real>(m: &HermMat<T>) -> Result<HermMat<T>> {
    let eig = herm_eig(m);
    let mut roots = Vec::with_capacity(m.dim());
    for &l in eig.values.iter() {
        roots.push(clamp_psd(l)?.sqrt());
    }
    Ok(HermMat::symmetrize(recompose(&eig.vectors, &roots)))
}

/// Inverse square root of a positive definite matrix.
pub fn pd_inv_sqrt<T: Real>(m: &HermMat<T>, floor: f64) -> Result<HermMat<T>> {
    let eig = herm_eig(m);
    let mut roots = Vec::with_capacity(m.dim());
    for &l in eig.values.iter() {
        if to_f64(l) <= floor {
            return Err(Error::IllConditioned(format!(
                "eigenvalue {:.3e} below {floor:.1e}",
                to_f64(l)
            )));
        }
        roots.push(T::one() / l.sqrt());
    }
    Ok(HermMat::symmetrize(recompose(&eig.vectors, &roots)))
}

fn clamp_psd<T: Real>(l: T) -> Result<T> {
    let x = to_f64(l);
    if x < -TOL.psd_fail {
        return Err(Error::NotPsd(x));
    }
    Ok(if x < 0.0 { T::zero() } else { l })
}

/// Matrix absolute value `|A| = √(AᵀA)` of a real antisymmetric matrix.
///
/// Computed from the Hermitian matrix `iA`, whose eigenvalues come in `±s`
/// pairs, so small singular values keep full precision.
pub fn abs_antisymmetric<T: Real>(a: &RMat<T>) -> Result<RMat<T>> {
    if !a.is_square() {
        return Err(Error::InvalidDimension("antisymmetric input must be square".into()));
    }
    let dev = max_abs_real(&(a + a.transpose()));
    if dev > TOL.antisym {
        return Err(Error::NotAntisymmetric(dev));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(RMat::zeros(0, 0));
    }
    let skew = (a - a.transpose()) * lit::<T>(0.5);
    let ia = HermMat::symmetrize(skew.map(|x| Complex::new(T::zero(), x)));
    let eig = herm_eig(&ia);
    let mags: Vec<T> = eig.values.iter().map(|l| l.abs()).collect();
    let full = recompose(&eig.vectors, &mags);
    let re = full.map(|z| z.re);
    Ok((&re + re.transpose()) * lit::<T>(0.5))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eig<T: Real>(m: &HermMat<T>) -> T {
    let eig = herm_eig(m);
    eig.values
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or(T::one()), |a, b| if b < a { b } else { a })
}

/// Smallest eigenvalue of a real symmetric matrix.
pub fn min_eig_real<T: Real>(m: &RMat<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    sym.symmetric_eigenvalues().min()
}

/// Kronecker product.
pub fn kron<T: Real>(a: &CMat<T>, b: &CMat<T>) -> CMat<T> {
    a.kronecker(b)
}

/// Kronecker product of vectors.
pub fn kron_vec<T: Real>(a: &CVec<T>, b: &CVec<T>) -> CVec<T> {
    a.kronecker(b)
}

/// Traces out the second factor of a `d_a·d_b` square matrix.
pub fn partial_trace_second<T: Real>(m: &CMat<T>, d_a: usize, d_b: usize) -> CMat<T> {
    CMat::from_fn(d_a, d_a, |i, j| {
        (0..d_b).fold(Complex::new(T::zero(), T::zero()), |acc, k| {
            acc + m[(i * d_b + k, j * d_b + k)]
        })
    })
}

/// Traces out the first factor of a `d_a·d_b` square matrix.
pub fn partial_trace_first<T: Real>(m: &CMat<T>, d_a: usize, d_b: usize) -> CMat<T> {
    CMat::from_fn(d_b, d_b, |i, j| {
        (0..d_a).fold(Complex::new(T::zero(), T::zero()), |acc, k| {
            acc + m[(k * d_b + i, k * d_b + j)]
        })
    })
}

/// `|v⟩⟨w|`.
pub fn outer<T: Real>(v: &CVec<T>, w: &CVec<T>) -> CMat<T> {
    v * w.adjoint()
}

/// `⟨v|w⟩`.
pub fn inner<T: Real>(v: &CVec<T>, w: &CVec<T>) -> Complex<T> {
    v.dotc(w)
}

/// `Tr(AB)` without forming the product.
pub fn trace_product<T: Real>(a: &CMat<T>, b: &CMat<T>) -> Complex<T> {
    let mut acc = Complex::new(T::zero(), T::zero());
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Real matrix embedded as a complex one.
pub fn complexify<T: Real>(m: &RMat<T>) -> CMat<T> {
    m.map(creal)
}

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
pub fn spd_solve<T: Real>(a: &RMat<T>, b: &RMat<T>) -> Result<RMat<T>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse<T: Real>(a: &RMat<T>) -> Result<RMat<T>> {
    let n = a.nrows();
    let inv = spd_solve(a, &RMat::identity(n, n))?;
    Ok((&inv + inv.transpose()) * lit::<T>(0.5))
}

/// Principal square root of a real symmetric PSD matrix.
pub fn sym_sqrt<T: Real>(a: &RMat<T>) -> Result<RMat<T>> {
    let h = psd_sqrt(&HermMat::from_real(a))?;
    let re = h.as_mat().map(|z| z.re);
    Ok((&re + re.transpose()) * lit::<T>(0.5))
}

/// `exp(-i H)` for Hermitian `H`.
pub fn expm_minus_i<T: Real>(h: &HermMat<T>) -> UnitaryMat<T> {
    let eig = herm_eig(h);
    let mut scaled = eig.vectors.clone();
    for (j, &l) in eig.values.iter().enumerate() {
        let phase = Complex::new(l.cos(), -l.sin());
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= phase;
        }
    }
    UnitaryMat(scaled * eig.vectors.adjoint())
}

/// Directional derivative of `A ↦ exp(-iA)` at Hermitian `A` along `E`.
///
/// Uses the Daleckii–Krein formula in the eigenbasis of `A`, with the
/// divided difference of `x ↦ e^{-ix}` on each eigenvalue pair.
pub fn expm_minus_i_derivative<T: Real>(a: &HermMat<T>, e: &CMat<T>) -> CMat<T> {
    let eig = herm_eig(a);
    let v = &eig.vectors;
    let lam = &eig.values;
    let n = a.dim();
    let e_eig = v.adjoint() * e * v;
    let f = |x: T| Complex::new(x.cos(), -x.sin());
    let mut g = CMat::<T>::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            let dl = lam[k] - lam[l];
            let dd = if to_f64(dl.abs()) < 1e-9 {
                let mid = (lam[k] + lam[l]) * lit(0.5);
                // f'(x) = -i e^{-ix}
                Complex::new(T::zero(), -T::one()) * f(mid)
            } else {
                (f(lam[k]) - f(lam[l])).unscale(dl)
            };
            g[(k, l)] = dd * e_eig[(k, l)];
        }
    }
    v * g * v.adjoint()
}

/// Hermitian part of a complex matrix split into real and imaginary parts.
pub fn re_im<T: Real>(m: &CMat<T>) -> (RMat<T>, RMat<T>) {
    (m.map(|z| z.re), m.map(|z| z.im))
}

/// Normalises a vector in place and returns its former norm.
pub fn normalize<T: Real>(v: &mut CVec<T>) -> T {
    let n = v.norm();
    if n > T::zero() {
        v.unscale_mut(n);
    }
    n
}

/// Orthonormal basis of the orthogonal complement of a nonzero vector.
pub fn complement_basis<T: Real>(v: &CVec<T>) -> Vec<CVec<T>> {
    let mut u = v.clone();
    normalize(&mut u);
    let proj = HermMat::symmetrize(&u * u.adjoint());
    let eig = herm_eig(&proj);
    // Ascending eigenvalues: all but the last span the complement.
    (0..v.len() - 1).map(|k| eig.vector(k)).collect()
}

/// `‖v‖₂` as `f64`.
pub fn norm_f64<T: Real>(v: &CVec<T>) -> f64 {
    to_f64(ComplexField::sqrt(v.norm_squared()))
}

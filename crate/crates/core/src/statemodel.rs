//! Parameterised mixed-state families, their gauge-fixed spectral calculus and
//! the purification with environment nuisance parameters.
//!
//! A family is any [`StateFamily`] implementation: a density matrix `ρ(θ)` and
//! its analytic partial derivatives on a bounded open parameter domain. The
//! [`spectral`] routine diagonalises `ρ(θ)` on its support and propagates the
//! derivatives to the eigen-pairs with first-order perturbation theory, and
//! [`purify`] assembles
//!
//! ```text
//! ψ(θ, φ) = Σ_j √λ_j(θ) e_j(θ) ⊗ exp(−i Σ_k φ_k H_k) Ǔ |j⟩
//! ```
//!
//! on the probe ⊗ environment space, ordered lexicographically
//! (probe index major).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::ComplexField;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    expm_minus_i, expm_minus_i_derivative, herm_eig, inner, max_abs, partial_trace_second, HermMat, UnitaryMat,
};
use crate::scalar::{cplx, creal, lit, to_f64, CMat, CVec, RMat, Real, TOL};

/// A parameterised density-matrix model with analytic first derivatives.
///
/// Implementations must be pure: the same `θ` always yields the same matrices.
pub trait StateFamily<T: Real>: Send + Sync {
    fn name(&self) -> String;
    /// Probe dimension `d`.
    fn dim(&self) -> usize;
    /// Rank `r`, constant over the domain.
    fn rank(&self) -> usize;
    /// Number of parameters `m`.
    fn num_params(&self) -> usize;
    /// Axis-aligned box enclosing the domain.
    fn bounds(&self) -> Vec<(f64, f64)>;
    /// Membership in the (open) domain; defaults to the open box.
    fn contains(&self, theta: &[T]) -> bool {
        theta.len() == self.num_params()
            && theta
                .iter()
                .zip(self.bounds())
                .all(|(&t, (lo, hi))| to_f64(t) > lo && to_f64(t) < hi)
    }
    fn rho(&self, theta: &[T]) -> CMat<T>;
    fn drho(&self, theta: &[T]) -> Vec<CMat<T>>;
}

impl<T: Real> fmt::Debug for dyn StateFamily<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(d={}, r={}, m={})",
            self.name(),
            self.dim(),
            self.rank(),
            self.num_params()
        )
    }
}

pub type SharedFamily<T> = Arc<dyn StateFamily<T>>;

/// A validated density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMat<T: Real>(HermMat<T>);

impl<T: Real> DensityMat<T> {
    pub fn new(m: CMat<T>) -> Result<Self> {
        let h = HermMat::new(m)?;
        let tr = to_f64(h.as_mat().trace().re);
        if (tr - 1.0).abs() > TOL.trace {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let eig = herm_eig(&h);
        if !eig.values.is_empty() && to_f64(eig.values[0]) < -TOL.psd_clamp {
            return Err(Error::NotPsd(to_f64(eig.values[0])));
        }
        Ok(DensityMat(h))
    }

    pub fn as_mat(&self) -> &CMat<T> {
        self.0.as_mat()
    }

    pub fn herm(&self) -> &HermMat<T> {
        &self.0
    }
}

/// Evaluates and validates `ρ(θ)`.
pub fn density_at<T: Real>(family: &dyn StateFamily<T>, theta: &[T]) -> Result<DensityMat<T>> {
    check_domain(family, theta)?;
    DensityMat::new(family.rho(theta))
}

/// Largest entry of `∂ρ − (ρ(θ + h e_i) − ρ(θ − h e_i)) / 2h` over all `i`.
pub fn derivative_defect<T: Real>(family: &dyn StateFamily<T>, theta: &[T], h: f64) -> f64 {
    let analytic = family.drho(theta);
    let step = lit::<T>(h);
    let mut worst = 0.0f64;
    for (i, an) in analytic.iter().enumerate() {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += step;
        tm[i] -= step;
        let fd = (family.rho(&tp) - family.rho(&tm)) * creal(lit::<T>(0.5 / h));
        worst = worst.max(max_abs(&(fd - an)));
    }
    worst
}

pub fn check_domain<T: Real>(family: &dyn StateFamily<T>, theta: &[T]) -> Result<()> {
    if theta.len() != family.num_params() {
        return Err(Error::InvalidDimension(format!(
            "{} expects {} parameters, got {}",
            family.name(),
            family.num_params(),
            theta.len()
        )));
    }
    if !family.contains(theta) {
        return Err(Error::OutsideDomain(theta.iter().map(|&t| to_f64(t)).collect()));
    }
    Ok(())
}

fn pauli<T: Real>() -> [CMat<T>; 3] {
    let z = T::zero();
    let o = T::one();
    [
        CMat::from_row_slice(2, 2, &[cplx(z, z), cplx(o, z), cplx(o, z), cplx(z, z)]),
        CMat::from_row_slice(2, 2, &[cplx(z, z), cplx(z, -o), cplx(z, o), cplx(z, z)]),
        CMat::from_row_slice(2, 2, &[cplx(o, z), cplx(z, z), cplx(z, z), cplx(-o, z)]),
    ]
}

fn bloch_state<T: Real>(r: [T; 3]) -> CMat<T> {
    let p = pauli::<T>();
    let half = creal(lit::<T>(0.5));
    let mut m = CMat::identity(2, 2);
    for k in 0..3 {
        m += &p[k] * creal(r[k]);
    }
    m * half
}

fn ball_shell_contains<T: Real>(r: [T; 3]) -> bool {
    let n = r.iter().map(|&x| to_f64(x).powi(2)).sum::<f64>().sqrt();
    n > 0.15 && n < 0.85
}

/// Qubit `ρ = (1 + θ·σ)/2` on the shell `0.15 < ‖θ‖ < 0.85`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bloch3;

impl<T: Real> StateFamily<T> for Bloch3 {
    fn name(&self) -> String {
        "bloch3".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn rank(&self) -> usize {
        2
    }
    fn num_params(&self) -> usize {
        3
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-0.85, 0.85); 3]
    }
    fn contains(&self, theta: &[T]) -> bool {
        theta.len() == 3 && ball_shell_contains([theta[0], theta[1], theta[2]])
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        bloch_state([theta[0], theta[1], theta[2]])
    }
    fn drho(&self, _theta: &[T]) -> Vec<CMat<T>> {
        let half = creal(lit::<T>(0.5));
        pauli::<T>().into_iter().map(|p| p * half).collect()
    }
}

/// [`Bloch3`] with the third Bloch coordinate frozen.
#[derive(Debug, Clone, Copy)]
pub struct Bloch2 {
    pub theta3: f64,
}

impl Default for Bloch2 {
    fn default() -> Self {
        Bloch2 { theta3: 0.5 }
    }
}

impl<T: Real> StateFamily<T> for Bloch2 {
    fn name(&self) -> String {
        "bloch2".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn rank(&self) -> usize {
        2
    }
    fn num_params(&self) -> usize {
        2
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-0.85, 0.85); 2]
    }
    fn contains(&self, theta: &[T]) -> bool {
        theta.len() == 2 && ball_shell_contains([theta[0], theta[1], lit(self.theta3)])
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        bloch_state([theta[0], theta[1], lit(self.theta3)])
    }
    fn drho(&self, _theta: &[T]) -> Vec<CMat<T>> {
        let half = creal(lit::<T>(0.5));
        pauli::<T>().into_iter().take(2).map(|p| p * half).collect()
    }
}

/// Diagonal state on `d` levels with the first `d − 1` probabilities free.
#[derive(Debug, Clone, Copy)]
pub struct Simplex {
    pub d: usize,
}

impl Simplex {
    /// Smallest admissible probability.
    pub const MIN_PROB: f64 = 0.02;
    /// Smallest admissible separation between probabilities.
    pub const MIN_SEPARATION: f64 = 0.01;

    fn probs<T: Real>(&self, theta: &[T]) -> Vec<T> {
        let mut p: Vec<T> = theta.to_vec();
        let last = theta.iter().fold(T::one(), |acc, &t| acc - t);
        p.push(last);
        p
    }
}

impl<T: Real> StateFamily<T> for Simplex {
    fn name(&self) -> String {
        format!("simplex({})", self.d)
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn rank(&self) -> usize {
        self.d
    }
    fn num_params(&self) -> usize {
        self.d - 1
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.d - 1]
    }
    fn contains(&self, theta: &[T]) -> bool {
        if theta.len() != self.d - 1 {
            return false;
        }
        let p: Vec<f64> = self.probs(theta).into_iter().map(to_f64).collect();
        if p.iter().any(|&x| x <= Self::MIN_PROB) {
            return false;
        }
        p.iter()
            .enumerate()
            .all(|(i, a)| p[i + 1..].iter().all(|b| (a - b).abs() > Self::MIN_SEPARATION))
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        let p = self.probs(theta);
        CMat::from_fn(
            self.d,
            self.d,
            |i, j| if i == j { creal(p[i]) } else { creal(T::zero()) },
        )
    }
    fn drho(&self, _theta: &[T]) -> Vec<CMat<T>> {
        (0..self.d - 1)
            .map(|k| {
                let mut m = CMat::zeros(self.d, self.d);
                m[(k, k)] = creal(T::one());
                m[(self.d - 1, self.d - 1)] = creal(-T::one());
                m
            })
            .collect()
    }
}

/// [`Bloch3`] embedded in the upper 2×2 block of a qutrit (rank 2 < d = 3).
#[derive(Debug, Clone, Copy, Default)]
pub struct QutritEmbed;

fn embed3<T: Real>(m: &CMat<T>) -> CMat<T> {
    let mut out = CMat::zeros(3, 3);
    out.view_mut((0, 0), (2, 2)).copy_from(m);
    out
}

impl<T: Real> StateFamily<T> for QutritEmbed {
    fn name(&self) -> String {
        "qutrit_embed".into()
    }
    fn dim(&self) -> usize {
        3
    }
    fn rank(&self) -> usize {
        2
    }
    fn num_params(&self) -> usize {
        3
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(-0.85, 0.85); 3]
    }
    fn contains(&self, theta: &[T]) -> bool {
        StateFamily::<T>::contains(&Bloch3, theta)
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        embed3(&StateFamily::<T>::rho(&Bloch3, theta))
    }
    fn drho(&self, theta: &[T]) -> Vec<CMat<T>> {
        StateFamily::<T>::drho(&Bloch3, theta).iter().map(embed3).collect()
    }
}

/// Pure qubit `ψ(θ) = (cos θ₁, e^{iθ₂} sin θ₁)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PurePhase;

impl PurePhase {
    pub fn psi<T: Real>(theta: &[T]) -> CVec<T> {
        let (a, b) = (theta[0], theta[1]);
        CVec::from_vec(vec![creal(a.cos()), cplx(b.cos() * a.sin(), b.sin() * a.sin())])
    }

    pub fn dpsi<T: Real>(theta: &[T]) -> Vec<CVec<T>> {
        let (a, b) = (theta[0], theta[1]);
        vec![
            CVec::from_vec(vec![creal(-a.sin()), cplx(b.cos() * a.cos(), b.sin() * a.cos())]),
            CVec::from_vec(vec![creal(T::zero()), cplx(-b.sin() * a.sin(), b.cos() * a.sin())]),
        ]
    }
}

impl<T: Real> StateFamily<T> for PurePhase {
    fn name(&self) -> String {
        "pure_phase".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn rank(&self) -> usize {
        1
    }
    fn num_params(&self) -> usize {
        2
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.1, PI / 2.0 - 0.1), (-PI + 0.1, PI - 0.1)]
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        let psi = Self::psi(theta);
        &psi * psi.adjoint()
    }
    fn drho(&self, theta: &[T]) -> Vec<CMat<T>> {
        let psi = Self::psi(theta);
        Self::dpsi(theta)
            .iter()
            .map(|d| d * psi.adjoint() + &psi * d.adjoint())
            .collect()
    }
}

/// A family re-expressed in linear coordinates `θ' = Bθ`.
pub struct Reparameterized<T: Real> {
    inner: SharedFamily<T>,
    forward: RMat<T>,
    inverse: RMat<T>,
}

impl<T: Real> Reparameterized<T> {
    pub fn new(inner: SharedFamily<T>, b: RMat<T>) -> Result<Self> {
        let m = inner.num_params();
        if b.nrows() != m || b.ncols() != m {
            return Err(Error::InvalidDimension(format!("reparameterisation must be {m}x{m}")));
        }
        let inverse = b
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::IllConditioned("reparameterisation is singular".into()))?;
        Ok(Self {
            inner,
            forward: b,
            inverse,
        })
    }

    /// `θ = B⁻¹ θ'`.
    pub fn inner_coords(&self, theta: &[T]) -> Vec<T> {
        let v = &self.inverse * nalgebra::DVector::from_column_slice(theta);
        v.iter().copied().collect()
    }

    /// `θ' = B θ`.
    pub fn outer_coords(&self, theta: &[T]) -> Vec<T> {
        let v = &self.forward * nalgebra::DVector::from_column_slice(theta);
        v.iter().copied().collect()
    }
}

impl<T: Real> StateFamily<T> for Reparameterized<T> {
    fn name(&self) -> String {
        format!("linear({})", self.inner.name())
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn rank(&self) -> usize {
        self.inner.rank()
    }
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        // Image of the inner box under B.
        let inner = self.inner.bounds();
        (0..self.num_params())
            .map(|i| {
                let (mut lo, mut hi) = (0.0, 0.0);
                for (j, (a, b)) in inner.iter().enumerate() {
                    let c = to_f64(self.forward[(i, j)]);
                    lo += (c * a).min(c * b);
                    hi += (c * a).max(c * b);
                }
                (lo, hi)
            })
            .collect()
    }
    fn contains(&self, theta: &[T]) -> bool {
        theta.len() == self.num_params() && self.inner.contains(&self.inner_coords(theta))
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        self.inner.rho(&self.inner_coords(theta))
    }
    fn drho(&self, theta: &[T]) -> Vec<CMat<T>> {
        let d = self.inner.drho(&self.inner_coords(theta));
        (0..self.num_params())
            .map(|j| {
                let mut acc = CMat::zeros(self.dim(), self.dim());
                for (k, dk) in d.iter().enumerate() {
                    acc += dk * creal(self.inverse[(k, j)]);
                }
                acc
            })
            .collect()
    }
}

/// Wraps a family and scales one analytic derivative, leaving `ρ` untouched.
///
/// Only useful as a negative control: the resulting derivatives are wrong.
pub struct PerturbedDerivative<T: Real> {
    pub inner: SharedFamily<T>,
    pub index: usize,
    pub factor: f64,
}

impl<T: Real> StateFamily<T> for PerturbedDerivative<T> {
    fn name(&self) -> String {
        format!("perturbed({})", self.inner.name())
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn rank(&self) -> usize {
        self.inner.rank()
    }
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        self.inner.bounds()
    }
    fn contains(&self, theta: &[T]) -> bool {
        self.inner.contains(theta)
    }
    fn rho(&self, theta: &[T]) -> CMat<T> {
        self.inner.rho(theta)
    }
    fn drho(&self, theta: &[T]) -> Vec<CMat<T>> {
        let mut d = self.inner.drho(theta);
        if let Some(m) = d.get_mut(self.index) {
            *m *= creal(lit::<T>(self.factor));
        }
        d
    }
}

/// Fixed parameters accepted by [`builtin_family`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyParams {
    /// Dimension for `simplex`.
    pub d: Option<usize>,
    /// Frozen third coordinate for `bloch2`.
    pub theta3: Option<f64>,
}

/// Names accepted by [`builtin_family`].
pub const BUILTIN_FAMILIES: [&str; 5] = ["bloch3", "bloch2", "simplex", "qutrit_embed", "pure_phase"];

/// Instantiates a built-in family by name.
///
/// `simplex` takes its dimension either from `params.d` or from the
/// `simplex(d)` spelling.
pub fn builtin_family<T: Real>(name: &str, params: FamilyParams) -> Result<SharedFamily<T>> {
    let name = name.trim();
    if let Some(inner) = name.strip_prefix("simplex(").and_then(|s| s.strip_suffix(')')) {
        let d: usize = inner
            .trim()
            .parse()
            .map_err(|_| Error::UnknownFamily(name.to_string()))?;
        if params.d.is_some_and(|pd| pd != d) {
            return Err(Error::Validation(format!(
                "simplex dimension {d} conflicts with d = {:?}",
                params.d
            )));
        }
        return builtin_family("simplex", FamilyParams { d: Some(d), ..params });
    }
    match name {
        "bloch3" => Ok(Arc::new(Bloch3)),
        "bloch2" => {
            let theta3 = params.theta3.unwrap_or(0.5);
            if theta3.is_nan() || theta3.abs() >= 0.85 {
                return Err(Error::Validation(format!(
                    "bloch2 theta3 = {theta3} outside (-0.85, 0.85)"
                )));
            }
            Ok(Arc::new(Bloch2 { theta3 }))
        }
        "simplex" => {
            let d = params
                .d
                .ok_or_else(|| Error::Validation("simplex requires the dimension `d`".into()))?;
            // Distinct probabilities above the floor must fit in the unit interval.
            if !(2..=20).contains(&d) {
                return Err(Error::Validation(format!("simplex dimension {d} outside 2..=20")));
            }
            Ok(Arc::new(Simplex { d }))
        }
        "qutrit_embed" => Ok(Arc::new(QutritEmbed)),
        "pure_phase" => Ok(Arc::new(PurePhase)),
        other => Err(Error::UnknownFamily(other.to_string())),
    }
}

/// Eigen-data of `ρ(θ)` on its support with gauge-fixed derivatives.
#[derive(Debug, Clone)]
pub struct SpectralData<T: Real> {
    /// Positive eigenvalues, descending.
    pub values: Vec<T>,
    /// Matching orthonormal eigenvectors.
    pub vectors: Vec<CVec<T>>,
    /// Orthonormal basis of the kernel.
    pub null_vectors: Vec<CVec<T>>,
    /// `∂λ_j/∂θ_i` stored as `r × m`.
    pub dvalues: RMat<T>,
    /// `∂e_j/∂θ_i` stored as `dvectors[j][i]`, with `⟨e_j|∂e_j⟩ = 0`.
    pub dvectors: Vec<Vec<CVec<T>>>,
    /// Component of each eigenvector that was made real-positive.
    pub pivots: Vec<usize>,
    /// `∂ρ/∂θ_i`.
    pub drho: Vec<CMat<T>>,
}

impl<T: Real> SpectralData<T> {
    pub fn dim(&self) -> usize {
        self.drho.first().map_or_else(|| self.vectors[0].len(), |m| m.nrows())
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn num_params(&self) -> usize {
        self.drho.len()
    }

    /// `Σ λ_j e_j e_j†`.
    pub fn rho(&self) -> CMat<T> {
        let d = self.dim();
        let mut m = CMat::zeros(d, d);
        for (l, e) in self.values.iter().zip(&self.vectors) {
            m += e * e.adjoint() * creal(*l);
        }
        m
    }

    /// Projector onto the support.
    pub fn support_projector(&self) -> CMat<T> {
        let d = self.dim();
        let mut m = CMat::zeros(d, d);
        for e in &self.vectors {
            m += e * e.adjoint();
        }
        m
    }

    /// Multiplies each eigenvector (and its derivative) by `e^{iα_j}`.
    ///
    /// The result describes the same state in a different eigenvector gauge;
    /// `⟨e_j|∂e_j⟩ = 0` is preserved.
    pub fn rephased(&self, phases: &[T]) -> SpectralData<T> {
        let mut out = self.clone();
        for (j, &a) in phases.iter().enumerate().take(self.rank()) {
            let ph = cplx(a.cos(), a.sin());
            out.vectors[j] *= ph;
            for v in out.dvectors[j].iter_mut() {
                *v *= ph;
            }
        }
        out
    }

    /// Largest entry of `∂_iρ − Σ_j(∂λ e e† + λ ∂e e† + λ e ∂e†)` over `i`.
    pub fn first_order_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, target) in self.drho.iter().enumerate() {
            let mut m = CMat::zeros(self.dim(), self.dim());
            for j in 0..self.rank() {
                let e = &self.vectors[j];
                let de = &self.dvectors[j][i];
                let l = creal(self.values[j]);
                m += e * e.adjoint() * creal(self.dvalues[(j, i)]);
                m += (de * e.adjoint() + e * de.adjoint()) * l;
            }
            worst = worst.max(max_abs(&(target - m)));
        }
        worst
    }

    /// Derivative of each eigenvector in the gauge where the pivot component
    /// stays real, i.e. the true derivative of the phase-fixed eigenvector.
    pub fn pivot_gauge_dvector(&self, j: usize, i: usize) -> CVec<T> {
        let e = &self.vectors[j];
        let de = &self.dvectors[j][i];
        let p = self.pivots[j];
        let ep = e[p];
        let a = -(ep.conj() * de[p]).im / ep.norm_sqr();
        de + e * cplx(T::zero(), a)
    }
}

/// Spectral data of a family at `θ`.
pub fn spectral<T: Real>(family: &dyn StateFamily<T>, theta: &[T]) -> Result<SpectralData<T>> {
    check_domain(family, theta)?;
    let rho = DensityMat::new(family.rho(theta))?;
    spectral_of(&rho, family.drho(theta), family.rank())
}

/// Spectral data of an explicit density matrix and its derivatives.
pub fn spectral_of<T: Real>(rho: &DensityMat<T>, drho: Vec<CMat<T>>, rank: usize) -> Result<SpectralData<T>> {
    let d = rho.as_mat().nrows();
    let eig = herm_eig(rho.herm());
    let found = eig.values.iter().filter(|&&l| to_f64(l) > TOL.rank).count();
    if found != rank {
        return Err(Error::RankMismatch { expected: rank, found });
    }
    // Descending order: largest eigenvalue first.
    let order: Vec<usize> = (0..d).rev().collect();
    let values: Vec<T> = order[..rank].iter().map(|&k| eig.values[k]).collect();
    for j in 1..rank {
        let gap = to_f64(values[j - 1] - values[j]);
        if gap < TOL.gap {
            return Err(Error::Degenerate {
                first: j - 1,
                second: j,
                gap,
            });
        }
    }
    let mut vectors = Vec::with_capacity(rank);
    let mut pivots = Vec::with_capacity(rank);
    for &k in &order[..rank] {
        let mut v = eig.vector(k);
        let p = largest_pivot(&v);
        let z = v[p];
        v *= z.conj().unscale(z.modulus());
        vectors.push(v);
        pivots.push(p);
    }
    let null_vectors: Vec<CVec<T>> = order[rank..].iter().map(|&k| eig.vector(k)).collect();

    let m = drho.len();
    let mut dvalues = RMat::zeros(rank, m);
    let mut dvectors = vec![Vec::with_capacity(m); rank];
    for (i, dr) in drho.iter().enumerate() {
        for j in 0..rank {
            let ej = &vectors[j];
            let de_ej = dr * ej;
            dvalues[(j, i)] = inner(ej, &de_ej).re;
            let mut acc = CVec::zeros(d);
            for (k, ek) in vectors.iter().enumerate() {
                if k == j {
                    continue;
                }
                let coeff = inner(ek, &de_ej).unscale(values[j] - values[k]);
                acc += ek * coeff;
            }
            for ek in &null_vectors {
                let coeff = inner(ek, &de_ej).unscale(values[j]);
                acc += ek * coeff;
            }
            dvectors[j].push(acc);
        }
    }
    Ok(SpectralData {
        values,
        vectors,
        null_vectors,
        dvalues,
        dvectors,
        pivots,
        drho,
    })
}

fn largest_pivot<T: Real>(v: &CVec<T>) -> usize {
    let best = v.iter().map(|z| to_f64(z.modulus())).fold(0.0, f64::max);
    v.iter()
        .position(|z| to_f64(z.modulus()) >= best * (1.0 - 1e-9))
        .unwrap_or(0)
}

/// Generalised Gell-Mann basis of traceless Hermitian `r × r` matrices,
/// normalised to `Tr(H_i H_j) = 2δ_ij`.
///
/// Ordered as (symmetric, antisymmetric) pairs for each `j < k`, then the
/// diagonal generators; for `r = 2` this is `(σx, σy, σz)`.
pub fn gellmann_generators<T: Real>(r: usize) -> Vec<HermMat<T>> {
    let mut out = Vec::with_capacity(r * r - 1);
    let o = T::one();
    for j in 0..r {
        for k in j + 1..r {
            let mut s = CMat::zeros(r, r);
            s[(j, k)] = creal(o);
            s[(k, j)] = creal(o);
            out.push(HermMat::symmetrize(s));
            let mut a = CMat::zeros(r, r);
            a[(j, k)] = cplx(T::zero(), -o);
            a[(k, j)] = cplx(T::zero(), o);
            out.push(HermMat::symmetrize(a));
        }
    }
    for l in 1..r {
        let scale = lit::<T>((2.0 / (l * (l + 1)) as f64).sqrt());
        let mut dgn = CMat::zeros(r, r);
        for j in 0..l {
            dgn[(j, j)] = creal(scale);
        }
        dgn[(l, l)] = creal(-scale * lit::<T>(l as f64));
        out.push(HermMat::symmetrize(dgn));
    }
    out
}

/// The purified family `ψ(θ, φ)` with environment frame `Ǔ`.
#[derive(Clone)]
pub struct PurifiedFamily<T: Real> {
    family: SharedFamily<T>,
    env: UnitaryMat<T>,
    generators: Vec<HermMat<T>>,
    phases: Option<Vec<T>>,
}

impl<T: Real> fmt::Debug for PurifiedFamily<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PurifiedFamily")
            .field("family", &self.family.name())
            .field("dims", &self.dims())
            .finish()
    }
}

/// `(d, r, m, m*)` of a purified family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PurifiedDims {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub m_star: usize,
}

impl PurifiedDims {
    pub fn joint(&self) -> usize {
        self.d * self.r
    }
}

/// Purifies `family` with environment frame `env`, checking that the spectrum
/// at `θ` is regular.
pub fn purify<T: Real>(family: SharedFamily<T>, theta: &[T], env: UnitaryMat<T>) -> Result<PurifiedFamily<T>> {
    if env.dim() != family.rank() {
        return Err(Error::InvalidDimension(format!(
            "environment unitary is {}x{}, rank is {}",
            env.dim(),
            env.dim(),
            family.rank()
        )));
    }
    spectral(family.as_ref(), theta)?;
    let generators = gellmann_generators(family.rank());
    Ok(PurifiedFamily {
        family,
        env,
        generators,
        phases: None,
    })
}

/// `Σ_j √λ_j e_j ⊗ U|j⟩`.
pub fn schmidt_state<T: Real>(sd: &SpectralData<T>, env: &CMat<T>) -> CVec<T> {
    let d = sd.dim();
    let r = sd.rank();
    let mut psi = CVec::zeros(d * r);
    for j in 0..r {
        let col = env.column(j).into_owned();
        psi += sd.vectors[j].kronecker(&col) * creal(sd.values[j].sqrt());
    }
    psi
}

impl<T: Real> PurifiedFamily<T> {
    pub fn family(&self) -> &SharedFamily<T> {
        &self.family
    }

    pub fn env(&self) -> &UnitaryMat<T> {
        &self.env
    }

    pub fn generators(&self) -> &[HermMat<T>] {
        &self.generators
    }

    pub fn dims(&self) -> PurifiedDims {
        let r = self.family.rank();
        let m = self.family.num_params();
        PurifiedDims {
            d: self.family.dim(),
            r,
            m,
            m_star: m + r * r - 1,
        }
    }

    /// Same family with a different environment frame.
    pub fn with_env(&self, env: UnitaryMat<T>) -> Self {
        Self { env, ..self.clone() }
    }

    /// Same family with the eigenvectors multiplied by fixed phases `e^{iα_j}`.
    pub fn with_eigen_phases(&self, phases: Vec<T>) -> Self {
        Self {
            phases: Some(phases),
            ..self.clone()
        }
    }

    fn spectral_at(&self, theta: &[T]) -> Result<SpectralData<T>> {
        let sd = spectral(self.family.as_ref(), theta)?;
        Ok(match &self.phases {
            Some(p) => sd.rephased(p),
            None => sd,
        })
    }

    fn nuisance_generator(&self, phi: &[T]) -> Result<HermMat<T>> {
        let r = self.family.rank();
        if phi.len() != self.generators.len() {
            return Err(Error::InvalidDimension(format!(
                "expected {} nuisance parameters, got {}",
                self.generators.len(),
                phi.len()
            )));
        }
        let mut a = CMat::zeros(r, r);
        for (h, &p) in self.generators.iter().zip(phi) {
            a += h.as_mat() * creal(p);
        }
        Ok(HermMat::symmetrize(a))
    }

    /// Environment frame `exp(−i Σ φ_k H_k) Ǔ`.
    pub fn env_at(&self, phi: &[T]) -> Result<UnitaryMat<T>> {
        let a = self.nuisance_generator(phi)?;
        Ok(expm_minus_i(&a).compose(&self.env))
    }

    pub fn psi_at(&self, theta: &[T], phi: &[T]) -> Result<CVec<T>> {
        let sd = self.spectral_at(theta)?;
        Ok(schmidt_state(&sd, self.env_at(phi)?.as_mat()))
    }

    /// `ψ(θ, φ)` together with its `m*` partial derivatives, `θ` first.
    pub fn state_and_derivatives(&self, theta: &[T], phi: &[T]) -> Result<(CVec<T>, Vec<CVec<T>>)> {
        let sd = self.spectral_at(theta)?;
        let a = self.nuisance_generator(phi)?;
        let frame = expm_minus_i(&a).compose(&self.env);
        let psi = schmidt_state(&sd, frame.as_mat());
        let (d, r) = (sd.dim(), sd.rank());
        let mut derivs = Vec::with_capacity(self.dims().m_star);
        for i in 0..sd.num_params() {
            let mut v = CVec::zeros(d * r);
            for j in 0..r {
                let col = frame.as_mat().column(j).into_owned();
                let sq = sd.values[j].sqrt();
                let de = sd.pivot_gauge_dvector(j, i);
                let probe = &sd.vectors[j] * creal(sd.dvalues[(j, i)] / (sq + sq)) + de * creal(sq);
                v += probe.kronecker(&col);
            }
            derivs.push(v);
        }
        for h in &self.generators {
            let dframe = expm_minus_i_derivative(&a, h.as_mat()) * self.env.as_mat();
            let mut v = CVec::zeros(d * r);
            for j in 0..r {
                let col = dframe.column(j).into_owned();
                v += sd.vectors[j].kronecker(&col) * creal(sd.values[j].sqrt());
            }
            derivs.push(v);
        }
        Ok((psi, derivs))
    }

    pub fn dpsi_at(&self, theta: &[T], phi: &[T]) -> Result<Vec<CVec<T>>> {
        Ok(self.state_and_derivatives(theta, phi)?.1)
    }

    /// `Tr_E |ψ⟩⟨ψ|`.
    pub fn reduced_probe(&self, theta: &[T], phi: &[T]) -> Result<CMat<T>> {
        let psi = self.psi_at(theta, phi)?;
        let dims = self.dims();
        Ok(partial_trace_second(&(&psi * psi.adjoint()), dims.d, dims.r))
    }

    pub fn zero_nuisance(&self) -> Vec<T> {
        vec![T::zero(); self.generators.len()]
    }
}

/// `exp(−i Σ a_k H_k) U₀` for generator coordinates `a`.
pub fn env_from_coords<T: Real>(generators: &[HermMat<T>], coords: &[T], base: &UnitaryMat<T>) -> UnitaryMat<T> {
    let r = base.dim();
    let mut a = CMat::zeros(r, r);
    for (h, &c) in generators.iter().zip(coords) {
        a += h.as_mat() * creal(c);
    }
    expm_minus_i(&HermMat::symmetrize(a)).compose(base)
}

/// Unit-modulus complex number `e^{iα}`.
pub fn phase<T: Real>(alpha: T) -> Complex<T> {
    cplx(ComplexField::cos(alpha), ComplexField::sin(alpha))
}

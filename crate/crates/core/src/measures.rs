//! Locally optimal single-copy measurements on the purified model and the
//! random-basis shadow measurement.

use num_complex::Complex;
use rand::Rng;

use crate::bounds::{hcrb, BoundResult, HcrbData, HermBasis};
use crate::error::{Error, Result};
use crate::infomet::{
    cfim, cfim_from_probs, completeness_defect, completeness_defect_vectors, CfimReport, FisherMatrix,
};
use crate::numkit::{
    abs_antisymmetric, complement_basis, complexify, haar_unitary, inner, max_abs, min_eig, normalize, pd_inv_sqrt,
    psd_sqrt, HermMat,
};
use crate::scalar::{cplx, creal, lit, to_f64, CMat, CVec, RMat, RVec, Real, TOL};
use crate::statemodel::{PurifiedFamily, StateFamily};

/// Regularisation added to the weight before cancelling `Im Z`.
pub const COMPLETION_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum Effects<T: Real> {
    /// `M_ℓ = |b_ℓ⟩⟨b_ℓ|`.
    RankOne(Vec<CVec<T>>),
    General(Vec<CMat<T>>),
}

/// A POVM on a `dim`-dimensional space.
#[derive(Clone, Debug)]
pub struct Povm<T: Real> {
    dim: usize,
    effects: Effects<T>,
}

impl<T: Real> Povm<T> {
    pub fn rank_one(vectors: Vec<CVec<T>>) -> Result<Self> {
        let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
        let povm = Povm {
            dim,
            effects: Effects::RankOne(vectors),
        };
        povm.validate()?;
        Ok(povm)
    }

    pub fn general(effects: Vec<CMat<T>>) -> Result<Self> {
        let dim = effects.first().map(|m| m.nrows()).unwrap_or(0);
        let povm = Povm {
            dim,
            effects: Effects::General(effects),
        };
        povm.validate()?;
        Ok(povm)
    }

    /// Checks shapes, positivity and completeness.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidDimension("empty POVM".into()));
        }
        match &self.effects {
            Effects::RankOne(vs) => {
                if vs.iter().any(|v| v.len() != self.dim) {
                    return Err(Error::InvalidDimension("effect vectors of unequal length".into()));
                }
            }
            Effects::General(ms) => {
                for m in ms {
                    if m.nrows() != self.dim || m.ncols() != self.dim {
                        return Err(Error::InvalidDimension("effects of unequal shape".into()));
                    }
                    if max_abs(&(m - m.adjoint())) > TOL.hermitian {
                        return Err(Error::NotHermitian(max_abs(&(m - m.adjoint()))));
                    }
                    let lo = to_f64(min_eig(&HermMat::symmetrize(m.clone())));
                    if lo < -TOL.psd_clamp {
                        return Err(Error::NotPsd(lo));
                    }
                }
            }
        }
        let defect = self.completeness_defect();
        if defect > TOL.povm {
            return Err(Error::IncompletePovm(defect));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_outcomes(&self) -> usize {
        match &self.effects {
            Effects::RankOne(vs) => vs.len(),
            Effects::General(ms) => ms.len(),
        }
    }

    pub fn effects(&self) -> &Effects<T> {
        &self.effects
    }

    pub fn effect_matrices(&self) -> Vec<CMat<T>> {
        match &self.effects {
            Effects::RankOne(vs) => vs.iter().map(|v| v * v.adjoint()).collect(),
            Effects::General(ms) => ms.clone(),
        }
    }

    /// `‖Σ M_ℓ − 𝟙‖` (largest entry).
    pub fn completeness_defect(&self) -> f64 {
        match &self.effects {
            Effects::RankOne(vs) => completeness_defect_vectors(vs, self.dim),
            Effects::General(ms) => completeness_defect(ms, self.dim),
        }
    }

    /// A copy with effect `index` scaled by `factor`, skipping validation.
    pub fn scaled_unchecked(&self, index: usize, factor: f64) -> Self {
        let mut out = self.clone();
        match &mut out.effects {
            Effects::RankOne(vs) => vs[index] *= creal(lit::<T>(factor.sqrt())),
            Effects::General(ms) => ms[index] *= creal(lit::<T>(factor)),
        }
        out
    }

    /// Outcome probabilities for a pure state.
    pub fn probabilities(&self, psi: &CVec<T>) -> Vec<T> {
        match &self.effects {
            Effects::RankOne(vs) => vs.iter().map(|b| inner(b, psi).norm_sqr()).collect(),
            Effects::General(ms) => ms.iter().map(|m| inner(psi, &(m * psi)).re).collect(),
        }
    }

    /// Probabilities and their derivatives `∂_j p_ℓ` for a pure state.
    pub fn probabilities_and_derivatives(&self, psi: &CVec<T>, dpsi: &[CVec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
        let two = lit::<T>(2.0);
        let mut p = Vec::with_capacity(self.num_outcomes());
        let mut dp = Vec::with_capacity(self.num_outcomes());
        match &self.effects {
            Effects::RankOne(vs) => {
                for b in vs {
                    let amp = inner(b, psi);
                    p.push(amp.norm_sqr());
                    dp.push(dpsi.iter().map(|d| (amp.conj() * inner(b, d)).re * two).collect());
                }
            }
            Effects::General(ms) => {
                for m in ms {
                    let mpsi = m * psi;
                    p.push(inner(psi, &mpsi).re);
                    dp.push(dpsi.iter().map(|d| inner(d, &mpsi).re * two).collect());
                }
            }
        }
        (p, dp)
    }

    /// Classical Fisher information for a pure-state model.
    pub fn fisher_pure(&self, psi: &CVec<T>, dpsi: &[CVec<T>]) -> (FisherMatrix<T>, CfimReport) {
        let (p, dp) = self.probabilities_and_derivatives(psi, dpsi);
        cfim_from_probs(&p, &dp, dpsi.len())
    }

    /// Classical Fisher information for a mixed-state model.
    pub fn fisher_mixed(&self, rho: &CMat<T>, drho: &[CMat<T>]) -> Result<(FisherMatrix<T>, CfimReport)> {
        cfim(&self.effect_matrices(), rho, drho)
    }

    /// Samples an outcome index for a pure state.
    pub fn sample<R: Rng + ?Sized>(&self, psi: &CVec<T>, rng: &mut R) -> usize {
        let p: Vec<f64> = self.probabilities(psi).into_iter().map(to_f64).collect();
        sample_index(&p, rng)
    }
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w.max(0.0);
        if u < 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Outcome-indexed parameter estimates around a reference point.
#[derive(Clone, Debug)]
pub struct EstimatorTable<T: Real> {
    /// Row `ℓ` is the estimate for outcome `ℓ`.
    estimates: RMat<T>,
    reference: RVec<T>,
    clip_radius: f64,
    clipped: usize,
}

impl<T: Real> EstimatorTable<T> {
    /// Table without clipping. Fails on non-finite entries.
    pub fn new(estimates: RMat<T>, reference: RVec<T>) -> Result<Self> {
        if estimates.ncols() != reference.len() {
            return Err(Error::InvalidDimension(
                "estimate width differs from reference length".into(),
            ));
        }
        if estimates.iter().any(|x| !to_f64(*x).is_finite()) {
            return Err(Error::Validation("non-finite estimate".into()));
        }
        let radius = (0..estimates.nrows())
            .map(|l| to_f64((estimates.row(l).transpose() - &reference).norm()))
            .fold(0.0, f64::max);
        Ok(EstimatorTable {
            estimates,
            reference,
            clip_radius: radius,
            clipped: 0,
        })
    }

    /// Clips the first `split` coordinates and the rest separately, each to
    /// `radius/√2` around the reference, so the whole row stays within `radius`.
    pub fn clipped(mut self, split: usize, radius: f64) -> Self {
        let half = radius / std::f64::consts::SQRT_2;
        let m = self.reference.len();
        let mut clipped = 0;
        for l in 0..self.estimates.nrows() {
            let mut touched = false;
            for (lo, hi) in [(0, split.min(m)), (split.min(m), m)] {
                if lo == hi {
                    continue;
                }
                let dev: RVec<T> = RVec::from_fn(hi - lo, |i, _| self.estimates[(l, lo + i)] - self.reference[lo + i]);
                let norm = to_f64(dev.norm());
                if norm > half {
                    let s = lit::<T>(half / norm);
                    for i in 0..hi - lo {
                        self.estimates[(l, lo + i)] = self.reference[lo + i] + dev[i] * s;
                    }
                    touched = true;
                }
            }
            clipped += touched as usize;
        }
        self.clip_radius = radius;
        self.clipped = clipped;
        self
    }

    pub fn num_outcomes(&self) -> usize {
        self.estimates.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.estimates.ncols()
    }

    pub fn estimate(&self, outcome: usize) -> RVec<T> {
        self.estimates.row(outcome).transpose()
    }

    pub fn estimates(&self) -> &RMat<T> {
        &self.estimates
    }

    pub fn reference(&self) -> &RVec<T> {
        &self.reference
    }

    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }

    /// Number of outcomes whose estimate was clipped.
    pub fn num_clipped(&self) -> usize {
        self.clipped
    }

    /// Largest `‖φ̂(ℓ) − φ̌‖`.
    pub fn max_deviation(&self) -> f64 {
        (0..self.num_outcomes())
            .map(|l| to_f64((self.estimate(l) - &self.reference).norm()))
            .fold(0.0, f64::max)
    }

    /// `Σ_ℓ p_ℓ φ̂(ℓ)`.
    pub fn mean(&self, p: &[T]) -> RVec<T> {
        let mut out = RVec::zeros(self.num_params());
        for (l, &pl) in p.iter().enumerate() {
            out += self.estimate(l) * pl;
        }
        out
    }

    /// `∂_j E[φ̂_i]` as an `(m*, m*)` matrix, row `i`, column `j`.
    pub fn mean_jacobian(&self, dp: &[Vec<T>]) -> RMat<T> {
        let m = self.num_params();
        let k = dp.first().map(Vec::len).unwrap_or(0);
        let mut out = RMat::zeros(m, k);
        for (l, row) in dp.iter().enumerate() {
            for j in 0..k {
                for i in 0..m {
                    out[(i, j)] += self.estimates[(l, i)] * row[j];
                }
            }
        }
        out
    }

    /// `Σ_ℓ p_ℓ (φ̂(ℓ) − φ̌)(φ̂(ℓ) − φ̌)ᵀ`.
    pub fn second_moment(&self, p: &[T]) -> RMat<T> {
        let m = self.num_params();
        let mut out = RMat::zeros(m, m);
        for (l, &pl) in p.iter().enumerate() {
            let dev = self.estimate(l) - &self.reference;
            out += &dev * dev.transpose() * pl;
        }
        out
    }
}

/// `10·diam(Θ) + 10`, with `diam` the diagonal of the parameter box.
pub fn default_clip_radius<T: Real>(family: &dyn StateFamily<T>) -> f64 {
    let diam = family
        .bounds()
        .iter()
        .map(|(lo, hi)| (hi - lo).powi(2))
        .sum::<f64>()
        .sqrt();
    10.0 * diam + 10.0
}

/// Diagnostics of the optimal-measurement construction.
#[derive(Clone, Debug)]
pub struct MatsumotoReport<T: Real> {
    /// Holevo bound at the regularised weight.
    pub bound: BoundResult<T>,
    /// `max |Im(Z + V_anc† V_anc)|`.
    pub completion_residual: f64,
    /// `Tr(W* Re Z̃)` for the completed vectors: the predicted weighted MSE.
    pub predicted_mse: T,
    /// Number of independent vectors kept by Gram–Schmidt, `ψ` included.
    pub span: usize,
}

/// HCRB-attaining projective measurement and its estimator on the purified
/// family at `(θ̌, φ̌)`.
pub fn matsumoto_povm<T: Real>(
    purified: &PurifiedFamily<T>,
    theta: &[T],
    phi: &[T],
    w_star: &RMat<T>,
) -> Result<(Povm<T>, EstimatorTable<T>, MatsumotoReport<T>)> {
    let (psi, dpsi) = purified.state_and_derivatives(theta, phi)?;
    let reference: RVec<T> = RVec::from_iterator(theta.len() + phi.len(), theta.iter().chain(phi).copied());
    matsumoto_from_state(&psi, &dpsi, w_star, reference)
}

/// Same construction for an arbitrary pure model `ψ`, `∂ψ`.
pub fn matsumoto_from_state<T: Real>(
    psi: &CVec<T>,
    dpsi: &[CVec<T>],
    w_star: &RMat<T>,
    reference: RVec<T>,
) -> Result<(Povm<T>, EstimatorTable<T>, MatsumotoReport<T>)> {
    let n = psi.len();
    let m = dpsi.len();
    if reference.len() != m || w_star.nrows() != m || w_star.ncols() != m {
        return Err(Error::InvalidDimension(
            "weight, reference and derivative counts differ".into(),
        ));
    }
    let w_eps = w_star + RMat::identity(m, m) * lit::<T>(COMPLETION_EPS);
    let basis = HermBasis::from_pure(psi);
    let rho = psi * psi.adjoint();
    let drho: Vec<CMat<T>> = dpsi.iter().map(|d| d * psi.adjoint() + psi * d.adjoint()).collect();
    let data = HcrbData::new(&basis, &rho, &drho, w_eps.clone())?;
    let bound = hcrb(&data)?;
    if bound.kept.len() != m {
        return Err(Error::Validation("regularised weight dropped a parameter".into()));
    }

    // Centred observables applied to ψ.
    let mut xs: Vec<CVec<T>> = Vec::with_capacity(m);
    for a in 0..m {
        let mut op = CMat::zeros(n, n);
        for (k, g) in basis.ops.iter().enumerate() {
            op += g * creal(bound.x[(k, a)]);
        }
        let mut v = &op * psi;
        let mean = inner(psi, &v);
        v -= psi * mean;
        xs.push(v);
    }
    let z = CMat::from_fn(m, m, |i, j| inner(&xs[i], &xs[j]));

    // Ancilla vectors cancelling Im Z.
    let t = z.map(|c| -c.im);
    let sw = psd_sqrt(&HermMat::from_real(&w_eps))?;
    let sw_r = sw.as_mat().map(|c| c.re);
    let a = &sw_r * &t * &sw_r;
    let a = (&a - a.transpose()) * lit::<T>(0.5);
    let abs_a = abs_antisymmetric(&a)?;
    let mmat = HermMat::symmetrize(complexify(&abs_a) + a.map(|x| cplx(T::zero(), x)));
    let m_half = psd_sqrt(&mmat)?;
    let w_inv_half = pd_inv_sqrt(&HermMat::from_real(&w_eps), 0.0)?;
    let v_anc = m_half.as_mat() * w_inv_half.as_mat();
    let z_full = &z + v_anc.adjoint() * &v_anc;
    let completion_residual = z_full.iter().map(|c| to_f64(c.im.abs())).fold(0.0, f64::max);
    if completion_residual > 1e-6 {
        return Err(Error::Completion(completion_residual));
    }
    let predicted_mse = w_star.component_mul(&z_full.map(|c| c.re)).sum();

    let total = n + m;
    let lift = |v: &CVec<T>, anc: Option<usize>| -> CVec<T> {
        CVec::from_fn(total, |i, _| {
            if i < n {
                v[i]
            } else if let Some(j) = anc {
                v_anc[(i - n, j)]
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
    };
    let psi_big = lift(psi, None);
    let x_big: Vec<CVec<T>> = xs.iter().enumerate().map(|(j, v)| lift(v, Some(j))).collect();

    // Real-coefficient Gram–Schmidt on {ψ, x_i}, then arbitrary completion.
    let mut frame: Vec<CVec<T>> = vec![psi_big.clone()];
    for x in &x_big {
        if let Some(f) = orthogonalize(x, &frame, true) {
            frame.push(f);
        }
    }
    let span = frame.len();
    for k in 0..total {
        if frame.len() == total {
            break;
        }
        let mut e = CVec::zeros(total);
        e[k] = creal(T::one());
        if let Some(f) = orthogonalize(&e, &frame, false) {
            frame.push(f);
        }
    }
    if frame.len() != total {
        return Err(Error::Validation("could not complete the orthonormal basis".into()));
    }

    // Householder reflection taking the first frame vector to the uniform one.
    let u = lit::<T>(1.0 / (total as f64).sqrt());
    let mut hv = RVec::from_element(total, -u);
    hv[0] += T::one();
    let hh = hv.dot(&hv);
    let house = if to_f64(hh) < 1e-30 {
        RMat::identity(total, total)
    } else {
        RMat::identity(total, total) - &hv * hv.transpose() * (lit::<T>(2.0) / hh)
    };
    let basis_out: Vec<CVec<T>> = (0..total)
        .map(|l| {
            let mut e = CVec::zeros(total);
            for (k, f) in frame.iter().enumerate() {
                e += f * creal(house[(k, l)]);
            }
            e
        })
        .collect();

    let mut est = RMat::zeros(total, m);
    for (l, e) in basis_out.iter().enumerate() {
        let overlap = inner(e, &psi_big);
        for (i, x) in x_big.iter().enumerate() {
            est[(l, i)] = (inner(e, x) / overlap).re + reference[i];
        }
    }
    let vectors: Vec<CVec<T>> = basis_out.iter().map(|e| e.rows(0, n).into_owned()).collect();
    let povm = Povm::rank_one(vectors)?;
    let table = EstimatorTable::new(est, reference)?;
    Ok((
        povm,
        table,
        MatsumotoReport {
            bound,
            completion_residual,
            predicted_mse,
            span,
        },
    ))
}

/// Modified Gram–Schmidt against an orthonormal `frame`, applied twice.
/// With `real`, only the real part of each projection coefficient is removed.
fn orthogonalize<T: Real>(v: &CVec<T>, frame: &[CVec<T>], real: bool) -> Option<CVec<T>> {
    let mut w = v.clone();
    for _ in 0..2 {
        for f in frame {
            let c = inner(f, &w);
            let c = if real { creal(c.re) } else { c };
            w -= f * c;
        }
    }
    if to_f64(w.norm()) < 1e-10 {
        return None;
    }
    normalize(&mut w);
    Some(w)
}

/// `2N − 1` rank-one effects whose Fisher information is half the QFIM of
/// any pure model through `ψ`.
pub fn fisher_symmetric_povm<T: Real>(psi: &CVec<T>) -> Result<Povm<T>> {
    let n = psi.len();
    if n < 2 {
        return Err(Error::InvalidDimension("need dimension at least 2".into()));
    }
    let mut psi = psi.clone();
    normalize(&mut psi);
    let perp = complement_basis(&psi);
    let count = 2 * n - 1;
    let alpha = lit::<T>(1.0 / (count as f64).sqrt());
    let c = alpha;
    let vectors = (0..count)
        .map(|j| {
            let mut a = &psi * creal(alpha);
            for (k, u) in perp.iter().enumerate() {
                let angle = 2.0 * std::f64::consts::PI * (j * (k + 1) % count) as f64 / count as f64;
                let w = cplx(lit::<T>(angle.cos()), lit::<T>(angle.sin())) * c;
                a += u * w;
            }
            a
        })
        .collect();
    Povm::rank_one(vectors)
}

/// `φ̂(ℓ) = φ̌ + I⁻¹ ∂p_ℓ / p_ℓ` for a pure model; outcomes with `p_ℓ` below
/// the probability floor map to the reference point.
pub fn canonical_estimator_from_state<T: Real>(
    povm: &Povm<T>,
    psi: &CVec<T>,
    dpsi: &[CVec<T>],
    reference: RVec<T>,
) -> Result<(EstimatorTable<T>, FisherMatrix<T>)> {
    let m = dpsi.len();
    if povm.dim() != psi.len() {
        return Err(Error::InvalidDimension("POVM and state dimensions differ".into()));
    }
    if reference.len() != m {
        return Err(Error::InvalidDimension(
            "reference length differs from parameter count".into(),
        ));
    }
    let (p, dp) = povm.probabilities_and_derivatives(psi, dpsi);
    let (info, _) = cfim_from_probs(&p, &dp, m);
    let lo = to_f64(info.min_eig());
    if lo <= 1e-8 {
        return Err(Error::SingularFisher(lo));
    }
    let inv = info.inverse()?;
    let mut est = RMat::zeros(p.len(), m);
    for (l, (&pl, row)) in p.iter().zip(&dp).enumerate() {
        let score: RVec<T> = if to_f64(pl) > TOL.prob_floor {
            RVec::from_iterator(m, row.iter().map(|&d| d / pl))
        } else {
            RVec::zeros(m)
        };
        let shift = &inv * score;
        for i in 0..m {
            est[(l, i)] = reference[i] + shift[i];
        }
    }
    Ok((EstimatorTable::new(est, reference)?, info))
}

/// Canonical estimator on the purified family at `(θ̌, φ̌)`.
pub fn canonical_estimator<T: Real>(
    povm: &Povm<T>,
    purified: &PurifiedFamily<T>,
    theta: &[T],
    phi: &[T],
) -> Result<EstimatorTable<T>> {
    let (psi, dpsi) = purified.state_and_derivatives(theta, phi)?;
    let reference: RVec<T> = RVec::from_iterator(theta.len() + phi.len(), theta.iter().chain(phi).copied());
    Ok(canonical_estimator_from_state(povm, &psi, &dpsi, reference)?.0)
}

/// One single-copy shadow estimate `(N+1)·V†|s⟩⟨s|V − 𝟙`.
#[derive(Clone, Debug)]
pub struct ShadowSample<T: Real> {
    pub estimate: CMat<T>,
}

/// Measures `ψ` in a Haar-random basis and returns the shadow estimate.
pub fn shadow_step<T: Real, R: Rng + ?Sized>(psi: &CVec<T>, rng: &mut R) -> Result<ShadowSample<T>> {
    let n = psi.len();
    let v = haar_unitary::<T, R>(n, rng)?;
    let amps = v.as_mat() * psi;
    let p: Vec<f64> = amps.iter().map(|a| to_f64(a.norm_sqr())).collect();
    let s = sample_index(&p, rng);
    let w: CVec<T> = v.as_mat().row(s).adjoint();
    let estimate = &w * w.adjoint() * creal(lit::<T>((n + 1) as f64)) - CMat::identity(n, n);
    Ok(ShadowSample { estimate })
}

/// Running mean of shadow estimates.
#[derive(Clone, Debug)]
pub struct ShadowAccumulator<T: Real> {
    sum: CMat<T>,
    count: usize,
}

impl<T: Real> ShadowAccumulator<T> {
    pub fn new(dim: usize) -> Self {
        ShadowAccumulator {
            sum: CMat::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn push(&mut self, sample: &ShadowSample<T>) {
        self.sum += &sample.estimate;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> CMat<T> {
        if self.count == 0 {
            return self.sum.clone();
        }
        &self.sum * creal(lit::<T>(1.0 / self.count as f64))
    }
}

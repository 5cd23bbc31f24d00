//! Classical and quantum Fisher information matrices.

use crate::error::{Error, Result};
use crate::numkit::{
    expm_minus_i, expm_minus_i_derivative, inner, max_abs, min_eig_real, partial_trace_first, spd_inverse,
    trace_product, HermMat,
};
use crate::scalar::{creal, lit, to_f64, CMat, CVec, RMat, Real, TOL};
use crate::statemodel::{PurifiedFamily, SpectralData};

/// Real symmetric positive semidefinite information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix<T: Real>(RMat<T>);

impl<T: Real> FisherMatrix<T> {
    /// Validates symmetry and positivity, then symmetrises.
    pub fn new(m: RMat<T>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidDimension(format!(
                "{}x{} information matrix",
                m.nrows(),
                m.ncols()
            )));
        }
        let asym = (&m - m.transpose())
            .iter()
            .map(|x| to_f64(*x).abs())
            .fold(0.0, f64::max);
        if asym > 1e-10 {
            return Err(Error::Validation(format!(
                "information matrix asymmetric by {asym:.3e}"
            )));
        }
        let sym = Self::symmetric_part(m);
        if sym.nrows() > 0 {
            let lo = to_f64(min_eig_real(&sym));
            if lo < -TOL.psd_fail {
                return Err(Error::NotPsd(lo));
            }
        }
        Ok(FisherMatrix(sym))
    }

    fn symmetric_part(m: RMat<T>) -> RMat<T> {
        (&m + m.transpose()) * lit::<T>(0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &RMat<T> {
        &self.0
    }

    pub fn into_mat(self) -> RMat<T> {
        self.0
    }

    pub fn min_eig(&self) -> T {
        min_eig_real(&self.0)
    }

    /// Inverse, failing with [`Error::SingularFisher`] when not positive definite.
    pub fn inverse(&self) -> Result<RMat<T>> {
        let lo = to_f64(self.min_eig());
        if lo <= 1e-12 {
            return Err(Error::SingularFisher(lo));
        }
        spd_inverse(&self.0).map_err(|_| Error::SingularFisher(lo))
    }

    /// Square sub-block on `indices`.
    pub fn block(&self, indices: &[usize]) -> RMat<T> {
        RMat::from_fn(indices.len(), indices.len(), |i, j| self.0[(indices[i], indices[j])])
    }
}

/// Quantum Fisher information of a mixed family from its spectral data.
///
/// Sums over all eigen-pairs of the full basis (support and kernel) whose
/// eigenvalue sum exceeds the pair threshold.
pub fn qfim_mixed<T: Real>(sd: &SpectralData<T>) -> FisherMatrix<T> {
    let m = sd.num_params();
    let basis: Vec<&CVec<T>> = sd.vectors.iter().chain(sd.null_vectors.iter()).collect();
    let lambda: Vec<T> = sd
        .values
        .iter()
        .copied()
        .chain(std::iter::repeat_n(T::zero(), sd.null_vectors.len()))
        .collect();
    let n = basis.len();
    // Matrix elements ⟨e_k|∂_iρ|e_l⟩.
    let elems: Vec<CMat<T>> = sd
        .drho
        .iter()
        .map(|d| CMat::from_fn(n, n, |k, l| inner(basis[k], &(d * basis[l]))))
        .collect();
    let two = lit::<T>(2.0);
    let mut j = RMat::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mut acc = T::zero();
            for k in 0..n {
                for l in 0..n {
                    let s = lambda[k] + lambda[l];
                    if to_f64(s) <= TOL.pair_sum {
                        continue;
                    }
                    acc += (elems[a][(k, l)] * elems[b][(l, k)]).re / s;
                }
            }
            j[(a, b)] = two * acc;
            j[(b, a)] = two * acc;
        }
    }
    FisherMatrix(j)
}

/// Quantum Fisher information of a pure family.
pub fn qfim_pure<T: Real>(psi: &CVec<T>, dpsi: &[CVec<T>]) -> FisherMatrix<T> {
    let m = dpsi.len();
    let overlaps: Vec<_> = dpsi.iter().map(|d| inner(d, psi)).collect();
    let four = lit::<T>(4.0);
    let mut j = RMat::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = (inner(&dpsi[a], &dpsi[b]) - overlaps[a] * overlaps[b].conj()).re * four;
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    FisherMatrix(j)
}

/// Covariance form `4(½⟨{G_i, G_j}⟩ − ⟨G_i⟩⟨G_j⟩)` on an environment state.
pub fn ee_block_from_env_state<T: Real>(sigma: &CMat<T>, gens: &[CMat<T>]) -> FisherMatrix<T> {
    let k = gens.len();
    let means: Vec<T> = gens.iter().map(|g| trace_product(sigma, g).re).collect();
    let half = lit::<T>(0.5);
    let four = lit::<T>(4.0);
    let mut j = RMat::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let anti = &gens[a] * &gens[b] + &gens[b] * &gens[a];
            let v = (trace_product(sigma, &anti).re * half - means[a] * means[b]) * four;
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    FisherMatrix(j)
}

/// Nuisance-nuisance block of the purified QFIM.
///
/// Away from `φ = 0` the generators are replaced by the effective Hermitian
/// generators `i (∂_k E) E†` of the frame `E = exp(−i Σ φ H)`.
pub fn qfim_ee_block<T: Real>(purified: &PurifiedFamily<T>, theta: &[T], phi: &[T]) -> Result<FisherMatrix<T>> {
    let dims = purified.dims();
    let psi = purified.psi_at(theta, phi)?;
    let sigma = partial_trace_first(&(&psi * psi.adjoint()), dims.d, dims.r);
    let r = dims.r;
    let mut a = CMat::zeros(r, r);
    for (h, &p) in purified.generators().iter().zip(phi) {
        a += h.as_mat() * creal(p);
    }
    let a = HermMat::symmetrize(a);
    let frame_adj = expm_minus_i(&a).as_mat().adjoint();
    let i = crate::scalar::cplx(T::zero(), T::one());
    let gens: Vec<CMat<T>> = purified
        .generators()
        .iter()
        .map(|h| {
            let g = expm_minus_i_derivative(&a, h.as_mat()) * &frame_adj * i;
            HermMat::symmetrize(g).into_mat()
        })
        .collect();
    Ok(ee_block_from_env_state(&sigma, &gens))
}

/// Diagnostics from a classical Fisher information evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfimReport {
    /// Outcomes skipped for falling below the probability floor.
    pub dropped: usize,
    /// Largest `|∂p|` among the skipped outcomes.
    pub dropped_max_derivative: f64,
}

/// Classical Fisher information from outcome probabilities and their
/// derivatives `dp[ℓ][i]`.
pub fn cfim_from_probs<T: Real>(p: &[T], dp: &[Vec<T>], num_params: usize) -> (FisherMatrix<T>, CfimReport) {
    let mut j = RMat::zeros(num_params, num_params);
    let mut report = CfimReport::default();
    for (pl, dpl) in p.iter().zip(dp) {
        if to_f64(*pl) <= TOL.prob_floor {
            report.dropped += 1;
            let worst = dpl.iter().map(|x| to_f64(*x).abs()).fold(0.0, f64::max);
            report.dropped_max_derivative = report.dropped_max_derivative.max(worst);
            continue;
        }
        for a in 0..num_params {
            for b in a..num_params {
                j[(a, b)] += dpl[a] * dpl[b] / *pl;
            }
        }
    }
    for a in 0..num_params {
        for b in 0..a {
            j[(a, b)] = j[(b, a)];
        }
    }
    (FisherMatrix(j), report)
}

/// `‖Σ M_ℓ − 1‖` (entrywise maximum).
pub fn completeness_defect<T: Real>(effects: &[CMat<T>], dim: usize) -> f64 {
    let mut s = -CMat::<T>::identity(dim, dim);
    for e in effects {
        s += e;
    }
    max_abs(&s)
}

/// `‖Σ |b⟩⟨b| − 1‖` (entrywise maximum).
pub fn completeness_defect_vectors<T: Real>(vectors: &[CVec<T>], dim: usize) -> f64 {
    let mut s = -CMat::<T>::identity(dim, dim);
    for v in vectors {
        s += v * v.adjoint();
    }
    max_abs(&s)
}

/// Classical Fisher information of a POVM measured on `ρ(θ)`.
pub fn cfim<T: Real>(effects: &[CMat<T>], rho: &CMat<T>, drho: &[CMat<T>]) -> Result<(FisherMatrix<T>, CfimReport)> {
    let dim = rho.nrows();
    if effects.iter().any(|e| e.nrows() != dim || e.ncols() != dim) {
        return Err(Error::InvalidDimension("effect and state dimensions differ".into()));
    }
    let defect = completeness_defect(effects, dim);
    if defect > TOL.povm {
        return Err(Error::IncompletePovm(defect));
    }
    let p: Vec<T> = effects.iter().map(|e| trace_product(rho, e).re).collect();
    let dp: Vec<Vec<T>> = effects
        .iter()
        .map(|e| drho.iter().map(|d| trace_product(d, e).re).collect())
        .collect();
    Ok(cfim_from_probs(&p, &dp, drho.len()))
}

/// Classical Fisher information of the rank-one POVM `{|b_ℓ⟩⟨b_ℓ|}` on a pure
/// family.
pub fn cfim_pure<T: Real>(
    vectors: &[CVec<T>],
    psi: &CVec<T>,
    dpsi: &[CVec<T>],
) -> Result<(FisherMatrix<T>, CfimReport)> {
    let dim = psi.len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidDimension("effect and state dimensions differ".into()));
    }
    let defect = completeness_defect_vectors(vectors, dim);
    if defect > TOL.povm {
        return Err(Error::IncompletePovm(defect));
    }
    let two = lit::<T>(2.0);
    let mut p = Vec::with_capacity(vectors.len());
    let mut dp = Vec::with_capacity(vectors.len());
    for b in vectors {
        let amp = inner(b, psi);
        p.push(amp.norm_sqr());
        dp.push(dpsi.iter().map(|d| (amp.conj() * inner(b, d)).re * two).collect());
    }
    Ok(cfim_from_probs(&p, &dp, dpsi.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::haar_unitary;
    use crate::statemodel::{
        builtin_family, purify, spectral, Bloch3, FamilyParams, PurePhase, QutritEmbed, Reparameterized, Simplex,
        StateFamily,
    };
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Root fidelity between two qubit states, `√(Tr ρσ + 2√(det ρ det σ))`.
    fn qubit_fidelity(a: &CMat<f64>, b: &CMat<f64>) -> f64 {
        let det = |m: &CMat<f64>| (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).re;
        (trace_product(a, b).re + 2.0 * (det(a) * det(b)).max(0.0).sqrt()).sqrt()
    }

    fn bures_oracle(f: &dyn StateFamily<f64>, theta: &[f64]) -> RMat<f64> {
        // J_ij from the second-order expansion of 8(1 − F) along θ ± h(e_i ± e_j).
        let h = 1e-4;
        let m = theta.len();
        let loss = |dir: &[f64]| {
            let t: Vec<f64> = theta.iter().zip(dir).map(|(a, b)| a + h * b).collect();
            8.0 * (1.0 - qubit_fidelity(&f.rho(theta), &f.rho(&t))) / (h * h)
        };
        let mut j = RMat::zeros(m, m);
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            j[(i, i)] = loss(&e);
        }
        for i in 0..m {
            for k in i + 1..m {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                e[k] = 1.0;
                let v = (loss(&e) - j[(i, i)] - j[(k, k)]) / 2.0;
                j[(i, k)] = v;
                j[(k, i)] = v;
            }
        }
        j
    }

    #[test]
    fn qfim_mixed_bloch_example() {
        let sd = spectral::<f64>(&Bloch3, &[0.0, 0.0, 0.5]).unwrap();
        let j = qfim_mixed(&sd);
        let want = RMat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 4.0 / 3.0]));
        assert!(max_abs_real(&(j.as_mat() - &want)) < 1e-12);
        let oracle = bures_oracle(&Bloch3, &[0.0, 0.0, 0.5]);
        assert!(max_abs_real(&(oracle - want)) < 1e-3);
    }

    fn max_abs_real(m: &RMat<f64>) -> f64 {
        m.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    #[test]
    fn qfim_mixed_matches_bures_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t: Vec<f64> = loop {
                let t: Vec<f64> = (0..3).map(|_| rng.random_range(-0.6..0.6)).collect();
                if StateFamily::<f64>::contains(&Bloch3, &t) {
                    break t;
                }
            };
            let j = qfim_mixed(&spectral::<f64>(&Bloch3, &t).unwrap());
            assert!(max_abs_real(&(j.as_mat() - bures_oracle(&Bloch3, &t))) < 2e-3);
        }
    }

    #[test]
    fn qfim_simplex_is_bernoulli() {
        let sd = spectral::<f64>(&Simplex { d: 2 }, &[0.3]).unwrap();
        assert!((qfim_mixed(&sd).as_mat()[(0, 0)] - 1.0 / 0.21).abs() < 1e-10);
    }

    #[test]
    fn qfim_pure_examples() {
        let t = [std::f64::consts::FRAC_PI_4, 0.3];
        let j = qfim_pure(&PurePhase::psi(&t), &PurePhase::dpsi(&t));
        assert!((j.as_mat()[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((j.as_mat()[(1, 1)] - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let t: [f64; 2] = [rng.random_range(0.2..1.3), rng.random_range(-1.5..1.5)];
            let j = qfim_pure(&PurePhase::psi(&t), &PurePhase::dpsi(&t));
            assert!(j.as_mat()[(0, 1)].abs() < 1e-12);
            assert!((j.as_mat()[(1, 1)] - (2.0 * t[0]).sin().powi(2)).abs() < 1e-12);
            let mixed = qfim_mixed(&spectral::<f64>(&PurePhase, &t).unwrap());
            assert!(max_abs_real(&(mixed.as_mat() - j.as_mat())) < 1e-9);
        }
        let psi = PurePhase::psi::<f64>(&t);
        let zero = vec![CVec::zeros(2); 2];
        assert!(max_abs_real(qfim_pure(&psi, &zero).as_mat()) == 0.0);
    }

    #[test]
    fn ee_block_matches_full_pure_qfim() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for name in ["bloch3", "qutrit_embed", "simplex(3)"] {
            let f = builtin_family::<f64>(name, FamilyParams::default()).unwrap();
            let t: Vec<f64> = loop {
                let t: Vec<f64> = f.bounds().iter().map(|&(a, b)| rng.random_range(a..b)).collect();
                if f.contains(&t) {
                    break t;
                }
            };
            let u = haar_unitary(f.rank(), &mut rng).unwrap();
            let p = purify(f.clone(), &t, u).unwrap();
            let k = p.generators().len();
            for phi in [vec![0.0; k], (0..k).map(|_| rng.random_range(-0.5..0.5)).collect()] {
                let (psi, d) = p.state_and_derivatives(&t, &phi).unwrap();
                let full = qfim_pure(&psi, &d);
                let idx: Vec<usize> = (f.num_params()..f.num_params() + k).collect();
                let ee = qfim_ee_block(&p, &t, &phi).unwrap();
                assert!(max_abs_real(&(full.block(&idx) - ee.as_mat())) < 1e-9, "{name}");
                assert!(ee.min_eig() > 0.0);
            }
        }
    }

    #[test]
    fn ee_block_maximally_mixed_environment() {
        let sigma = CMat::<f64>::identity(2, 2) * Complex::new(0.5, 0.0);
        let gens: Vec<CMat<f64>> = crate::statemodel::gellmann_generators::<f64>(2)
            .into_iter()
            .map(|h| h.into_mat())
            .collect();
        let j = ee_block_from_env_state(&sigma, &gens);
        assert!(max_abs_real(&(j.as_mat() - RMat::identity(3, 3) * 4.0)) < 1e-14);
    }

    fn random_povm(dim: usize, outcomes: usize, rng: &mut ChaCha8Rng) -> Vec<CMat<f64>> {
        // Columns of a Haar isometry give a rank-one POVM on `dim` levels.
        let u = haar_unitary::<f64, _>(outcomes, rng).unwrap();
        (0..outcomes)
            .map(|l| {
                let v: CVec<f64> = u.as_mat().view((0, l), (dim, 1)).column(0).conjugate();
                &v * v.adjoint()
            })
            .collect()
    }

    #[test]
    fn cfim_examples() {
        let f = Simplex { d: 2 };
        let basis: Vec<CMat<f64>> = (0..2)
            .map(|k| {
                let mut m = CMat::zeros(2, 2);
                m[(k, k)] = Complex::new(1.0, 0.0);
                m
            })
            .collect();
        let (j, rep) = cfim(
            &basis,
            &StateFamily::<f64>::rho(&f, &[0.3]),
            &StateFamily::<f64>::drho(&f, &[0.3]),
        )
        .unwrap();
        assert!((j.as_mat()[(0, 0)] - 1.0 / 0.21).abs() < 1e-10);
        assert_eq!(rep.dropped, 0);

        let trivial = vec![CMat::<f64>::identity(2, 2)];
        let t = [0.1, 0.2, 0.3];
        let (j, _) = cfim(
            &trivial,
            &StateFamily::<f64>::rho(&Bloch3, &t),
            &StateFamily::<f64>::drho(&Bloch3, &t),
        )
        .unwrap();
        assert!(max_abs_real(j.as_mat()) < 1e-15);

        let bad = vec![CMat::<f64>::identity(2, 2) * Complex::new(0.9, 0.0)];
        assert!(matches!(
            cfim(
                &bad,
                &StateFamily::<f64>::rho(&Bloch3, &t),
                &StateFamily::<f64>::drho(&Bloch3, &t)
            ),
            Err(Error::IncompletePovm(_))
        ));
    }

    #[test]
    fn cfim_drops_vanishing_outcomes() {
        let t = [std::f64::consts::FRAC_PI_4, 0.0];
        let psi = PurePhase::psi::<f64>(&t);
        // Outcome orthogonal to ψ: p = 0 exactly.
        let orth = CVec::from_vec(vec![psi[1].conj(), -psi[0].conj()]);
        let (_, rep) = cfim_pure(&[psi.clone(), orth], &psi, &PurePhase::dpsi(&t)).unwrap();
        assert_eq!(rep.dropped, 1);
        assert!(rep.dropped_max_derivative == 0.0);
    }

    #[test]
    fn cfim_bounded_by_qfim() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let t = [0.3, -0.2, 0.4];
        let rho = StateFamily::<f64>::rho(&Bloch3, &t);
        let drho = StateFamily::<f64>::drho(&Bloch3, &t);
        let q = qfim_mixed(&spectral::<f64>(&Bloch3, &t).unwrap());
        for _ in 0..20 {
            let n = rng.random_range(2..6);
            let povm = random_povm(2, n, &mut rng);
            let (c, _) = cfim(&povm, &rho, &drho).unwrap();
            let gap = q.as_mat() - c.as_mat() + RMat::identity(3, 3) * 1e-8;
            assert!(min_eig_real(&gap) >= 0.0);
        }
    }

    #[test]
    fn qfim_reparameterisation_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = [0.2, 0.1, -0.4];
        let j = qfim_mixed(&spectral::<f64>(&Bloch3, &t).unwrap());
        for _ in 0..5 {
            let b = RMat::from_fn(
                3,
                3,
                |i, k| if i == k { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
            );
            let binv = b.clone().try_inverse().unwrap();
            let f = Reparameterized::new(Arc::new(Bloch3), b).unwrap();
            let tp = f.outer_coords(&t);
            let jp = qfim_mixed(&spectral(&f, &tp).unwrap());
            let want = binv.transpose() * j.as_mat() * &binv;
            assert!(max_abs_real(&(jp.as_mat() - want)) < 1e-8);
        }
    }

    #[test]
    fn qfim_embedding_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let t: Vec<f64> = loop {
                let t: Vec<f64> = (0..3).map(|_| rng.random_range(-0.8..0.8)).collect();
                if StateFamily::<f64>::contains(&Bloch3, &t) {
                    break t;
                }
            };
            let a = qfim_mixed(&spectral::<f64>(&Bloch3, &t).unwrap());
            let b = qfim_mixed(&spectral::<f64>(&QutritEmbed, &t).unwrap());
            assert!(max_abs_real(&(a.as_mat() - b.as_mat())) < 1e-9);
        }
    }

    #[test]
    fn fisher_matrix_validation() {
        assert!(FisherMatrix::new(RMat::<f64>::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(matches!(
            FisherMatrix::new(RMat::<f64>::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
            Err(Error::NotPsd(_))
        ));
        let j = FisherMatrix::new(RMat::<f64>::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0])).unwrap();
        assert!((j.inverse().unwrap()[(1, 1)] - 0.25).abs() < 1e-15);
    }
}

//! Quantum Cramér-Rao (`C_F`) and Holevo (`C_H`) bounds.
//!
//! The Holevo bound is evaluated as the semidefinite program
//!
//! ```text
//! minimise Tr(W V)  subject to  [[V, Xᵀ√S], [√S X, 1_K]] ⪰ 0,   XᵀD = 1_m
//! ```
//!
//! over real symmetric `V` and real `K × m` coefficients `X` of the
//! observables `X_i = Σ_k X_ki G_k`, where `{G_k}` is an orthonormal Hermitian
//! basis of the operators with vanishing kernel-kernel block,
//! `S_kl = Tr(G_k G_l ρ)` and `D_kj = Tr(G_k ∂_jρ)`.

use crate::error::{Error, Result};
use crate::infomet::{qfim_mixed, qfim_pure, FisherMatrix};
use crate::numkit::{complement_basis, psd_sqrt, spd_inverse, sym_sqrt, trace_product, HermMat, UnitaryMat};
use crate::scalar::{cplx, creal, lit, to_f64, CMat, CVec, RMat, Real};
use crate::sdpcore::{realify_hermitian_block, solve_sdp, Equalities, SdpProblem, SdpStatus};
use crate::statemodel::{purify, spectral, PurifiedFamily, SharedFamily, SpectralData, StateFamily};

/// Hilbert-Schmidt orthonormal Hermitian operators `G` with `Π⊥ G Π⊥ = 0`.
#[derive(Debug, Clone)]
pub struct HermBasis<T: Real> {
    pub ops: Vec<CMat<T>>,
    /// Projector onto the support.
    pub support: CMat<T>,
}

impl<T: Real> HermBasis<T> {
    /// Builds the `2dr − r²` operators in the eigenbasis `support ∪ null` and
    /// rotates them back.
    pub fn from_eigvecs(support: &[CVec<T>], null: &[CVec<T>]) -> Self {
        let r = support.len();
        let d = r + null.len();
        let cols: Vec<CVec<T>> = support.iter().chain(null).cloned().collect();
        let u = CMat::from_columns(&cols);
        let inv_sqrt2 = lit::<T>(0.5).sqrt();
        let mut local = Vec::with_capacity(2 * d * r - r * r);
        let unit = |i: usize, j: usize, z| {
            let mut m = CMat::zeros(d, d);
            m[(i, j)] = z;
            m
        };
        for k in 0..r {
            local.push(unit(k, k, creal(T::one())));
        }
        for k in 0..r {
            for l in k + 1..d {
                local.push(unit(k, l, creal(inv_sqrt2)) + unit(l, k, creal(inv_sqrt2)));
                local.push(unit(k, l, cplx(T::zero(), -inv_sqrt2)) + unit(l, k, cplx(T::zero(), inv_sqrt2)));
            }
        }
        let ops = local
            .into_iter()
            .map(|g| HermMat::symmetrize(&u * g * u.adjoint()).into_mat())
            .collect();
        let mut support_proj = CMat::zeros(d, d);
        for e in support {
            support_proj += e * e.adjoint();
        }
        HermBasis {
            ops,
            support: support_proj,
        }
    }

    pub fn from_spectral(sd: &SpectralData<T>) -> Self {
        Self::from_eigvecs(&sd.vectors, &sd.null_vectors)
    }

    /// Basis for the pure state `ψ` (rank one).
    pub fn from_pure(psi: &CVec<T>) -> Self {
        let null = complement_basis(psi);
        let mut top = psi.clone();
        top.unscale_mut(psi.norm());
        Self::from_eigvecs(&[top], &null)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// Inputs of the Holevo program.
#[derive(Debug, Clone)]
pub struct HcrbData<T: Real> {
    /// `S_kl = Tr(G_k G_l ρ)`, `K × K` Hermitian.
    pub s: CMat<T>,
    /// `D_kj = Tr(G_k ∂_jρ)`, `K × m`.
    pub d: RMat<T>,
    /// Weight, `m × m` symmetric positive semidefinite.
    pub w: RMat<T>,
}

impl<T: Real> HcrbData<T> {
    pub fn new(basis: &HermBasis<T>, rho: &CMat<T>, drho: &[CMat<T>], w: RMat<T>) -> Result<Self> {
        let k = basis.len();
        let m = drho.len();
        let s = CMat::from_fn(k, k, |i, j| trace_product(&(&basis.ops[i] * &basis.ops[j]), rho));
        let d = RMat::from_fn(k, m, |i, j| trace_product(&basis.ops[i], &drho[j]).re);
        let data = HcrbData {
            s: HermMat::symmetrize(s).into_mat(),
            d,
            w,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn for_family(family: &dyn StateFamily<T>, theta: &[T], w: RMat<T>) -> Result<Self> {
        let sd = spectral(family, theta)?;
        Self::from_spectral(&sd, w)
    }

    pub fn from_spectral(sd: &SpectralData<T>, w: RMat<T>) -> Result<Self> {
        Self::new(&HermBasis::from_spectral(sd), &sd.rho(), &sd.drho, w)
    }

    /// Data for a pure family given `ψ` and its derivatives.
    pub fn for_pure(psi: &CVec<T>, dpsi: &[CVec<T>], w: RMat<T>) -> Result<Self> {
        let rho = psi * psi.adjoint();
        let drho: Vec<CMat<T>> = dpsi.iter().map(|d| d * psi.adjoint() + psi * d.adjoint()).collect();
        Self::new(&HermBasis::from_pure(psi), &rho, &drho, w)
    }

    pub fn num_params(&self) -> usize {
        self.d.ncols()
    }

    pub fn basis_len(&self) -> usize {
        self.d.nrows()
    }

    fn validate(&self) -> Result<()> {
        let m = self.num_params();
        if self.w.nrows() != m || self.w.ncols() != m {
            return Err(Error::InvalidDimension(format!("weight must be {m}x{m}")));
        }
        let asym = (&self.w - self.w.transpose()).amax();
        if to_f64(asym) > 1e-12 * (1.0 + to_f64(self.w.amax())) {
            return Err(Error::Validation("weight matrix is not symmetric".into()));
        }
        let wmin = to_f64(crate::numkit::min_eig_real(&self.w));
        if wmin < -1e-12 {
            return Err(Error::NotPsd(wmin));
        }
        // Only real combinations of the basis enter, so Re S must be definite;
        // S itself is singular whenever d > r.
        let smin = to_f64(crate::numkit::min_eig_real(&self.s.map(|z| z.re)));
        if smin <= 1e-10 {
            return Err(Error::IllConditioned(format!(
                "support basis Gram matrix has eigenvalue {smin:.3e}"
            )));
        }
        let sv = self.d.clone().singular_values();
        let lo = sv.iter().map(|&v| to_f64(v)).fold(f64::INFINITY, f64::min);
        let hi = sv.iter().map(|&v| to_f64(v)).fold(0.0, f64::max);
        if m > self.basis_len() || lo <= 1e-10 * hi.max(1e-300) {
            return Err(Error::IllConditioned(
                "derivative matrix D is column-rank deficient".into(),
            ));
        }
        Ok(())
    }

    /// Parameters with a nonzero row in the weight; the remaining columns of
    /// `X` are unconstrained by the objective and are eliminated exactly.
    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.num_params())
            .filter(|&i| self.w.row(i).iter().any(|&v| v != T::zero()))
            .collect()
    }
}

/// Variable layout of an assembled Holevo program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HcrbLayout {
    /// Parameter indices carried by `V` and `X`.
    pub kept: Vec<usize>,
    /// Basis size `K`.
    pub basis_len: usize,
}

impl HcrbLayout {
    fn mk(&self) -> usize {
        self.kept.len()
    }

    pub fn num_v(&self) -> usize {
        self.mk() * (self.mk() + 1) / 2
    }

    pub fn num_vars(&self) -> usize {
        self.num_v() + self.basis_len * self.mk()
    }

    pub fn v_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let n = self.mk();
        a * n - a * (a + 1) / 2 + b
    }

    pub fn x_index(&self, k: usize, a: usize) -> usize {
        self.num_v() + a * self.basis_len + k
    }

    fn decode<T: Real>(&self, x: &[T]) -> (RMat<T>, RMat<T>) {
        let n = self.mk();
        let v = RMat::from_fn(n, n, |a, b| x[self.v_index(a, b)]);
        let xm = RMat::from_fn(self.basis_len, n, |k, a| x[self.x_index(k, a)]);
        (v, xm)
    }
}

/// Which Gram matrix enters the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GramKind {
    Full,
    RealPart,
}

fn assemble<T: Real>(data: &HcrbData<T>, kind: GramKind) -> Result<(SdpProblem<T>, HcrbLayout)> {
    let kept = data.weighted_indices();
    if kept.is_empty() {
        return Err(Error::Validation("weight matrix is zero".into()));
    }
    let kdim = data.basis_len();
    let m = data.num_params();
    let layout = HcrbLayout {
        kept: kept.clone(),
        basis_len: kdim,
    };
    let gram = match kind {
        GramKind::Full => data.s.clone(),
        GramKind::RealPart => data.s.map(|z| creal(z.re)),
    };
    let sqrt_s = psd_sqrt(&HermMat::symmetrize(gram))?.into_mat();
    let mk = kept.len();
    let size = mk + kdim;
    let nvars = layout.num_vars();

    let mut objective = crate::scalar::RVec::zeros(nvars);
    let mut coeffs = vec![CMat::<T>::zeros(size, size); nvars];
    for a in 0..mk {
        for b in a..mk {
            let idx = layout.v_index(a, b);
            let w = data.w[(kept[a], kept[b])];
            objective[idx] = if a == b { w } else { w + w };
            coeffs[idx][(a, b)] = creal(T::one());
            coeffs[idx][(b, a)] = creal(T::one());
        }
    }
    for a in 0..mk {
        for k in 0..kdim {
            let idx = layout.x_index(k, a);
            for l in 0..kdim {
                let z = sqrt_s[(k, l)];
                coeffs[idx][(a, mk + l)] = z;
                coeffs[idx][(mk + l, a)] = z.conj();
            }
        }
    }
    let mut constant = CMat::zeros(size, size);
    for l in 0..kdim {
        constant[(mk + l, mk + l)] = creal(T::one());
    }
    let block = realify_hermitian_block(&constant, &coeffs);

    // Dᵀ x_a = e_{kept[a]} for every kept column a.
    let mut a_eq = RMat::zeros(m * mk, nvars);
    let mut b_eq = crate::scalar::RVec::zeros(m * mk);
    for a in 0..mk {
        for j in 0..m {
            let row = a * m + j;
            for k in 0..kdim {
                a_eq[(row, layout.x_index(k, a))] = data.d[(k, j)];
            }
            b_eq[row] = if j == kept[a] { T::one() } else { T::zero() };
        }
    }
    Ok((
        SdpProblem {
            objective,
            blocks: vec![block],
            equalities: Some(Equalities { a: a_eq, b: b_eq }),
        },
        layout,
    ))
}

/// Builds the Holevo program for `data`.
pub fn assemble_hcrb<T: Real>(data: &HcrbData<T>) -> Result<(SdpProblem<T>, HcrbLayout)> {
    assemble(data, GramKind::Full)
}

/// Solution of a bound program.
#[derive(Debug, Clone)]
pub struct BoundResult<T: Real> {
    pub value: T,
    /// Coefficients `X` (`K × m_kept`).
    pub x: RMat<T>,
    /// `Z = Xᵀ S X`.
    pub z: CMat<T>,
    /// Real symmetric `V ⪰ Z`.
    pub v: RMat<T>,
    /// Parameters carried by `X` and `V`.
    pub kept: Vec<usize>,
    pub gap: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    /// `Tr(W Re Z) + ‖√W Im Z √W‖₁` at the returned `X`.
    pub closed_form: T,
}

/// `Tr(W Re Z) + ‖√W Im Z √W‖₁`.
pub fn holevo_function<T: Real>(w: &RMat<T>, z: &CMat<T>) -> Result<T> {
    let re = z.map(|c| c.re);
    let im = z.map(|c| c.im);
    let sw = sym_sqrt(w)?;
    let a = &sw * im * &sw;
    let tn = a.singular_values().iter().fold(T::zero(), |acc, &s| acc + s);
    Ok((w.component_mul(&re)).sum() + tn)
}

fn solve_program<T: Real>(data: &HcrbData<T>, kind: GramKind) -> Result<BoundResult<T>> {
    let (problem, layout) = assemble(data, kind)?;
    let sol = solve_sdp(&problem)?;
    match sol.status {
        SdpStatus::Infeasible | SdpStatus::Unbounded => {
            return Err(Error::Solver(format!("returned status {}", sol.status)));
        }
        SdpStatus::Optimal | SdpStatus::MaxIter => {}
    }
    let (v, x) = layout.decode(&sol.x);
    let gram = match kind {
        GramKind::Full => data.s.clone(),
        GramKind::RealPart => data.s.map(|z| creal(z.re)),
    };
    let xc = x.map(creal);
    let z = HermMat::symmetrize(xc.transpose() * gram * &xc).into_mat();
    let w_kept = RMat::from_fn(layout.kept.len(), layout.kept.len(), |a, b| {
        data.w[(layout.kept[a], layout.kept[b])]
    });
    let closed_form = holevo_function(&w_kept, &z)?;
    let value = lit::<T>(sol.primal);
    if sol.status == SdpStatus::Optimal {
        let slack = to_f64(closed_form) - sol.primal;
        if slack > 1e-6 * (1.0 + sol.primal.abs()) {
            return Err(Error::Validation(format!(
                "closed-form value exceeds the program value by {slack:.3e}"
            )));
        }
    }
    Ok(BoundResult {
        value,
        x,
        z,
        v,
        kept: layout.kept,
        gap: sol.gap,
        status: sol.status,
        iterations: sol.iterations,
        closed_form,
    })
}

/// Holevo bound for prepared data.
pub fn hcrb<T: Real>(data: &HcrbData<T>) -> Result<BoundResult<T>> {
    solve_program(data, GramKind::Full)
}

/// `min Tr(W Re Z)` under the same constraints; equals `Tr(W J⁻¹)`.
pub fn qcrb_sdp<T: Real>(data: &HcrbData<T>) -> Result<BoundResult<T>> {
    solve_program(data, GramKind::RealPart)
}

/// `Tr(W J⁻¹)`.
pub fn qcrb_from_fisher<T: Real>(j: &FisherMatrix<T>, w: &RMat<T>) -> Result<T> {
    let lo = to_f64(j.min_eig());
    if lo <= 1e-8 {
        return Err(Error::IllConditioned(format!("QFIM minimum eigenvalue {lo:.3e}")));
    }
    let inv = spd_inverse(j.as_mat())?;
    Ok(w.component_mul(&inv).sum())
}

pub fn qcrb<T: Real>(family: &dyn StateFamily<T>, theta: &[T], w: &RMat<T>) -> Result<T> {
    let sd = spectral(family, theta)?;
    qcrb_from_fisher(&qfim_mixed(&sd), w)
}

pub fn hcrb_mixed<T: Real>(family: &dyn StateFamily<T>, theta: &[T], w: &RMat<T>) -> Result<BoundResult<T>> {
    hcrb(&HcrbData::for_family(family, theta, w.clone())?)
}

pub fn hcrb_pure<T: Real>(
    purified: &PurifiedFamily<T>,
    theta: &[T],
    phi: &[T],
    w_star: &RMat<T>,
) -> Result<BoundResult<T>> {
    let (psi, dpsi) = purified.state_and_derivatives(theta, phi)?;
    hcrb(&HcrbData::for_pure(&psi, &dpsi, w_star.clone())?)
}

/// `W` in the upper-left block of an `(m + r² − 1)`-square zero matrix.
pub fn embed_weight<T: Real>(w: &RMat<T>, r: usize) -> RMat<T> {
    let m = w.nrows();
    let n = m + r * r - 1;
    let mut out = RMat::zeros(n, n);
    out.view_mut((0, 0), (m, m)).copy_from(w);
    out
}

/// Residuals of the purification identities at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    /// `‖J(ρ)⁻¹ − (J(ψ)⁻¹)_SS‖_max`.
    pub qfim_residual: f64,
    /// `|C_H(ρ, W) − C_H(ψ, W*)| / C_H(ρ, W)`.
    pub hcrb_residual: f64,
    pub qcrb_mixed: f64,
    pub hcrb_mixed: f64,
    pub hcrb_pure: f64,
    /// `(J(ψ)⁻¹)_SS` as computed.
    pub pure_inverse_block: RMat<f64>,
}

/// Compares the mixed bounds with those of the purification at `φ = 0`.
pub fn verify_theorem1<T: Real>(
    family: SharedFamily<T>,
    theta: &[T],
    env: UnitaryMat<T>,
    w: &RMat<T>,
) -> Result<Theorem1Report> {
    let purified = purify(family.clone(), theta, env)?;
    verify_theorem1_with(&purified, theta, w)
}

/// As [`verify_theorem1`] for a prepared purification (for example with a
/// non-default eigenvector gauge).
pub fn verify_theorem1_with<T: Real>(purified: &PurifiedFamily<T>, theta: &[T], w: &RMat<T>) -> Result<Theorem1Report> {
    let family = purified.family().clone();
    let sd = spectral(family.as_ref(), theta)?;
    let jm = qfim_mixed(&sd);
    let jm_inv = jm.inverse()?;
    let phi = purified.zero_nuisance();
    let (psi, dpsi) = purified.state_and_derivatives(theta, &phi)?;
    let jp = qfim_pure(&psi, &dpsi);
    let jp_inv = jp.inverse()?;
    let m = family.num_params();
    let block = jp_inv.view((0, 0), (m, m)).into_owned();
    let qfim_residual = to_f64((&jm_inv - &block).amax());

    let w_star = embed_weight(w, family.rank());
    let ch_mixed = hcrb(&HcrbData::from_spectral(&sd, w.clone())?)?;
    let ch_pure = hcrb(&HcrbData::for_pure(&psi, &dpsi, w_star)?)?;
    let a = to_f64(ch_mixed.value);
    let b = to_f64(ch_pure.value);
    Ok(Theorem1Report {
        qfim_residual,
        hcrb_residual: (a - b).abs() / a.abs(),
        qcrb_mixed: to_f64(w.component_mul(&jm_inv).sum()),
        hcrb_mixed: a,
        hcrb_pure: b,
        pure_inverse_block: block.map(to_f64),
    })
}

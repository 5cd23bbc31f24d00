//! Dense primal-dual interior-point solver for small linear matrix
//! inequality problems
//!
//! ```text
//! minimise  cᵀx   subject to   F₀ᵇ + Σ_i x_i F_iᵇ ⪰ 0  for every block b,
//!                              A x = b.
//! ```
//!
//! Equalities are removed by null-space elimination. The remaining problem is
//! solved as the dual of the standard-form pair
//!
//! ```text
//! (P) min ⟨C, X⟩  s.t. ⟨A_i, X⟩ = b_i, X ⪰ 0
//! (D) max bᵀy     s.t. Σ y_i A_i + S = C, S ⪰ 0
//! ```
//!
//! with `C = F₀`, `A_i = −F_i`, `b = −c`, `y = x`, using an infeasible-start
//! path-following method with Nesterov-Todd scaling and a Mehrotra
//! predictor-corrector. The solver is single threaded and deterministic.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, CMat, RMat, RVec, Real};

/// One LMI block `F₀ + Σ x_i F_i ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock<T: Real> {
    pub constant: RMat<T>,
    /// One coefficient per variable; all have the block dimension.
    pub coeffs: Vec<RMat<T>>,
}

impl<T: Real> LmiBlock<T> {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    /// `F₀ + Σ x_i F_i`.
    pub fn evaluate(&self, x: &[T]) -> RMat<T> {
        let mut m = self.constant.clone();
        for (f, &xi) in self.coeffs.iter().zip(x) {
            if xi != T::zero() {
                m += f * xi;
            }
        }
        m
    }
}

/// Linear equality constraints `A x = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equalities<T: Real> {
    pub a: RMat<T>,
    pub b: RVec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem<T: Real> {
    pub objective: RVec<T>,
    pub blocks: Vec<LmiBlock<T>>,
    pub equalities: Option<Equalities<T>>,
}

impl<T: Real> SdpProblem<T> {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Checks shapes and symmetry, then symmetrises every matrix.
    pub fn validated(mut self) -> Result<Self> {
        let n = self.num_vars();
        if self.blocks.is_empty() {
            return Err(Error::Validation("problem has no LMI blocks".into()));
        }
        for (k, blk) in self.blocks.iter_mut().enumerate() {
            let d = blk.dim();
            if d == 0 || blk.constant.ncols() != d {
                return Err(Error::InvalidDimension(format!("block {k} constant is not square")));
            }
            if blk.coeffs.len() != n {
                return Err(Error::InvalidDimension(format!(
                    "block {k} has {} coefficients for {n} variables",
                    blk.coeffs.len()
                )));
            }
            for m in std::iter::once(&mut blk.constant).chain(blk.coeffs.iter_mut()) {
                if m.nrows() != d || m.ncols() != d {
                    return Err(Error::InvalidDimension(format!("block {k} coefficient shape")));
                }
                let scale = 1.0 + m.iter().map(|x| to_f64(*x).abs()).fold(0.0, f64::max);
                let asym = (&*m - m.transpose())
                    .iter()
                    .map(|x| to_f64(*x).abs())
                    .fold(0.0, f64::max);
                if asym > 1e-12 * scale {
                    return Err(Error::Validation(format!("block {k} matrix asymmetric by {asym:.3e}")));
                }
                *m = (&*m + m.transpose()) * lit::<T>(0.5);
            }
        }
        if let Some(eq) = &self.equalities {
            if eq.a.ncols() != n || eq.a.nrows() != eq.b.len() {
                return Err(Error::InvalidDimension("equality shapes".into()));
            }
            if eq.a.nrows() > n {
                return Err(Error::Validation("more equalities than variables".into()));
            }
        }
        Ok(self)
    }

    /// Smallest eigenvalue over all blocks at `x`.
    pub fn min_block_eig(&self, x: &[T]) -> f64 {
        self.blocks
            .iter()
            .map(|b| min_sym_eig(&b.evaluate(x)))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn objective_at(&self, x: &[T]) -> T {
        self.objective
            .iter()
            .zip(x)
            .fold(T::zero(), |acc, (&c, &v)| acc + c * v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// No `x` satisfies the constraints.
    Infeasible,
    /// The objective is unbounded below on the feasible set.
    Unbounded,
    /// Iteration cap reached; the best iterate is returned.
    MaxIter,
}

impl fmt::Display for SdpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::Infeasible => "infeasible",
            SdpStatus::Unbounded => "unbounded",
            SdpStatus::MaxIter => "max-iter",
        };
        f.write_str(s)
    }
}

impl FromStr for SdpStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(SdpStatus::Optimal),
            "infeasible" => Ok(SdpStatus::Infeasible),
            "unbounded" => Ok(SdpStatus::Unbounded),
            "max-iter" => Ok(SdpStatus::MaxIter),
            other => Err(Error::Validation(format!("unknown status `{other}`"))),
        }
    }
}

/// Objectives, residuals and gap of one interior-point iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    /// `cᵀx`, an upper bound on the optimum once `x` is feasible.
    pub primal: f64,
    /// `−⟨F₀, X⟩`, a lower bound on the optimum once `X` is feasible.
    pub dual: f64,
    /// Relative residual of the multiplier constraints.
    pub multiplier_residual: f64,
    /// Relative residual of `S = F(x)`.
    pub slack_residual: f64,
    /// `⟨X, S⟩`.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution<T: Real> {
    pub x: Vec<T>,
    /// `cᵀx`.
    pub primal: f64,
    /// Certified lower bound from the multiplier matrix.
    pub dual: f64,
    /// `primal − dual`.
    pub gap: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    /// Smallest eigenvalue of `F(x)` over all blocks.
    pub min_block_eig: f64,
    pub history: Vec<IterateRecord>,
}

impl<T: Real> SdpSolution<T> {
    pub fn relative_gap(&self) -> f64 {
        self.gap.abs() / (1.0 + self.primal.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpOptions {
    pub max_iter: usize,
    /// Relative gap and feasibility target.
    pub tol: f64,
    /// Fraction of the step to the boundary.
    pub step_fraction: f64,
    /// Blow-up factor applied to `M = 10(1 + ‖F₀‖)` for infeasibility detection.
    pub blowup: f64,
    pub record_history: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iter: 200,
            tol: 1e-9,
            step_fraction: 0.98,
            blowup: 1e6,
            record_history: false,
        }
    }
}

/// Affine map `x = x₀ + N z` produced by [`eliminate_equalities`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T: Real> {
    pub offset: RVec<T>,
    pub basis: RMat<T>,
}

impl<T: Real> AffineMap<T> {
    pub fn apply(&self, z: &[T]) -> Vec<T> {
        let v = &self.offset + &self.basis * RVec::from_column_slice(z);
        v.iter().copied().collect()
    }

    pub fn identity(n: usize) -> Self {
        AffineMap {
            offset: RVec::zeros(n),
            basis: RMat::identity(n, n),
        }
    }
}

/// Rewrites the problem in null-space coordinates `z` with `x = x₀ + N z`.
///
/// The objective constant `cᵀx₀` is returned separately.
pub fn eliminate_equalities<T: Real>(p: &SdpProblem<T>) -> Result<(SdpProblem<T>, AffineMap<T>, T)> {
    let n = p.num_vars();
    let Some(eq) = &p.equalities else {
        return Ok((p.clone(), AffineMap::identity(n), T::zero()));
    };
    let rows = eq.a.nrows();
    let qr = eq.a.transpose().col_piv_qr();
    let r = qr.r();
    let lead = (0..rows.min(n)).map(|k| to_f64(r[(k, k)]).abs()).fold(0.0, f64::max);
    let rank = (0..rows.min(n))
        .filter(|&k| to_f64(r[(k, k)]).abs() > 1e-10 * lead.max(1e-300))
        .count();
    if rank < rows {
        // Distinguish inconsistency from mere redundancy by least squares.
        let svd = eq.a.clone().svd(true, true);
        let x = svd
            .solve(&eq.b, lit(1e-10 * lead.max(1e-300)))
            .map_err(|e| Error::Solver(e.to_string()))?;
        let res = to_f64((&eq.a * x - &eq.b).amax());
        if res > 1e-10 * (1.0 + to_f64(eq.b.amax())) {
            return Err(Error::InconsistentEqualities(res));
        }
        return Err(Error::RankDeficient);
    }
    // x₀ = Aᵀ(AAᵀ)⁻¹b.
    let gram = &eq.a * eq.a.transpose();
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    let x0 = eq.a.transpose() * chol.solve(&eq.b);
    let res = to_f64((&eq.a * &x0 - &eq.b).amax());
    if res > 1e-10 * (1.0 + to_f64(eq.b.amax())) {
        return Err(Error::InconsistentEqualities(res));
    }
    let q = qr.q();
    let basis = complete_orthonormal(&q.columns(0, rows).into_owned(), n);

    let reduced_n = basis.ncols();
    let objective = basis.transpose() * &p.objective;
    let offset_cost = p.objective.dot(&x0);
    let x0v: Vec<T> = x0.iter().copied().collect();
    let blocks = p
        .blocks
        .iter()
        .map(|blk| {
            let constant = blk.evaluate(&x0v);
            let coeffs = (0..reduced_n)
                .map(|k| {
                    let mut m = RMat::zeros(blk.dim(), blk.dim());
                    for (i, f) in blk.coeffs.iter().enumerate() {
                        let w = basis[(i, k)];
                        if w != T::zero() {
                            m += f * w;
                        }
                    }
                    m
                })
                .collect();
            LmiBlock { constant, coeffs }
        })
        .collect();
    Ok((
        SdpProblem {
            objective,
            blocks,
            equalities: None,
        },
        AffineMap { offset: x0, basis },
        offset_cost,
    ))
}

/// Orthonormal basis of the complement of the span of `q`'s columns, built
/// by greedy Gram-Schmidt over the standard basis.
fn complete_orthonormal<T: Real>(q: &RMat<T>, n: usize) -> RMat<T> {
    let mut basis: Vec<RVec<T>> = (0..q.ncols()).map(|k| q.column(k).into_owned()).collect();
    let have = basis.len();
    let mut out = Vec::with_capacity(n - have);
    let mut used = vec![false; n];
    while basis.len() < n {
        let mut best: Option<(usize, RVec<T>, f64)> = None;
        for k in (0..n).filter(|&k| !used[k]) {
            let mut v = RVec::zeros(n);
            v[k] = T::one();
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
            }
            let nv = to_f64(v.norm());
            if best.as_ref().is_none_or(|(_, _, bn)| nv > *bn) {
                best = Some((k, v, nv));
            }
        }
        let (k, v, nv) = best.expect("complement exists");
        used[k] = true;
        let v = v / lit::<T>(nv);
        basis.push(v.clone());
        out.push(v);
    }
    if out.is_empty() {
        RMat::zeros(n, 0)
    } else {
        RMat::from_columns(&out)
    }
}

/// `[[Re, −Im], [Im, Re]]`, real symmetric when `h` is Hermitian.
pub fn realify_hermitian<T: Real>(h: &CMat<T>) -> RMat<T> {
    let n = h.nrows();
    let mut out = RMat::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = h[(i, j)];
            out[(i, j)] = z.re;
            out[(i + n, j + n)] = z.re;
            out[(i, j + n)] = -z.im;
            out[(i + n, j)] = z.im;
        }
    }
    out
}

/// Realifies every matrix of a Hermitian-valued affine block.
pub fn realify_hermitian_block<T: Real>(constant: &CMat<T>, coeffs: &[CMat<T>]) -> LmiBlock<T> {
    LmiBlock {
        constant: realify_hermitian(constant),
        coeffs: coeffs.iter().map(realify_hermitian).collect(),
    }
}

fn min_sym_eig<T: Real>(m: &RMat<T>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .map(|&v| to_f64(v))
        .fold(f64::INFINITY, f64::min)
}

fn fro_inner<T: Real>(a: &RMat<T>, b: &RMat<T>) -> T {
    a.dot(b)
}

/// Block-diagonal symmetric matrix stored block by block.
type Blocks<T> = Vec<RMat<T>>;

fn blocks_inner<T: Real>(a: &Blocks<T>, b: &Blocks<T>) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + fro_inner(x, y))
}

fn blocks_norm<T: Real>(a: &Blocks<T>) -> f64 {
    to_f64(blocks_inner(a, a)).sqrt()
}

/// Largest `α` keeping `X + αΔ ⪰ 0`, or `∞`.
fn max_step<T: Real>(x: &Blocks<T>, dx: &Blocks<T>) -> f64 {
    let mut alpha = f64::INFINITY;
    for (xb, db) in x.iter().zip(dx) {
        let Some(ch) = Cholesky::new(xb.clone()) else {
            return 0.0;
        };
        let l = ch.l();
        let Some(linv) = l.clone().try_inverse() else {
            return 0.0;
        };
        let m = &linv * db * linv.transpose();
        let m = (&m + m.transpose()) * lit::<T>(0.5);
        let lo = min_sym_eig(&m);
        if lo < 0.0 {
            alpha = alpha.min(-1.0 / lo);
        }
    }
    alpha
}

struct Scaling<T: Real> {
    g: RMat<T>,
    ginv: RMat<T>,
    w: RMat<T>,
    d: RVec<T>,
}

/// Nesterov-Todd scaling `W = G Gᵀ` with `W S W = X` and
/// `G⁻¹ X G⁻ᵀ = Gᵀ S G = diag(d)`.
fn nt_scaling<T: Real>(x: &RMat<T>, s: &RMat<T>) -> Option<Scaling<T>> {
    let ls = Cholesky::new(s.clone())?.l();
    let inner = ls.transpose() * x * &ls;
    let inner = (&inner + inner.transpose()) * lit::<T>(0.5);
    let eig = SymmetricEigen::new(inner);
    let tiny = lit::<T>(1e-300);
    let d = eig.eigenvalues.map(|v| if v > tiny { v.sqrt() } else { tiny.sqrt() });
    let sqrt_d = d.map(|v| v.sqrt());
    let q = eig.eigenvectors;
    let ls_inv_t = ls.transpose().try_inverse()?;
    let mut qd = q.clone();
    for (j, mut col) in qd.column_iter_mut().enumerate() {
        col *= sqrt_d[j];
    }
    let g = &ls_inv_t * qd;
    let mut ginv = q.transpose() * ls.transpose();
    for (i, mut row) in ginv.row_iter_mut().enumerate() {
        row /= sqrt_d[i];
    }
    let w = &g * g.transpose();
    let w = (&w + w.transpose()) * lit::<T>(0.5);
    Some(Scaling { g, ginv, w, d })
}

/// Solves an inequality-only problem in standard dual form.
struct Ipm<'a, T: Real> {
    c: &'a Blocks<T>,
    a: Vec<Blocks<T>>,
    b: RVec<T>,
    opts: SdpOptions,
}

struct IpmOutcome<T: Real> {
    y: RVec<T>,
    pobj: f64,
    dobj: f64,
    status: SdpStatus,
    iterations: usize,
    history: Vec<IterateRecord>,
}

impl<'a, T: Real> Ipm<'a, T> {
    fn run(&self) -> IpmOutcome<T> {
        let n = self.b.len();
        let dims: Vec<usize> = self.c.iter().map(|m| m.nrows()).collect();
        let total: usize = dims.iter().sum();
        let c_norm = blocks_norm(self.c);
        let b_norm = to_f64(self.b.norm());
        let a_norms: Vec<f64> = self.a.iter().map(blocks_norm).collect();
        let big_m = 10.0 * (1.0 + c_norm);

        let xi_p = (total as f64).sqrt().max(10.0).max(
            a_norms
                .iter()
                .zip(self.b.iter())
                .map(|(an, bi)| (total as f64) * (1.0 + to_f64(*bi).abs()) / (1.0 + an))
                .fold(0.0, f64::max),
        );
        let xi_d = (total as f64)
            .sqrt()
            .max(10.0)
            .max(c_norm)
            .max(a_norms.iter().copied().fold(0.0, f64::max));
        let mut x: Blocks<T> = dims.iter().map(|&d| RMat::identity(d, d) * lit::<T>(xi_p)).collect();
        let mut s: Blocks<T> = dims.iter().map(|&d| RMat::identity(d, d) * lit::<T>(xi_d)).collect();
        let mut y = RVec::zeros(n);

        let mut history = Vec::new();
        let mut best: Option<(f64, RVec<T>, f64, f64)> = None;
        let half = lit::<T>(0.5);
        let two = lit::<T>(2.0);

        for iter in 0..=self.opts.max_iter {
            // Residuals.
            let rp = RVec::from_fn(n, |i, _| self.b[i] - blocks_inner(&self.a[i], &x));
            let mut rd: Blocks<T> = self.c.iter().zip(&s).map(|(c, sb)| c - sb).collect();
            for (i, ai) in self.a.iter().enumerate() {
                if y[i] != T::zero() {
                    for (r, a) in rd.iter_mut().zip(ai) {
                        *r -= a * y[i];
                    }
                }
            }
            let pobj = to_f64(blocks_inner(self.c, &x));
            let dobj = to_f64(self.b.dot(&y));
            let xs = to_f64(blocks_inner(&x, &s));
            let pinf = to_f64(rp.norm()) / (1.0 + b_norm);
            let dinf = blocks_norm(&rd) / (1.0 + c_norm);
            let rel_gap = (pobj - dobj).abs().max(xs.abs()) / (1.0 + pobj.abs().max(dobj.abs()));
            if self.opts.record_history {
                history.push(IterateRecord {
                    primal: -dobj,
                    dual: -pobj,
                    multiplier_residual: pinf,
                    slack_residual: dinf,
                    complementarity: xs,
                });
            }
            let merit = rel_gap.max(pinf).max(dinf);
            if best.as_ref().is_none_or(|(bm, ..)| merit < *bm) {
                best = Some((merit, y.clone(), pobj, dobj));
            }
            let outcome = |status, y: RVec<T>, pobj, dobj, history| IpmOutcome {
                y,
                pobj,
                dobj,
                status,
                iterations: iter,
                history,
            };
            if rel_gap <= self.opts.tol && pinf <= self.opts.tol && dinf <= self.opts.tol {
                return outcome(SdpStatus::Optimal, y, pobj, dobj, history);
            }
            let limit = self.opts.blowup * big_m;
            if blocks_norm(&x) > limit {
                // A diverging multiplier with ⟨C, X⟩ < 0 certifies an empty LMI.
                if pobj < 0.0 {
                    return outcome(SdpStatus::Infeasible, y, pobj, dobj, history);
                }
            }
            if to_f64(y.norm()) > limit && dobj > 0.0 {
                return outcome(SdpStatus::Unbounded, y, pobj, dobj, history);
            }
            if iter == self.opts.max_iter {
                break;
            }

            let Some(scal): Option<Vec<Scaling<T>>> = x.iter().zip(&s).map(|(xb, sb)| nt_scaling(xb, sb)).collect()
            else {
                break;
            };
            let wawj: Vec<Blocks<T>> = self
                .a
                .iter()
                .map(|aj| aj.iter().zip(&scal).map(|(a, sc)| &sc.w * a * &sc.w).collect())
                .collect();
            let mut schur = RMat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = blocks_inner(&self.a[i], &wawj[j]);
                    schur[(i, j)] = v;
                    schur[(j, i)] = v;
                }
            }
            let Some(chol) = Cholesky::new(schur.clone()) else {
                break;
            };
            let wrdw: Blocks<T> = rd.iter().zip(&scal).map(|(r, sc)| &sc.w * r * &sc.w).collect();

            // Solves ΔX + WΔSW = R_c together with the residual equations.
            let direction = |rc: &Blocks<T>| -> (Blocks<T>, RVec<T>, Blocks<T>) {
                let tmp: Blocks<T> = rc.iter().zip(&wrdw).map(|(a, b)| a - b).collect();
                let rhs = RVec::from_fn(n, |i, _| rp[i] - blocks_inner(&self.a[i], &tmp));
                let dy = chol.solve(&rhs);
                let mut dx = tmp;
                let mut ds = rd.clone();
                for j in 0..n {
                    for (blk, (dxb, dsb)) in dx.iter_mut().zip(ds.iter_mut()).enumerate() {
                        *dxb += &wawj[j][blk] * dy[j];
                        *dsb -= &self.a[j][blk] * dy[j];
                    }
                }
                let dx = dx.into_iter().map(|m| (&m + m.transpose()) * half).collect();
                let ds = ds.into_iter().map(|m| (&m + m.transpose()) * half).collect();
                (dx, dy, ds)
            };
            // Maps a scaled-space right-hand side through the Lyapunov inverse.
            let unscale = |rhs: Vec<RMat<T>>| -> Blocks<T> {
                rhs.into_iter()
                    .zip(&scal)
                    .map(|(r, sc)| {
                        let dim = r.nrows();
                        let rt = RMat::from_fn(dim, dim, |i, j| r[(i, j)] / (sc.d[i] + sc.d[j]));
                        &sc.g * rt * sc.g.transpose()
                    })
                    .collect()
            };

            let mu = xs / total as f64;
            let pred_rhs: Vec<RMat<T>> = scal
                .iter()
                .map(|sc| RMat::from_diagonal(&sc.d.map(|v| -two * v * v)))
                .collect();
            let (dx_p, _, ds_p) = direction(&unscale(pred_rhs));
            let ap = max_step(&x, &dx_p).min(1.0);
            let ad = max_step(&s, &ds_p).min(1.0);
            let x_trial: Blocks<T> = x.iter().zip(&dx_p).map(|(a, b)| a + b * lit::<T>(ap)).collect();
            let s_trial: Blocks<T> = s.iter().zip(&ds_p).map(|(a, b)| a + b * lit::<T>(ad)).collect();
            let ratio = to_f64(blocks_inner(&x_trial, &s_trial)) / xs;
            let sigma = ratio.clamp(0.0, 1.0).powi(3);

            let corr_rhs: Vec<RMat<T>> = scal
                .iter()
                .zip(dx_p.iter().zip(&ds_p))
                .map(|(sc, (dxb, dsb))| {
                    let dxt = &sc.ginv * dxb * sc.ginv.transpose();
                    let dst = sc.g.transpose() * dsb * &sc.g;
                    let mut r = RMat::from_diagonal(&sc.d.map(|v| lit::<T>(2.0 * sigma * mu) - two * v * v));
                    r -= &dxt * &dst + &dst * &dxt;
                    r
                })
                .collect();
            let (dx, dy, ds) = direction(&unscale(corr_rhs));
            let ap = (self.opts.step_fraction * max_step(&x, &dx)).min(1.0);
            let ad = (self.opts.step_fraction * max_step(&s, &ds)).min(1.0);
            for (xb, d) in x.iter_mut().zip(&dx) {
                *xb += d * lit::<T>(ap);
            }
            for (sb, d) in s.iter_mut().zip(&ds) {
                *sb += d * lit::<T>(ad);
            }
            y += dy * lit::<T>(ad);
        }
        let (_, y, pobj, dobj) = best.expect("at least one iterate");
        IpmOutcome {
            y,
            pobj,
            dobj,
            status: SdpStatus::MaxIter,
            iterations: self.opts.max_iter,
            history,
        }
    }
}

pub fn solve_sdp<T: Real>(p: &SdpProblem<T>) -> Result<SdpSolution<T>> {
    solve_sdp_with(p, SdpOptions::default())
}

pub fn solve_sdp_with<T: Real>(p: &SdpProblem<T>, opts: SdpOptions) -> Result<SdpSolution<T>> {
    let p = p.clone().validated()?;
    let (reduced, map, offset) = match eliminate_equalities(&p) {
        Err(Error::InconsistentEqualities(_)) => {
            return Ok(SdpSolution {
                x: vec![T::zero(); p.num_vars()],
                primal: f64::INFINITY,
                dual: f64::INFINITY,
                gap: f64::NAN,
                status: SdpStatus::Infeasible,
                iterations: 0,
                min_block_eig: f64::NAN,
                history: Vec::new(),
            })
        }
        other => other?,
    };
    let offset = to_f64(offset);
    let n = reduced.num_vars();
    if n == 0 {
        let x = map.apply(&[]);
        let lo = p.min_block_eig(&x);
        let obj = to_f64(p.objective_at(&x));
        let status = if lo >= -1e-9 {
            SdpStatus::Optimal
        } else {
            SdpStatus::Infeasible
        };
        return Ok(SdpSolution {
            x,
            primal: obj,
            dual: obj,
            gap: 0.0,
            status,
            iterations: 0,
            min_block_eig: lo,
            history: Vec::new(),
        });
    }
    check_independent(&reduced)?;

    let c: Blocks<T> = reduced.blocks.iter().map(|b| b.constant.clone()).collect();
    let a: Vec<Blocks<T>> = (0..n)
        .map(|i| reduced.blocks.iter().map(|b| -&b.coeffs[i]).collect())
        .collect();
    let b = -reduced.objective.clone();
    let ipm = Ipm { c: &c, a, b, opts };
    let out = ipm.run();
    let z: Vec<T> = out.y.iter().copied().collect();
    let x = map.apply(&z);
    let primal = -out.dobj + offset;
    let dual = -out.pobj + offset;
    let history = out
        .history
        .into_iter()
        .map(|mut r| {
            r.primal += offset;
            r.dual += offset;
            r
        })
        .collect();
    Ok(SdpSolution {
        min_block_eig: p.min_block_eig(&x),
        primal,
        dual,
        gap: primal - dual,
        status: out.status,
        iterations: out.iterations,
        history,
        x,
    })
}

/// Fails if some combination of variables leaves every block unchanged, in
/// which case the Schur complement is singular.
fn check_independent<T: Real>(p: &SdpProblem<T>) -> Result<()> {
    let n = p.num_vars();
    let mut gram: RMat<T> = RMat::zeros(n, n);
    for blk in &p.blocks {
        for i in 0..n {
            for j in i..n {
                let v = fro_inner(&blk.coeffs[i], &blk.coeffs[j]);
                gram[(i, j)] += v;
                if i != j {
                    gram[(j, i)] += v;
                }
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let hi = eig.eigenvalues.iter().map(|&v| to_f64(v)).fold(0.0, f64::max);
    let lo = eig.eigenvalues.iter().map(|&v| to_f64(v)).fold(f64::INFINITY, f64::min);
    if hi == 0.0 || lo <= 1e-20 * hi {
        return Err(Error::Solver(
            "has a direction that leaves every block unchanged".into(),
        ));
    }
    Ok(())
}

/// A problem from the plain-text battery format together with its expected
/// outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryCase {
    pub name: String,
    pub problem: SdpProblem<f64>,
    pub status: SdpStatus,
    pub objective: Option<f64>,
    pub x: Option<Vec<f64>>,
}

/// Parses the plain-text problem format.
///
/// ```text
/// # comment
/// name <identifier>
/// variables <n>
/// objective <c_1> ... <c_n>
/// block <size>
/// matrix <k>            # k = 0 is F₀, k = 1..n is F_k; size rows follow
/// <row 1>
/// ...
/// equality <a_1> ... <a_n> <b>
/// expect status <optimal|infeasible|unbounded>
/// expect objective <value>
/// expect x <x_1> ... <x_n>
/// ```
///
/// Matrices are dense and row-major; omitted coefficient matrices are zero.
pub fn parse_battery_case(text: &str) -> Result<BatteryCase> {
    let err = |line: usize, msg: &str| Error::Validation(format!("line {line}: {msg}"));
    let nums = |toks: &[&str], line: usize| -> Result<Vec<f64>> {
        toks.iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(line, &format!("bad number `{t}`"))))
            .collect()
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    let mut name = String::new();
    let mut n: Option<usize> = None;
    let mut objective: Option<Vec<f64>> = None;
    let mut blocks: Vec<LmiBlock<f64>> = Vec::new();
    let mut eq_rows: Vec<Vec<f64>> = Vec::new();
    let mut eq_rhs: Vec<f64> = Vec::new();
    let mut status = SdpStatus::Optimal;
    let mut exp_obj = None;
    let mut exp_x = None;

    while let Some((ln, line)) = lines.next() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "name" => name = toks[1..].join(" "),
            "variables" => {
                n = Some(
                    toks.get(1)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(ln, "bad variable count"))?,
                )
            }
            "objective" => objective = Some(nums(&toks[1..], ln)?),
            "block" => {
                let nv = n.ok_or_else(|| err(ln, "`variables` must precede blocks"))?;
                let size: usize = toks
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err(ln, "bad block size"))?;
                blocks.push(LmiBlock {
                    constant: RMat::zeros(size, size),
                    coeffs: vec![RMat::zeros(size, size); nv],
                });
            }
            "matrix" => {
                let blk = blocks.last_mut().ok_or_else(|| err(ln, "`matrix` outside a block"))?;
                let k: usize = toks
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err(ln, "bad matrix index"))?;
                let size = blk.dim();
                let mut data = Vec::with_capacity(size * size);
                for _ in 0..size {
                    let (rl, row) = lines.next().ok_or_else(|| err(ln, "truncated matrix"))?;
                    let vals = nums(&row.split_whitespace().collect::<Vec<_>>(), rl)?;
                    if vals.len() != size {
                        return Err(err(rl, "row length differs from block size"));
                    }
                    data.extend(vals);
                }
                let m = RMat::from_row_slice(size, size, &data);
                if k == 0 {
                    blk.constant = m;
                } else {
                    *blk.coeffs
                        .get_mut(k - 1)
                        .ok_or_else(|| err(ln, "matrix index out of range"))? = m;
                }
            }
            "equality" => {
                let mut v = nums(&toks[1..], ln)?;
                let rhs = v.pop().ok_or_else(|| err(ln, "empty equality"))?;
                eq_rows.push(v);
                eq_rhs.push(rhs);
            }
            "expect" => match toks.get(1).copied() {
                Some("status") => status = toks.get(2).ok_or_else(|| err(ln, "missing status"))?.parse()?,
                Some("objective") => exp_obj = Some(nums(&toks[2..3], ln)?[0]),
                Some("x") => exp_x = Some(nums(&toks[2..], ln)?),
                _ => return Err(err(ln, "unknown expectation")),
            },
            other => return Err(err(ln, &format!("unknown keyword `{other}`"))),
        }
    }
    let n = n.ok_or_else(|| err(0, "missing `variables`"))?;
    let objective = objective.ok_or_else(|| err(0, "missing `objective`"))?;
    if objective.len() != n {
        return Err(err(0, "objective length differs from variable count"));
    }
    let equalities = if eq_rows.is_empty() {
        None
    } else {
        if eq_rows.iter().any(|r| r.len() != n) {
            return Err(err(0, "equality length differs from variable count"));
        }
        let flat: Vec<f64> = eq_rows.concat();
        Some(Equalities {
            a: RMat::from_row_slice(eq_rows.len(), n, &flat),
            b: RVec::from_vec(eq_rhs),
        })
    };
    Ok(BatteryCase {
        name,
        problem: SdpProblem {
            objective: RVec::from_vec(objective),
            blocks,
            equalities,
        }
        .validated()?,
        status,
        objective: exp_obj,
        x: exp_x,
    })
}

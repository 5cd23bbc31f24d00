//! Monte Carlo simulation of the two-stage protocol: random purification,
//! shadow-based coarse estimate, re-centred chart, locally optimal fine
//! measurement, and mean-squared-error aggregation.

use std::fmt;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{embed_weight, hcrb_mixed, qcrb};
use crate::error::{Error, Result};
use crate::measures::{
    canonical_estimator, default_clip_radius, fisher_symmetric_povm, matsumoto_povm, shadow_step, EstimatorTable, Povm,
    ShadowAccumulator,
};
use crate::numkit::{haar_unitary, herm_eig, min_eig_real, HermMat, UnitaryMat};
use crate::statemodel::{builtin_family, purify, schmidt_state, spectral, FamilyParams, SharedFamily, StateFamily};

type CMat = DMatrix<Complex64>;
type CVec = DVector<Complex64>;
type RMat = DMatrix<f64>;
type RVec = DVector<f64>;

pub const MIN_COPIES: u64 = 16;
pub const MIN_TRIALS: usize = 100;
pub const BOOTSTRAP_RESAMPLES: usize = 400;
const STAGE1_MIN_OVERLAP: f64 = 0.1;
const STAGE1_MIN_GAP: f64 = 1e-8;

/// Which bound the second stage targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// HCRB-attaining projective measurement.
    Hcrb,
    /// Fisher-symmetric measurement, twice the QCRB.
    Qcrb2,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Hcrb => "hcrb",
            Mode::Qcrb2 => "qcrb2",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcrb" => Ok(Mode::Hcrb),
            "qcrb2" => Ok(Mode::Qcrb2),
            other => Err(Error::Validation(format!("unknown mode '{other}'"))),
        }
    }
}

/// How the coarse estimate is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Mode {
    #[default]
    Shadow,
    /// Diagnostic: the coarse estimate is the true point and all `n` copies
    /// go to the second stage.
    Oracle,
}

fn default_delta() -> f64 {
    0.1
}

fn default_restarts() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub family: String,
    #[serde(default)]
    pub params: FamilyParams,
    pub theta: Vec<f64>,
    /// Row-major `m × m` weight.
    pub weight: Vec<f64>,
    pub n_values: Vec<u64>,
    pub trials: usize,
    pub mode: Mode,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clip_radius: Option<f64>,
    #[serde(default)]
    pub stage1: Stage1Mode,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

/// `n₁ = ⌈n^{2/(3(1−δ))}⌉` clamped to `[1, n − 1]`, and `n₂ = n − n₁`.
pub fn split_copies(n: u64, delta: f64) -> Result<(u64, u64)> {
    if n < MIN_COPIES {
        return Err(Error::TooFewCopies(n));
    }
    let n1 = (n as f64).powf(2.0 / (3.0 * (1.0 - delta))).ceil() as u64;
    let n1 = n1.clamp(1, n - 1);
    Ok((n1, n - n1))
}

/// Result of fitting the model to a coarse state estimate.
#[derive(Debug, Clone)]
pub struct Stage1Fit {
    pub theta: Vec<f64>,
    pub env: UnitaryMat<f64>,
    /// `|⟨ψ(θ̌, Ǔ)|v⟩|²` for the top eigenvector `v` of the estimate.
    pub overlap: f64,
    pub failed: bool,
}

/// `d × r` reshaping of a vector on `C^d ⊗ C^r`.
fn reshape(v: &CVec, d: usize, r: usize) -> CMat {
    CMat::from_fn(d, r, |a, b| v[a * r + b])
}

/// `Λ^{1/2} E† V` for the top-`r` eigenpairs; its trace norm is the best
/// overlap reachable by varying the environment unitary.
fn overlap_matrix(values: &[f64], vectors: &[CVec], target: &CMat) -> CMat {
    let r = values.len();
    let mut b = CMat::zeros(r, target.ncols());
    for j in 0..r {
        let row = vectors[j].adjoint() * target * Complex64::new(values[j].max(0.0).sqrt(), 0.0);
        b.set_row(j, &row);
    }
    b
}

#[derive(Clone)]
struct ProfileCost<'a> {
    family: &'a dyn StateFamily<f64>,
    target: CMat,
}

impl ProfileCost<'_> {
    fn eval(&self, theta: &[f64]) -> f64 {
        if !self.family.contains(theta) {
            let outside: f64 = self
                .family
                .bounds()
                .iter()
                .zip(theta)
                .map(|(&(lo, hi), &t)| (lo - t).max(0.0) + (t - hi).max(0.0))
                .sum();
            return 2.0 + outside;
        }
        let (d, r) = (self.family.dim(), self.family.rank());
        let eig = herm_eig(&HermMat::symmetrize(self.family.rho(theta)));
        let values: Vec<f64> = (0..r).map(|j| eig.values[d - 1 - j]).collect();
        let vectors: Vec<CVec> = (0..r).map(|j| eig.vector(d - 1 - j)).collect();
        let b = overlap_matrix(&values, &vectors, &self.target);
        let tn: f64 = b.singular_values().iter().sum();
        1.0 - tn * tn
    }
}

impl CostFunction for ProfileCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p))
    }
}

fn nelder_mead(cost: &ProfileCost<'_>, start: &[f64], steps: &[f64], max_iters: u64) -> (Vec<f64>, f64) {
    let mut simplex = vec![start.to_vec()];
    for (i, &s) in steps.iter().enumerate() {
        let mut p = start.to_vec();
        p[i] += s;
        simplex.push(p);
    }
    let fallback = (start.to_vec(), cost.eval(start));
    let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(1e-13) else {
        return fallback;
    };
    match Executor::new(cost.clone(), solver)
        .configure(|s| s.max_iters(max_iters))
        .run()
    {
        Ok(res) => {
            let state = res.state();
            match state.get_best_param() {
                Some(p) => (p.clone(), state.get_best_cost()),
                None => fallback,
            }
        }
        Err(_) => fallback,
    }
}

fn uniform_point<R: Rng + ?Sized>(family: &dyn StateFamily<f64>, rng: &mut R) -> Option<Vec<f64>> {
    let bounds = family.bounds();
    (0..1000).find_map(|_| {
        let p: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        family.contains(&p).then_some(p)
    })
}

/// Fits `(θ̌, Ǔ)` to the top eigenvector of a coarse state estimate.
///
/// The environment unitary is optimised in closed form (polar factor of the
/// overlap matrix); Nelder–Mead searches `θ` from `restarts` uniform starts.
pub fn stage1_fit<R: Rng + ?Sized>(
    estimate: &CMat,
    family: &dyn StateFamily<f64>,
    restarts: usize,
    rng: &mut R,
) -> Stage1Fit {
    let (d, r) = (family.dim(), family.rank());
    let eig = herm_eig(&HermMat::symmetrize(estimate.clone()));
    let n = eig.values.len();
    let gap = if n > 1 {
        eig.values[n - 1] - eig.values[n - 2]
    } else {
        f64::INFINITY
    };
    let top = eig.vector(n - 1);
    let cost = ProfileCost {
        family,
        target: reshape(&top, d, r),
    };
    let widths: Vec<f64> = family.bounds().iter().map(|&(lo, hi)| hi - lo).collect();

    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let Some(start) = uniform_point(family, rng) else {
            continue;
        };
        let steps: Vec<f64> = widths.iter().map(|w| 0.1 * w).collect();
        let (p, c) = nelder_mead(&cost, &start, &steps, 400);
        if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
            best = Some((p, c));
        }
    }
    let Some((mut theta, mut c)) = best else {
        return failed_fit(family);
    };
    let steps: Vec<f64> = widths.iter().map(|w| 1e-3 * w).collect();
    let (p, pc) = nelder_mead(&cost, &theta, &steps, 400);
    if pc < c {
        theta = p;
        c = pc;
    }
    let Ok(sd) = spectral(family, &theta) else {
        return failed_fit(family);
    };
    let b = overlap_matrix(
        &sd.values.to_vec(),
        &sd.vectors,
        &cost.target,
    );
    let svd = b.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return failed_fit(family);
    };
    // B = P Σ Q†, and the optimal environment is conj(Q P†).
    let env = (v_t.adjoint() * u.adjoint()).map(|z| z.conj());
    let Ok(env) = UnitaryMat::new(env) else {
        return failed_fit(family);
    };
    let overlap = 1.0 - c;
    Stage1Fit {
        theta,
        env,
        overlap,
        failed: overlap < STAGE1_MIN_OVERLAP || gap <= STAGE1_MIN_GAP,
    }
}

fn failed_fit(family: &dyn StateFamily<f64>) -> Stage1Fit {
    let theta = family.bounds().iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
    Stage1Fit {
        theta,
        env: UnitaryMat::identity(family.rank()),
        overlap: 0.0,
        failed: true,
    }
}

/// One simulated run of the protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub n1: u64,
    pub n2: u64,
    pub theta_check: Vec<f64>,
    /// `1 − |⟨ψ_true|ψ(θ̌, Ǔ)⟩|²`; reporting only.
    pub stage1_infidelity: f64,
    pub stage1_failed: bool,
    /// Stage-1 failure, a failed component, or the trace-distance proxy
    /// `2√(1 − F) > n₁^{−(1−δ)/2}`.
    pub event_failed: bool,
    pub component_error: Option<String>,
    pub theta_hat: Vec<f64>,
}

/// Summary statistics at one copy number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NSummary {
    pub n: u64,
    pub n1: u64,
    pub n2: u64,
    pub trials: usize,
    pub mode: Mode,
    /// Empirical mean-squared-error matrix `V̂`.
    pub msem: Vec<Vec<f64>>,
    /// Bootstrap standard errors of `n·V̂`.
    pub n_msem_stderr: Vec<Vec<f64>>,
    pub n_tr_wv: f64,
    pub n_tr_wv_stderr: f64,
    /// Percentile bootstrap 95% interval for `n·Tr(WV̂)`.
    pub n_tr_wv_ci: [f64; 2],
    pub bias: Vec<f64>,
    pub bias_stderr: Vec<f64>,
    pub bias_norm: f64,
    pub event_fail_rate: f64,
    pub stage1_fail_rate: f64,
    pub component_fail_rate: f64,
    pub target_bound: f64,
    pub ratio_to_target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsemSummary {
    pub config: ProtocolConfig,
    pub target_bound: f64,
    pub per_n: Vec<NSummary>,
}

/// Compensated (Neumaier) sum.
fn neumaier<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Deterministic stream for `(seed, n, index, purpose)`.
pub fn stream(seed: u64, n: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&n.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const TRIAL_STREAM: u64 = 1;
const BOOTSTRAP_STREAM: u64 = 2;

struct Moments {
    msem: RMat,
    bias: RVec,
}

fn moments(records: &[&TrialRecord], theta: &[f64]) -> Moments {
    let m = theta.len();
    let count = records.len() as f64;
    let dev = |rec: &TrialRecord, i: usize| rec.theta_hat[i] - theta[i];
    let msem = RMat::from_fn(m, m, |i, j| {
        neumaier(records.iter().map(|r| dev(r, i) * dev(r, j))) / count
    });
    let bias = RVec::from_fn(m, |i, _| neumaier(records.iter().map(|r| dev(r, i))) / count);
    Moments { msem, bias }
}

fn std_dev(xs: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mean = neumaier(xs.iter().copied()) / k;
    (neumaier(xs.iter().map(|x| (x - mean).powi(2))) / (k - 1.0)).sqrt()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean-squared-error statistics of trial records at copy number `n`.
pub fn aggregate(
    records: &[TrialRecord],
    theta: &[f64],
    weight: &RMat,
    n: u64,
    mode: Mode,
    target_bound: f64,
    seed: u64,
) -> Result<NSummary> {
    if records.len() < MIN_TRIALS {
        return Err(Error::InsufficientTrials {
            needed: MIN_TRIALS,
            got: records.len(),
        });
    }
    let m = theta.len();
    if records.iter().any(|r| r.theta_hat.len() != m) {
        return Err(Error::InvalidDimension(
            "estimate length differs from parameter count".into(),
        ));
    }
    let mut sorted: Vec<&TrialRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.trial);
    let nf = n as f64;
    let base = moments(&sorted, theta);
    let n_tr_wv = nf * weight.component_mul(&base.msem).sum();

    let mut rng = stream(seed, n, 0, BOOTSTRAP_STREAM);
    let t = sorted.len();
    let mut tr_samples = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut msem_samples: Vec<RMat> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut bias_samples: Vec<RVec> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let resample: Vec<&TrialRecord> = (0..t).map(|_| sorted[rng.random_range(0..t)]).collect();
        let mo = moments(&resample, theta);
        tr_samples.push(nf * weight.component_mul(&mo.msem).sum());
        msem_samples.push(mo.msem * nf);
        bias_samples.push(mo.bias);
    }
    let n_tr_wv_stderr = std_dev(&tr_samples);
    let mut sorted_tr = tr_samples.clone();
    sorted_tr.sort_by(f64::total_cmp);
    let n_tr_wv_ci = [percentile(&sorted_tr, 0.025), percentile(&sorted_tr, 0.975)];
    let n_msem_stderr = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| std_dev(&msem_samples.iter().map(|s| s[(i, j)]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let bias_stderr = (0..m)
        .map(|i| std_dev(&bias_samples.iter().map(|b| b[i]).collect::<Vec<_>>()))
        .collect();

    let rate = |f: fn(&TrialRecord) -> bool| sorted.iter().filter(|r| f(r)).count() as f64 / t as f64;
    Ok(NSummary {
        n,
        n1: sorted[0].n1,
        n2: sorted[0].n2,
        trials: t,
        mode,
        msem: (0..m).map(|i| base.msem.row(i).iter().copied().collect()).collect(),
        n_msem_stderr,
        n_tr_wv,
        n_tr_wv_stderr,
        n_tr_wv_ci,
        bias: base.bias.iter().copied().collect(),
        bias_stderr,
        bias_norm: base.bias.norm(),
        event_fail_rate: rate(|r| r.event_failed),
        stage1_fail_rate: rate(|r| r.stage1_failed),
        component_fail_rate: rate(|r| r.component_error.is_some()),
        target_bound,
        ratio_to_target: n_tr_wv / target_bound,
    })
}

/// Validated protocol with the precomputed target bound.
pub struct Simulator {
    config: ProtocolConfig,
    family: SharedFamily<f64>,
    weight: RMat,
    weight_star: RMat,
    psi_factors: crate::statemodel::SpectralData<f64>,
    clip_radius: f64,
    target_bound: f64,
}

impl Simulator {
    pub fn new(config: ProtocolConfig) -> Result<Self> {
        let family = builtin_family::<f64>(&config.family, config.params)?;
        let m = family.num_params();
        if config.theta.len() != m {
            return Err(Error::InvalidDimension(format!(
                "theta has {} entries, family expects {m}",
                config.theta.len()
            )));
        }
        if !family.contains(&config.theta) {
            return Err(Error::OutsideDomain(config.theta.clone()));
        }
        if config.weight.len() != m * m {
            return Err(Error::InvalidDimension(format!(
                "weight has {} entries, expected {}",
                config.weight.len(),
                m * m
            )));
        }
        let weight = RMat::from_row_slice(m, m, &config.weight);
        if (&weight - weight.transpose()).amax() > 1e-12 {
            return Err(Error::Validation("weight is not symmetric".into()));
        }
        if min_eig_real(&weight) <= 0.0 {
            return Err(Error::Validation("weight is not positive definite".into()));
        }
        if !(config.delta > 0.0 && config.delta < 1.0 / 3.0) {
            return Err(Error::Validation(format!("delta {} outside (0, 1/3)", config.delta)));
        }
        if config.n_values.is_empty() {
            return Err(Error::Validation("no copy numbers given".into()));
        }
        if let Some(&n) = config.n_values.iter().find(|&&n| n < MIN_COPIES) {
            return Err(Error::TooFewCopies(n));
        }
        if config.trials == 0 {
            return Err(Error::Validation("trials must be positive".into()));
        }
        if config.clip_radius.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Validation("clip radius must be positive".into()));
        }
        let psi_factors = spectral(&*family, &config.theta)?;
        let target_bound = match config.mode {
            Mode::Hcrb => hcrb_mixed(&*family, &config.theta, &weight)?.value,
            Mode::Qcrb2 => 2.0 * qcrb(&*family, &config.theta, &weight)?,
        };
        let clip_radius = config.clip_radius.unwrap_or_else(|| default_clip_radius(&*family));
        let weight_star = embed_weight(&weight, family.rank());
        Ok(Simulator {
            config,
            family,
            weight,
            weight_star,
            psi_factors,
            clip_radius,
            target_bound,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn family(&self) -> &SharedFamily<f64> {
        &self.family
    }

    pub fn weight(&self) -> &RMat {
        &self.weight
    }

    /// `C_H(ρ_θ, W)` for `hcrb`, `2·Tr(W J⁻¹)` for `qcrb2`.
    pub fn target_bound(&self) -> f64 {
        self.target_bound
    }

    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }

    /// `ψ(θ_true, U)`.
    pub fn true_state(&self, env: &UnitaryMat<f64>) -> CVec {
        schmidt_state(&self.psi_factors, env.as_mat())
    }

    /// Copy split at `n` for the configured first stage.
    pub fn copies(&self, n: u64) -> Result<(u64, u64)> {
        match self.config.stage1 {
            Stage1Mode::Shadow => split_copies(n, self.config.delta),
            Stage1Mode::Oracle if n < MIN_COPIES => Err(Error::TooFewCopies(n)),
            Stage1Mode::Oracle => Ok((0, n)),
        }
    }

    /// Second-stage measurement and clipped estimator in the chart centred
    /// at `(θ̌, Ǔ)` with `φ̌ = 0`.
    pub fn stage2_measurement(
        &self,
        theta_check: &[f64],
        env_check: &UnitaryMat<f64>,
    ) -> Result<(Povm<f64>, EstimatorTable<f64>)> {
        let purified = purify(self.family.clone(), theta_check, env_check.clone())?;
        let phi = purified.zero_nuisance();
        let (povm, table) = match self.config.mode {
            Mode::Hcrb => {
                let (povm, table, _) = matsumoto_povm(&purified, theta_check, &phi, &self.weight_star)?;
                (povm, table)
            }
            Mode::Qcrb2 => {
                let psi = purified.psi_at(theta_check, &phi)?;
                let povm = fisher_symmetric_povm(&psi)?;
                let table = canonical_estimator(&povm, &purified, theta_check, &phi)?;
                (povm, table)
            }
        };
        let m = self.family.num_params();
        Ok((povm, table.clipped(m, self.clip_radius)))
    }

    /// Simulates one trial at copy number `n`.
    pub fn run_trial(&self, n: u64, trial: u64) -> Result<TrialRecord> {
        let (n1, n2) = self.copies(n)?;
        let mut rng = stream(self.config.seed, n, trial, TRIAL_STREAM);
        let env_true = haar_unitary::<f64, _>(self.family.rank(), &mut rng)?;
        let psi_true = self.true_state(&env_true);
        let fit = match self.config.stage1 {
            Stage1Mode::Shadow => {
                let mut acc = ShadowAccumulator::new(psi_true.len());
                for _ in 0..n1 {
                    acc.push(&shadow_step(&psi_true, &mut rng)?);
                }
                stage1_fit(&acc.mean(), &*self.family, self.config.restarts, &mut rng)
            }
            Stage1Mode::Oracle => Stage1Fit {
                theta: self.config.theta.clone(),
                env: env_true.clone(),
                overlap: 1.0,
                failed: false,
            },
        };
        let stage1_infidelity = match spectral(&*self.family, &fit.theta) {
            Ok(sd) => {
                let psi_fit = schmidt_state(&sd, fit.env.as_mat());
                (1.0 - psi_true.dotc(&psi_fit).norm_sqr()).max(0.0)
            }
            Err(_) => 1.0,
        };
        let proxy_failed =
            n1 > 0 && 2.0 * stage1_infidelity.sqrt() > (n1 as f64).powf(-(1.0 - self.config.delta) / 2.0);

        let stage2 = self
            .stage2_measurement(&fit.theta, &fit.env)
            .map(|(povm, table)| self.sample_estimate(&povm, &table, &psi_true, n2, &mut rng));
        let (theta_hat, component_error) = match stage2 {
            Ok(est) => (est, None),
            Err(e) => (fit.theta.clone(), Some(e.to_string())),
        };
        Ok(TrialRecord {
            trial,
            n1,
            n2,
            theta_check: fit.theta,
            stage1_infidelity,
            stage1_failed: fit.failed,
            event_failed: fit.failed || proxy_failed || component_error.is_some(),
            component_error,
            theta_hat,
        })
    }

    /// Mean of `n₂` per-copy estimates, parameters of interest only.
    fn sample_estimate<R: Rng + ?Sized>(
        &self,
        povm: &Povm<f64>,
        table: &EstimatorTable<f64>,
        psi_true: &CVec,
        n2: u64,
        rng: &mut R,
    ) -> Vec<f64> {
        let m = self.family.num_params();
        let p = povm.probabilities(psi_true);
        let counts = multinomial(&p, n2, rng);
        (0..m)
            .map(|i| {
                neumaier(
                    counts
                        .iter()
                        .enumerate()
                        .map(|(l, &c)| c as f64 * table.estimates()[(l, i)]),
                ) / n2 as f64
            })
            .collect()
    }

    /// `E[θ̂ | θ̌, Ǔ]` on the true state, without sampling noise.
    pub fn conditional_mean(&self, povm: &Povm<f64>, table: &EstimatorTable<f64>, psi_true: &CVec) -> Vec<f64> {
        let m = self.family.num_params();
        let p = povm.probabilities(psi_true);
        let total: f64 = p.iter().sum();
        (0..m)
            .map(|i| neumaier(p.iter().enumerate().map(|(l, &pl)| pl * table.estimates()[(l, i)])) / total)
            .collect()
    }

    /// All trials at one copy number, in trial order.
    pub fn run_n(&self, n: u64) -> Result<Vec<TrialRecord>> {
        self.copies(n)?;
        (0..self.config.trials as u64)
            .into_par_iter()
            .map(|t| self.run_trial(n, t))
            .collect()
    }

    pub fn summarize(&self, n: u64, records: &[TrialRecord]) -> Result<NSummary> {
        aggregate(
            records,
            &self.config.theta,
            &self.weight,
            n,
            self.config.mode,
            self.target_bound,
            self.config.seed,
        )
    }

    /// Runs every configured copy number, calling `on_done` after each one.
    pub fn run<F: FnMut(&NSummary)>(&self, mut on_done: F) -> Result<MsemSummary> {
        let mut per_n = Vec::with_capacity(self.config.n_values.len());
        for &n in &self.config.n_values {
            let records = self.run_n(n)?;
            let summary = self.summarize(n, &records)?;
            on_done(&summary);
            per_n.push(summary);
        }
        Ok(MsemSummary {
            config: self.config.clone(),
            target_bound: self.target_bound,
            per_n,
        })
    }
}

/// Multinomial counts by sequential binomial draws.
pub fn multinomial<R: Rng + ?Sized>(p: &[f64], n: u64, rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; p.len()];
    let mut left = n;
    let mut mass: f64 = p.iter().map(|x| x.max(0.0)).sum();
    for (l, &pl) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        let pl = pl.max(0.0);
        let q = if mass > 0.0 { (pl / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if l + 1 == p.len() || q >= 1.0 {
            left
        } else {
            Binomial::new(left, q).map(|b| b.sample(rng)).unwrap_or(0)
        };
        counts[l] = k;
        left -= k;
        mass -= pl;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(mode: Mode) -> ProtocolConfig {
        ProtocolConfig {
            family: "bloch2".into(),
            params: FamilyParams::default(),
            theta: vec![0.3, 0.2],
            weight: vec![1.0, 0.0, 0.0, 1.0],
            n_values: vec![256],
            trials: 100,
            mode,
            delta: 0.1,
            seed: 3,
            clip_radius: None,
            stage1: Stage1Mode::Shadow,
            restarts: 8,
        }
    }

    fn record(trial: u64, theta_hat: Vec<f64>) -> TrialRecord {
        TrialRecord {
            trial,
            n1: 10,
            n2: 90,
            theta_check: theta_hat.clone(),
            stage1_infidelity: 0.0,
            stage1_failed: false,
            event_failed: false,
            component_error: None,
            theta_hat,
        }
    }

    #[test]
    fn copy_split() {
        // 16384^{2/2.7} = 1323.709...
        assert_eq!(split_copies(16384, 0.1).unwrap(), (1324, 16384 - 1324));
        // n₁ is the least integer with n₁^{3(1−δ)} ≥ n².
        for n in [16u64, 100, 256, 1024, 4096, 16384, 99991] {
            let (n1, _) = split_copies(n, 0.1).unwrap();
            let sq = (n * n) as f64;
            assert!((n1 as f64).powf(2.7) >= sq || n1 == n - 1);
            assert!(((n1 - 1) as f64).powf(2.7) < sq);
        }
        let (n1, n2) = split_copies(16, 0.1).unwrap();
        assert!(n1 <= 15 && n2 >= 1);
        assert!(matches!(split_copies(15, 0.1), Err(Error::TooFewCopies(15))));
        let mut last = 0;
        for n in 16..5000 {
            let (n1, _) = split_copies(n, 0.1).unwrap();
            assert!(n1 >= last);
            last = n1;
        }
    }

    #[test]
    fn noiseless_fit_recovers_the_state() {
        let fam = builtin_family::<f64>("bloch3", FamilyParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for theta in [[0.3, 0.2, 0.5], [-0.1, 0.4, 0.2]] {
            let env = haar_unitary::<f64, _>(2, &mut rng).unwrap();
            let psi = schmidt_state(&spectral(&*fam, &theta).unwrap(), env.as_mat());
            let fit = stage1_fit(&(&psi * psi.adjoint()), &*fam, 8, &mut rng);
            assert!(!fit.failed);
            let psi_fit = schmidt_state(&spectral(&*fam, &fit.theta).unwrap(), fit.env.as_mat());
            assert!(1.0 - psi.dotc(&psi_fit).norm_sqr() <= 1e-6);
        }
    }

    #[test]
    fn maximally_mixed_estimate_fails_stage1() {
        let fam = builtin_family::<f64>("bloch3", FamilyParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixed = CMat::identity(4, 4) * Complex64::new(0.25, 0.0);
        assert!(stage1_fit(&mixed, &*fam, 8, &mut rng).failed);
    }

    #[test]
    fn shadow_fit_accuracy() {
        // 100 repetitions of 4000 shadows; the median infidelity was 2.6e-3
        // when calibrated.
        let fam = builtin_family::<f64>("bloch3", FamilyParams::default()).unwrap();
        let theta = [0.3, 0.2, 0.5];
        let sd = spectral(&*fam, &theta).unwrap();
        let mut errs: Vec<f64> = (0..100u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(9, 4000, k, 7);
                let env = haar_unitary::<f64, _>(2, &mut rng).unwrap();
                let psi = schmidt_state(&sd, env.as_mat());
                let mut acc = ShadowAccumulator::new(4);
                for _ in 0..4000 {
                    acc.push(&shadow_step(&psi, &mut rng).unwrap());
                }
                let fit = stage1_fit(&acc.mean(), &*fam, 8, &mut rng);
                let psi_fit = schmidt_state(&spectral(&*fam, &fit.theta).unwrap(), fit.env.as_mat());
                1.0 - psi.dotc(&psi_fit).norm_sqr()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = 0.5 * (errs[49] + errs[50]);
        assert!(median <= 0.02, "median infidelity {median}");
    }

    #[test]
    fn trial_outcome_distribution_is_normalised() {
        let sim = Simulator::new(config(Mode::Hcrb)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let env = haar_unitary::<f64, _>(2, &mut rng).unwrap();
        let psi = sim.true_state(&env);
        let (povm, _) = sim.stage2_measurement(&[0.32, 0.18], &env).unwrap();
        let total: f64 = povm.probabilities(&psi).iter().sum();
        assert!((total - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn trials_are_reproducible() {
        let sim = Simulator::new(config(Mode::Hcrb)).unwrap();
        let a = sim.run_trial(256, 17).unwrap();
        let b = sim.run_trial(256, 17).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        let c = sim.run_trial(256, 18).unwrap();
        assert_ne!(a.theta_hat, c.theta_hat);
        assert_eq!(a.n1 + a.n2, 256);
        assert!(a.theta_hat.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = config(Mode::Hcrb);
        c.delta = 0.4;
        assert!(Simulator::new(c).is_err());
        let mut c = config(Mode::Hcrb);
        c.weight = vec![1.0, 0.5, 0.0, 1.0];
        assert!(Simulator::new(c).is_err());
        let mut c = config(Mode::Hcrb);
        c.theta = vec![0.95, 0.0];
        assert!(matches!(Simulator::new(c), Err(Error::OutsideDomain(_))));
        let mut c = config(Mode::Hcrb);
        c.n_values = vec![8];
        assert!(matches!(Simulator::new(c), Err(Error::TooFewCopies(8))));
    }

    #[test]
    fn fisher_symmetric_covariance_with_exact_coarse_point() {
        let mut c = config(Mode::Qcrb2);
        c.stage1 = Stage1Mode::Oracle;
        c.trials = 2000;
        let sim = Simulator::new(c).unwrap();
        let n2 = 4096u64;
        let recs = sim.run_n(n2).unwrap();
        let s = sim.summarize(n2, &recs).unwrap();
        let fam = sim.family().clone();
        let j_inv = crate::infomet::qfim_mixed(&spectral(&*fam, &[0.3, 0.2]).unwrap())
            .inverse()
            .unwrap();
        let want = j_inv * 2.0;
        for i in 0..2 {
            for k in 0..2 {
                let got = s.msem[i][k] * n2 as f64;
                let scale = 0.1 * (want[(i, i)] * want[(k, k)]).sqrt();
                assert!(
                    (got - want[(i, k)]).abs() <= scale,
                    "({i},{k}) {got} vs {}",
                    want[(i, k)]
                );
            }
        }
    }

    #[test]
    fn conditional_bias_is_second_order() {
        let sim = Simulator::new(config(Mode::Hcrb)).unwrap();
        let gens = crate::statemodel::gellmann_generators::<f64>(2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &scale in &[0.005, 0.01, 0.02, 0.04] {
            for _ in 0..25 {
                let env = haar_unitary::<f64, _>(2, &mut rng).unwrap();
                let psi = sim.true_state(&env);
                let theta: Vec<f64> = [0.3, 0.2]
                    .iter()
                    .map(|t| t + scale * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                let mut a = CMat::zeros(2, 2);
                for g in &gens {
                    a += g.as_mat() * Complex64::new(scale * (2.0 * rng.random::<f64>() - 1.0), 0.0);
                }
                let env_check = crate::numkit::expm_minus_i(&HermMat::symmetrize(a)).compose(&env);
                let (povm, table) = sim.stage2_measurement(&theta, &env_check).unwrap();
                let mean = sim.conditional_mean(&povm, &table, &psi);
                let bias = ((mean[0] - 0.3).powi(2) + (mean[1] - 0.2).powi(2)).sqrt();
                let psi_check = schmidt_state(&spectral(&**sim.family(), &theta).unwrap(), env_check.as_mat());
                xs.push(1.0 - psi.dotc(&psi_check).norm_sqr());
                ys.push(bias);
            }
        }
        // Least squares |bias| = a + b·infidelity.
        let k = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / k;
        let my = ys.iter().sum::<f64>() / k;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let rss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let sigma2 = rss / (k - 2.0);
        let se_intercept = (sigma2 * (1.0 / k + mx * mx / sxx)).sqrt();
        assert!(slope > 0.0);
        assert!(
            intercept.abs() <= 2.0 * se_intercept,
            "intercept {intercept} se {se_intercept}"
        );
    }

    #[test]
    fn summaries_are_bit_identical_across_runs() {
        let mut c = config(Mode::Qcrb2);
        c.n_values = vec![64, 128];
        let a = Simulator::new(c.clone()).unwrap().run(|_| {}).unwrap();
        let b = Simulator::new(c).unwrap().run(|_| {}).unwrap();
        for (x, y) in a.per_n.iter().zip(&b.per_n) {
            assert_eq!(x.n_tr_wv.to_bits(), y.n_tr_wv.to_bits());
            assert_eq!(x.n_tr_wv_stderr.to_bits(), y.n_tr_wv_stderr.to_bits());
            assert_eq!(x.bias, y.bias);
        }
    }

    #[test]
    fn exact_estimates_give_zero_msem() {
        let recs: Vec<TrialRecord> = (0..100).map(|t| record(t, vec![0.3, 0.2])).collect();
        let s = aggregate(&recs, &[0.3, 0.2], &RMat::identity(2, 2), 100, Mode::Hcrb, 1.0, 0).unwrap();
        assert_eq!(s.n_tr_wv, 0.0);
        assert!(s.msem.iter().flatten().all(|&x| x == 0.0));
        let few: Vec<TrialRecord> = recs.into_iter().take(50).collect();
        assert!(matches!(
            aggregate(&few, &[0.3, 0.2], &RMat::identity(2, 2), 100, Mode::Hcrb, 1.0, 0),
            Err(Error::InsufficientTrials { needed: 100, got: 50 })
        ));
    }

    #[test]
    fn gaussian_records_recover_the_covariance() {
        use rand_distr::StandardNormal;
        let n = 400u64;
        let sigma = RMat::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let chol = sigma.clone().cholesky().unwrap().l();
        let w = RMat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let recs: Vec<TrialRecord> = (0..2000)
            .map(|t| {
                let z = RVec::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &chol * z / (n as f64).sqrt();
                record(t, vec![0.3 + x[0], 0.2 + x[1]])
            })
            .collect();
        let s = aggregate(&recs, &[0.3, 0.2], &w, n, Mode::Hcrb, 1.0, 5).unwrap();
        let want = w.component_mul(&sigma).sum();
        assert!(
            s.n_tr_wv_ci[0] <= want && want <= s.n_tr_wv_ci[1],
            "{:?} vs {want}",
            s.n_tr_wv_ci
        );
        // Order independence.
        let mut rev = recs.clone();
        rev.reverse();
        let r = aggregate(&rev, &[0.3, 0.2], &w, n, Mode::Hcrb, 1.0, 5).unwrap();
        assert_eq!(r.n_tr_wv.to_bits(), s.n_tr_wv.to_bits());
    }

    #[test]
    fn multinomial_counts_sum_to_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = multinomial(&[0.2, 0.0, 0.5, 0.3], 1000, &mut rng);
        assert_eq!(c.iter().sum::<u64>(), 1000);
        assert_eq!(c[1], 0);
    }
}

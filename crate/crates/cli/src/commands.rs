//! The four commands. Each returns its report after writing it under the
//! output directory; verification commands return an error with exit code 4
//! when a check fails, after the report has been written.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qbound_core::bounds::{embed_weight, hcrb_mixed, hcrb_pure, qcrb_from_fisher, verify_theorem1};
use qbound_core::infomet::{qfim_mixed, qfim_pure};
use qbound_core::measures::{
    canonical_estimator_from_state, fisher_symmetric_povm, matsumoto_povm, EstimatorTable, Povm,
};
use qbound_core::numkit::haar_unitary;
use qbound_core::protosim::{MsemSummary, NSummary, Simulator};
use qbound_core::scalar::{RMat, RVec};
use qbound_core::sdpcore::SdpStatus;
use qbound_core::statemodel::{derivative_defect, purify, spectral, PerturbedDerivative, SharedFamily};
use qbound_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Command, MeasurementKind, RunConfig, Validated};
use crate::CliError;

/// Largest residual accepted by `verify-theorem1`.
pub const THEOREM1_TOLERANCE: f64 = 1e-5;
/// Step of the central differences used to audit analytic derivatives.
pub const DERIVATIVE_STEP: f64 = 1e-5;

pub const CSV_HEADER: [&str; 11] = [
    "n",
    "n1",
    "n2",
    "trials",
    "mode",
    "n_tr_WV",
    "n_tr_WV_stderr",
    "bias_norm",
    "event_fail_rate",
    "target_bound",
    "ratio_to_target",
];

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
    }

    fn out_dir(&self, config: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| config.output_dir())
    }
}

/// Runs `command`; the error carries the exit code.
pub fn run(command: Command, mut config: RunConfig, overrides: &Overrides) -> Result<(), CliError> {
    overrides.apply(&mut config);
    let out = overrides.out_dir(&config);
    match command {
        Command::Bounds => {
            let report = cmd_bounds(&config)?;
            let text = to_json(&report);
            println!("{text}");
            write_file(&out, "bounds.json", &text)
        }
        Command::VerifyTheorem1 => {
            let report = cmd_verify_theorem1(&config)?;
            write_file(&out, "verify_theorem1.json", &to_json(&report))?;
            eprintln!(
                "verify-theorem1: {} draws, max qfim residual {:.3e}, max hcrb residual {:.3e}, max derivative defect {:.3e}",
                report.rows.len(),
                report.max_qfim_residual,
                report.max_hcrb_residual,
                report.max_derivative_defect
            );
            if report.passed {
                Ok(())
            } else {
                Err(CliError::verification(format!(
                    "verify-theorem1: residual above {THEOREM1_TOLERANCE:e}"
                )))
            }
        }
        Command::Simulate => {
            let workers = worker_count(overrides.workers)?;
            cmd_simulate(&config, &out, workers).map(|_| ())
        }
        Command::CheckMeasurement => {
            let report = cmd_check_measurement(&config)?;
            write_file(&out, "check_measurement.json", &to_json(&report))?;
            for c in &report.checks {
                eprintln!(
                    "{:<28} {:>12.3e}  tol {:.0e}  {}",
                    c.name,
                    c.value,
                    c.tolerance,
                    verdict(c.passed)
                );
            }
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                Err(CliError::verification(format!(
                    "check-measurement: failed {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "FAIL"
    }
}

fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("report serialises")
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io)?;
    fs::write(dir.join(name), text).map_err(CliError::io)
}

/// `--workers`, then `QBOUND_WORKERS`, then the available parallelism.
pub fn worker_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("QBOUND_WORKERS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("QBOUND_WORKERS: '{v}' is not a worker count")))?,
            Err(_) => std::thread::available_parallelism().map(usize::from).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(CliError::config("workers: must be at least 1"));
    }
    Ok(n)
}

fn rows(m: &RMat<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverInfo {
    pub status: String,
    pub gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub qfim_ms: f64,
    pub hcrb_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub family: String,
    pub theta: Vec<f64>,
    pub weight: Vec<Vec<f64>>,
    /// `Tr(W J⁻¹)`.
    pub c_f: f64,
    pub c_h: f64,
    pub qfim: Vec<Vec<f64>>,
    pub solver: SolverInfo,
    pub timings_ms: Timings,
}

pub fn cmd_bounds(config: &RunConfig) -> Result<BoundsReport, CliError> {
    let Validated { family, theta, weight } = config.validate(Command::Bounds)?;
    let t0 = Instant::now();
    let sd = spectral(family.as_ref(), &theta)?;
    let j = qfim_mixed(&sd);
    let c_f = qcrb_from_fisher(&j, &weight)?;
    let t1 = Instant::now();
    let res = hcrb_mixed(family.as_ref(), &theta, &weight)?;
    let t2 = Instant::now();
    if res.status != SdpStatus::Optimal {
        return Err(CliError::numerical(format!(
            "solver: status {} after {} iterations, gap {:.3e}",
            res.status, res.iterations, res.gap
        )));
    }
    Ok(BoundsReport {
        family: family.name(),
        theta,
        weight: rows(&weight),
        c_f,
        c_h: res.value,
        qfim: rows(j.as_mat()),
        solver: SolverInfo {
            status: res.status.to_string(),
            gap: res.gap,
            iterations: res.iterations,
        },
        timings_ms: Timings {
            qfim_ms: (t1 - t0).as_secs_f64() * 1e3,
            hcrb_ms: (t2 - t1).as_secs_f64() * 1e3,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Row {
    pub draw: usize,
    pub theta: Vec<f64>,
    pub qfim_residual: f64,
    pub hcrb_residual: f64,
    pub derivative_defect: f64,
    pub qcrb_mixed: f64,
    pub hcrb_mixed: f64,
    pub hcrb_pure: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Summary {
    pub family: String,
    pub seed: u64,
    pub tolerance: f64,
    pub max_qfim_residual: f64,
    pub max_hcrb_residual: f64,
    pub max_derivative_defect: f64,
    pub passed: bool,
    pub rows: Vec<Theorem1Row>,
}

const MAX_REDRAWS: usize = 1000;

/// Uniform point of the parameter box at which the spectrum is regular.
fn draw_regular_point<R: Rng>(family: &SharedFamily<f64>, rng: &mut R) -> Result<Vec<f64>, CliError> {
    let bounds = family.bounds();
    for _ in 0..MAX_REDRAWS {
        let theta: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        if !family.contains(&theta) {
            continue;
        }
        match spectral(family.as_ref(), &theta) {
            Ok(_) => return Ok(theta),
            Err(Error::Degenerate { .. } | Error::RankMismatch { .. } | Error::IllConditioned(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CliError::config(format!(
        "family.name: no regular point found in {MAX_REDRAWS} draws"
    )))
}

pub fn cmd_verify_theorem1(config: &RunConfig) -> Result<Theorem1Summary, CliError> {
    let Validated { family, weight, .. } = config.validate(Command::VerifyTheorem1)?;
    let section = config.verify.clone().unwrap_or_default();
    let family: SharedFamily<f64> = match section.corrupt_derivative {
        Some(c) => std::sync::Arc::new(PerturbedDerivative {
            inner: family,
            index: c.index,
            factor: c.factor,
        }),
        None => family,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(section.draws);
    for draw in 0..section.draws {
        let theta = draw_regular_point(&family, &mut rng)?;
        let env = haar_unitary::<f64, _>(family.rank(), &mut rng)?;
        let report = verify_theorem1(family.clone(), &theta, env, &weight)?;
        let defect = derivative_defect(family.as_ref(), &theta, DERIVATIVE_STEP);
        rows.push(Theorem1Row {
            draw,
            theta,
            qfim_residual: report.qfim_residual,
            hcrb_residual: report.hcrb_residual,
            derivative_defect: defect,
            qcrb_mixed: report.qcrb_mixed,
            hcrb_mixed: report.hcrb_mixed,
            hcrb_pure: report.hcrb_pure,
        });
    }
    let max = |f: fn(&Theorem1Row) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let max_qfim_residual = max(|r| r.qfim_residual);
    let max_hcrb_residual = max(|r| r.hcrb_residual);
    let max_derivative_defect = max(|r| r.derivative_defect);
    let passed = [max_qfim_residual, max_hcrb_residual, max_derivative_defect]
        .iter()
        .all(|&r| r <= THEOREM1_TOLERANCE);
    Ok(Theorem1Summary {
        family: family.name(),
        seed: config.seed,
        tolerance: THEOREM1_TOLERANCE,
        max_qfim_residual,
        max_hcrb_residual,
        max_derivative_defect,
        passed,
        rows,
    })
}

#[derive(Serialize)]
struct SimulationSidecar<'a> {
    config: &'a RunConfig,
    summary: MsemSummary,
}

/// Formats one summary as a CSV record; floats use their shortest
/// round-trip representation.
pub fn csv_record(s: &NSummary) -> Vec<String> {
    vec![
        s.n.to_string(),
        s.n1.to_string(),
        s.n2.to_string(),
        s.trials.to_string(),
        s.mode.to_string(),
        s.n_tr_wv.to_string(),
        s.n_tr_wv_stderr.to_string(),
        s.bias_norm.to_string(),
        s.event_fail_rate.to_string(),
        s.target_bound.to_string(),
        s.ratio_to_target.to_string(),
    ]
}

fn write_simulation(out: &Path, config: &RunConfig, sim: &Simulator, done: &[NSummary]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)
        .map_err(|e| CliError::numerical(format!("csv: {e}")))?;
    for s in done {
        w.write_record(csv_record(s))
            .map_err(|e| CliError::numerical(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::numerical(format!("csv: {e}")))?;
    fs::create_dir_all(out).map_err(CliError::io)?;
    fs::write(out.join("simulate.csv"), bytes).map_err(CliError::io)?;
    let sidecar = SimulationSidecar {
        config,
        summary: MsemSummary {
            config: sim.config().clone(),
            target_bound: sim.target_bound(),
            per_n: done.to_vec(),
        },
    };
    write_file(out, "simulate.json", &to_json(&sidecar))
}

/// Runs the protocol, rewriting `simulate.csv` and `simulate.json` after each
/// completed copy number.
pub fn cmd_simulate(config: &RunConfig, out: &Path, workers: usize) -> Result<MsemSummary, CliError> {
    config.validate(Command::Simulate)?;
    let sim = Simulator::new(config.protocol()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::numerical(format!("thread pool: {e}")))?;
    eprintln!(
        "simulate: {} mode, target {:.6}, {} trials per n, {workers} workers",
        sim.config().mode,
        sim.target_bound(),
        sim.config().trials
    );
    write_simulation(out, config, &sim, &[])?;
    let mut done: Vec<NSummary> = Vec::new();
    let mut io_error = None;
    let started = Instant::now();
    let result = pool.install(|| {
        sim.run(|s| {
            done.push(s.clone());
            eprintln!(
                "  n = {:>6}  n1 = {:>5}  n·Tr(WV) = {:.4} ± {:.4}  ratio {:.4}  [{:.1} s]",
                s.n,
                s.n1,
                s.n_tr_wv,
                s.n_tr_wv_stderr,
                s.ratio_to_target,
                started.elapsed().as_secs_f64()
            );
            if io_error.is_none() {
                if let Err(e) = write_simulation(out, config, &sim, &done) {
                    io_error = Some(e);
                }
            }
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    result.map_err(|e| CliError::numerical(format!("simulation: {e}")))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    fn within(name: &str, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
            note: None,
        }
    }

    fn errored(name: &str, tolerance: f64, e: impl std::fmt::Display) -> Self {
        Check {
            name: name.into(),
            value: f64::NAN,
            tolerance,
            passed: false,
            note: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasurementReport {
    pub measurement: MeasurementKind,
    pub family: String,
    pub theta: Vec<f64>,
    pub dim: usize,
    pub outcomes: usize,
    pub corrupted: bool,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn max_abs(m: &RMat<f64>) -> f64 {
    m.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Mean and Jacobian residuals of a locally unbiased estimator.
fn unbiasedness_checks(
    checks: &mut Vec<Check>,
    table: &EstimatorTable<f64>,
    p: &[f64],
    dp: &[Vec<f64>],
    mean_tol: f64,
    jac_tol: f64,
) {
    let mean = table.mean(p) - table.reference();
    checks.push(Check::within("local_mean", mean.amax(), mean_tol));
    let k = table.num_params();
    let jac = table.mean_jacobian(dp) - RMat::identity(k, k);
    checks.push(Check::within("local_jacobian", max_abs(&jac), jac_tol));
}

pub fn cmd_check_measurement(config: &RunConfig) -> Result<MeasurementReport, CliError> {
    let Validated { family, theta, weight } = config.validate(Command::CheckMeasurement)?;
    let section = config.check.clone().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let env = haar_unitary::<f64, _>(family.rank(), &mut rng)?;
    let purified = purify(family.clone(), &theta, env)?;
    let phi = purified.zero_nuisance();
    let (psi, dpsi) = purified.state_and_derivatives(&theta, &phi)?;
    let reference = RVec::from_iterator(theta.len() + phi.len(), theta.iter().chain(&phi).copied());
    let n = psi.len();
    let mut checks = Vec::new();

    let corrupt = |povm: Povm<f64>| {
        if section.corrupt_povm {
            povm.scaled_unchecked(0, 1.5)
        } else {
            povm
        }
    };

    let povm = match section.measurement {
        MeasurementKind::FisherSymmetric => {
            let povm = corrupt(fisher_symmetric_povm(&psi)?);
            checks.push(Check::within("completeness", povm.completeness_defect(), 1e-10));
            let p = povm.probabilities(&psi);
            let uniform = 1.0 / (2 * n - 1) as f64;
            let spread = p.iter().fold(0.0, |a: f64, &x| a.max((x - uniform).abs()));
            checks.push(Check::within("uniform_probabilities", spread, 1e-12));
            let j = qfim_pure(&psi, &dpsi);
            let (f, _) = povm.fisher_pure(&psi, &dpsi);
            checks.push(Check::within(
                "cfim_half_qfim",
                max_abs(&(f.as_mat() - j.as_mat() * 0.5)),
                1e-8,
            ));
            match canonical_estimator_from_state(&povm, &psi, &dpsi, reference.clone()) {
                Ok((table, _)) => {
                    let (p, dp) = povm.probabilities_and_derivatives(&psi, &dpsi);
                    unbiasedness_checks(&mut checks, &table, &p, &dp, 1e-8, 1e-6);
                    let mean = table.mean(&p) - table.reference();
                    let cov = table.second_moment(&p) - &mean * mean.transpose();
                    let target = j.inverse()? * 2.0;
                    let scale = 1.0 + max_abs(&target);
                    checks.push(Check::within(
                        "covariance_two_inverse_qfim",
                        max_abs(&(cov - target)) / scale,
                        1e-6,
                    ));
                }
                Err(e) => checks.push(Check::errored("local_mean", 1e-8, e)),
            }
            povm
        }
        MeasurementKind::Matsumoto => {
            let w_star = embed_weight(&weight, family.rank());
            let (povm, table, _) = matsumoto_povm(&purified, &theta, &phi, &w_star)?;
            let povm = corrupt(povm);
            checks.push(Check::within("completeness", povm.completeness_defect(), 1e-8));
            let (p, dp) = povm.probabilities_and_derivatives(&psi, &dpsi);
            unbiasedness_checks(&mut checks, &table, &p, &dp, 1e-6, 1e-5);
            let c_h = hcrb_pure(&purified, &theta, &phi, &w_star)?.value;
            let mse = w_star.component_mul(&table.second_moment(&p)).sum();
            let ratio = mse / c_h;
            checks.push(Check {
                name: "mse_to_holevo_ratio".into(),
                value: ratio,
                tolerance: 1e-3,
                passed: (1.0 - 1e-4..=1.0 + 1e-3).contains(&ratio),
                note: Some(format!("accepted range [1 - 1e-4, 1 + 1e-3], holevo bound {c_h}")),
            });
            povm
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(MeasurementReport {
        measurement: section.measurement,
        family: family.name(),
        theta,
        dim: n,
        outcomes: povm.num_outcomes(),
        corrupted: section.corrupt_povm,
        passed,
        checks,
    })
}

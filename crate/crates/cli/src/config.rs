//! Run configuration: a single JSON document, validated before any work.

use std::path::{Path, PathBuf};

use qbound_core::numkit::min_eig_real;
use qbound_core::protosim::{Mode, ProtocolConfig, Stage1Mode};
use qbound_core::scalar::RMat;
use qbound_core::statemodel::{builtin_family, FamilyParams, SharedFamily};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Bounds,
    VerifyTheorem1,
    Simulate,
    CheckMeasurement,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Bounds => "bounds",
            Command::VerifyTheorem1 => "verify-theorem1",
            Command::Simulate => "simulate",
            Command::CheckMeasurement => "check-measurement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    #[serde(default)]
    pub params: FamilyParams,
    pub theta: Vec<f64>,
}

fn default_delta() -> f64 {
    0.1
}

fn default_restarts() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub n_values: Vec<u64>,
    pub trials: usize,
    pub mode: Mode,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_radius: Option<f64>,
    #[serde(default)]
    pub stage1: Stage1Mode,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub index: usize,
    pub factor: f64,
}

fn default_draws() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Scales one analytic derivative; negative control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_derivative: Option<Corruption>,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec {
            draws: default_draws(),
            corrupt_derivative: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementKind {
    FisherSymmetric,
    Matsumoto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub measurement: MeasurementKind,
    /// Scales the first effect by 1.5 before checking; negative control.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupt_povm: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub family: FamilySpec,
    /// Row-major weight; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

/// Family, point and weight after validation.
pub struct Validated {
    pub family: SharedFamily<f64>,
    pub theta: Vec<f64>,
    pub weight: RMat<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("config: cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks the sections shared by every command.
    pub fn validate(&self, command: Command) -> Result<Validated, CliError> {
        if let Some(c) = self.command {
            if c != command {
                return Err(CliError::config(format!(
                    "command: config names '{}' but '{}' was requested",
                    c.name(),
                    command.name()
                )));
            }
        }
        let family = builtin_family::<f64>(&self.family.name, self.family.params)
            .map_err(|e| CliError::config(format!("family.name: {e}")))?;
        let m = family.num_params();
        if self.family.theta.len() != m {
            return Err(CliError::config(format!(
                "family.theta: expected {m} entries, got {}",
                self.family.theta.len()
            )));
        }
        if self.family.theta.iter().any(|t| !t.is_finite()) || !family.contains(&self.family.theta) {
            return Err(CliError::config(format!(
                "family.theta: {:?} lies outside the parameter domain",
                self.family.theta
            )));
        }
        let weight = match &self.weight {
            None => RMat::identity(m, m),
            Some(w) => {
                if w.len() != m * m {
                    return Err(CliError::config(format!(
                        "weight: expected {} entries, got {}",
                        m * m,
                        w.len()
                    )));
                }
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(CliError::config("weight: entries must be finite"));
                }
                let w = RMat::from_row_slice(m, m, w);
                for i in 0..m {
                    for j in 0..i {
                        if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 {
                            return Err(CliError::config(format!(
                                "weight: not symmetric, entries ({i},{j}) = {} and ({j},{i}) = {}",
                                w[(i, j)],
                                w[(j, i)]
                            )));
                        }
                    }
                }
                let lo = min_eig_real(&w);
                if lo < -1e-12 {
                    return Err(CliError::config(format!(
                        "weight: not positive semidefinite, min eigenvalue {lo:.3e}"
                    )));
                }
                w
            }
        };
        match command {
            Command::Simulate if self.simulation.is_none() => {
                return Err(CliError::config("simulation: section required for simulate"));
            }
            Command::CheckMeasurement if self.check.is_none() => {
                return Err(CliError::config("check: section required for check-measurement"));
            }
            _ => {}
        }
        if let Some(c) = self.verify.as_ref().and_then(|v| v.corrupt_derivative) {
            if c.index >= m {
                return Err(CliError::config(format!(
                    "verify.corrupt_derivative.index: must be below {m}"
                )));
            }
        }
        Ok(Validated {
            family,
            theta: self.family.theta.clone(),
            weight,
        })
    }

    /// Protocol settings for `simulate`.
    pub fn protocol(&self) -> Result<ProtocolConfig, CliError> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| CliError::config("simulation: section required for simulate"))?;
        let m = self.family.theta.len();
        let weight = self
            .weight
            .clone()
            .unwrap_or_else(|| (0..m * m).map(|k| if k % (m + 1) == 0 { 1.0 } else { 0.0 }).collect());
        Ok(ProtocolConfig {
            family: self.family.name.clone(),
            params: self.family.params,
            theta: self.family.theta.clone(),
            weight,
            n_values: sim.n_values.clone(),
            trials: sim.trials,
            mode: sim.mode,
            delta: sim.delta,
            seed: self.seed,
            clip_radius: sim.clip_radius,
            stage1: sim.stage1,
            restarts: sim.restarts,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .as_ref()
            .and_then(|o| o.dir.clone())
            .unwrap_or_else(|| PathBuf::from("qbound-out"))
    }
}

//! Config-driven rate studies, theory checks and plots.

pub mod plot;
pub mod runner;
pub mod theory_check;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, MatrixScheme};
use crate::estimator::{AStepConfig, FitError};
use crate::evaluation::EvalError;
use crate::theory::TheoryError;

pub use plot::{emit_plots, render_plot, PlotGeometry};
pub use runner::{cell_data, fit_config, hot_start_rng, run_rate_study, run_rate_study_in, CellFilter, CellKey};
pub use theory_check::run_theory_check;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{failed} of {total} cells failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("plot: {0}")]
    Plot(String),
}

impl ExperimentError {
    /// `2` for too many failed cells, `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::TooManyFailures { .. } => 2,
            _ => 1,
        }
    }
}

fn default_master_seed() -> u64 {
    1
}
fn default_sample_sizes() -> Vec<usize> {
    vec![2000, 4000, 8000, 16000]
}
fn default_tokens() -> usize {
    3
}
fn default_dims() -> Vec<usize> {
    vec![5]
}
fn default_degrees() -> Vec<usize> {
    vec![3]
}
fn default_truth_basis() -> usize {
    16
}
fn default_lambda_scale() -> f64 {
    2.0
}
fn default_noise_sd() -> f64 {
    0.07
}
fn default_seeds() -> u64 {
    20
}
fn default_rounds() -> usize {
    4
}
fn default_matrix_penalty() -> f64 {
    1e-5
}
fn default_test_size() -> usize {
    500
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_bound() -> f64 {
    1.0
}

/// Every key is optional; omitted keys take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_sample_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    /// Spline degrees of the truth; one series per entry, `β = P - 1`.
    #[serde(default = "default_degrees")]
    pub degrees: Vec<usize>,
    #[serde(default = "default_truth_basis")]
    pub truth_basis: usize,
    /// Estimator degree; defaults to the truth degree.
    #[serde(default)]
    pub estimator_degree: Option<usize>,
    /// Defaults to 16 for degree ≤ 3 and 30 above.
    #[serde(default)]
    pub k_scale: Option<f64>,
    #[serde(default = "default_lambda_scale")]
    pub lambda_scale: f64,
    /// Fixed basis size instead of the growth rule.
    #[serde(default)]
    pub basis_size: Option<usize>,
    /// Fixed ridge instead of the growth rule.
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    /// First seed index; disjoint blocks give independent replications.
    #[serde(default)]
    pub seed_offset: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_matrix_penalty")]
    pub matrix_penalty: f64,
    #[serde(default)]
    pub a_step: AStepConfig,
    /// Hot-start perturbation sd; defaults to `5e-7 / d`.
    #[serde(default)]
    pub hot_start_sd: Option<f64>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub scheme: MatrixScheme,
    #[serde(default = "default_bound")]
    pub op_norm_bound: f64,
    /// Worker threads; defaults to the available cores.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Store per-cell wall time. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Full echo with defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.sample_sizes.is_empty() || self.dims.is_empty() || self.degrees.is_empty() {
            return bad("sample_sizes, dims and degrees must be nonempty");
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1");
        }
        if self.tokens < 2 {
            return bad("tokens must be at least 2");
        }
        if self.sample_sizes.iter().any(|&m| m < 3) || self.dims.contains(&0) {
            return bad("sample sizes must be at least 3 and dims positive");
        }
        if self.degrees.contains(&0) {
            return bad("degree 0 kernels have no smoothness");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be finite and nonnegative");
        }
        if self.test_size == 0 {
            return bad("test_size must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        if !(self.lambda_scale > 0.0 && self.op_norm_bound > 0.0) {
            return bad("lambda_scale and op_norm_bound must be positive");
        }
        self.a_step.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.theory.validate()
    }

    pub fn estimator_degree(&self, truth_degree: usize) -> usize {
        self.estimator_degree.unwrap_or(truth_degree)
    }

    pub fn k_scale(&self, estimator_degree: usize) -> f64 {
        self.k_scale.unwrap_or(if estimator_degree <= 3 { 16.0 } else { 30.0 })
    }
}

fn default_density_samples() -> usize {
    20_000
}
fn default_kbars() -> Vec<usize> {
    vec![16, 32]
}
fn default_holder() -> f64 {
    1.0
}
fn default_kl_samples() -> usize {
    2000
}
fn default_trials() -> usize {
    50
}
fn default_coercivity_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_dims_theory")]
    pub dim: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_density_samples")]
    pub density_samples: usize,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "default_kbars")]
    pub kbars: Vec<usize>,
    #[serde(default = "default_holder")]
    pub holder: f64,
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default)]
    pub max_words: Option<usize>,
    #[serde(default = "default_kl_samples")]
    pub kl_samples: usize,
    #[serde(default = "default_trials")]
    pub coercivity_trials: usize,
    #[serde(default = "default_coercivity_samples")]
    pub coercivity_samples: usize,
    /// Minimum-distance test repetitions; 0 skips the demonstration.
    #[serde(default)]
    pub fano_trials: usize,
    #[serde(default = "default_fano_samples")]
    pub fano_samples: usize,
}

fn default_dims_theory() -> usize {
    5
}
fn default_beta() -> f64 {
    2.0
}
fn default_fano_samples() -> usize {
    200
}

impl Default for TheoryConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty theory config parses")
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if let Some(&k) = self.kbars.iter().find(|&&k| k < 8) {
            return Err(ExperimentError::Config(format!("K̄ = {k} is below 8; the codebook needs at least 8 intervals")));
        }
        if self.dim == 0 || self.kbars.is_empty() || !(self.beta > 0.0 && self.holder > 0.0) {
            return Err(ExperimentError::Config("theory dim, kbars, beta and holder must be positive".into()));
        }
        if self.kl_samples == 0 || self.density_samples == 0 {
            return Err(ExperimentError::Config("theory sample counts must be positive".into()));
        }
        if self.coercivity_trials > 0 && self.coercivity_samples < 2 {
            return Err(ExperimentError::Config("coercivity needs at least 2 samples".into()));
        }
        Ok(())
    }
}

//! Alternating estimator for `(φ, A)`: a closed-form spline ridge solve for
//! the coefficients and first-order descent on the interaction matrix.

pub mod astep;
pub mod ridge;

use rand::{Rng, RngCore};
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{build_knots, Interval, SplineError, SplineKernel};
use crate::datagen::{operator_norm, DataError, Dataset, InteractionMatrix, Provenance};

pub use astep::{a_step, a_step_traced, loss_and_grad_a, AStepOutcome, AStepSettings};
pub use ridge::{design_matrix, normal_equations, ridge_objective, ridge_solve, solve_with_fallback, SolvePath};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Gram matrix factorization failed (ridge {ridge})")]
    Conditioning { ridge: f64 },
    #[error("non-finite loss or iterate at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("hot start needs the true matrix or an explicit initial matrix")]
    MissingInit,
    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<FitError> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

impl FitError {
    fn at_round(self, round: usize) -> Self {
        FitError::Round { round, source: Box::new(self) }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        match self {
            FitError::NonFinite { .. } => FitError::NonFinite { epoch },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AStepConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AStepConfig {
    fn default() -> Self {
        Self { optimizer: Optimizer::Adam, learning_rate: 1e-8, epochs: 20, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AStepConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FitError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(FitError::Config("epochs must be at least 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(FitError::Config("moment decays must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(FitError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Starting matrix of the alternating scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    /// The true matrix plus entrywise Gaussian noise; `sd` defaults to `5e-7 / d`.
    HotStart {
        #[serde(default)]
        sd: Option<f64>,
    },
    Explicit { matrix: InteractionMatrix },
    /// Entrywise Gaussian scaled to operator norm `ā / 2`.
    Cold,
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::HotStart { sd: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub degree: usize,
    pub basis_size: usize,
    pub ridge: f64,
    pub matrix_penalty: f64,
    pub rounds: usize,
    #[serde(default)]
    pub a_step: AStepConfig,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub project_norm: bool,
    #[serde(default = "unit")]
    pub op_norm_bound: f64,
    #[serde(default)]
    pub rank_bound: Option<usize>,
}

fn unit() -> f64 {
    1.0
}

impl FitConfig {
    /// Defaults for everything except the basis: `λ_A = 1e-5`, 4 rounds, Adam with lr `1e-8` for 20 epochs.
    pub fn new(degree: usize, basis_size: usize, ridge: f64) -> Self {
        Self {
            degree,
            basis_size,
            ridge,
            matrix_penalty: 1e-5,
            rounds: 4,
            a_step: AStepConfig::default(),
            init: InitMode::default(),
            project_norm: false,
            op_norm_bound: 1.0,
            rank_bound: None,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.rounds == 0 {
            return Err(FitError::Config("rounds must be at least 1".into()));
        }
        if self.degree == 0 {
            return Err(FitError::Config("the A-step needs degree >= 1".into()));
        }
        if self.basis_size < self.degree + 1 {
            return Err(FitError::Config(format!(
                "basis size {} below degree + 1 = {}",
                self.basis_size,
                self.degree + 1
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(FitError::Config(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if !(self.matrix_penalty.is_finite() && self.matrix_penalty >= 0.0) {
            return Err(FitError::Config(format!("matrix penalty must be nonnegative, got {}", self.matrix_penalty)));
        }
        if !(self.op_norm_bound.is_finite() && self.op_norm_bound > 0.0) {
            return Err(FitError::Config("operator norm bound must be positive".into()));
        }
        if let Some(r) = self.rank_bound {
            if r < 2 {
                return Err(FitError::Config(format!("rank bound must be at least 2, got {r}")));
            }
        }
        if let InitMode::HotStart { sd: Some(sd) } = self.init {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(FitError::Config(format!("hot-start sd must be nonnegative, got {sd}")));
            }
        }
        self.a_step.validate()
    }

    fn a_settings(&self) -> AStepSettings<'_> {
        AStepSettings {
            optimizer: &self.a_step,
            matrix_penalty: self.matrix_penalty,
            project_norm: self.project_norm,
            op_norm_bound: self.op_norm_bound,
            rank_bound: self.rank_bound,
        }
    }
}

/// `K = round(K_scale (M / ln M)^{1/(2β+1)})` and `λ = λ_scale K / (M (N-1))`.
pub fn select_hyperparams(
    samples: usize,
    tokens: usize,
    beta: f64,
    k_scale: f64,
    lambda_scale: f64,
) -> Result<(usize, f64), FitError> {
    let m = samples as f64;
    if m <= std::f64::consts::E {
        return Err(FitError::Config(format!("need M > e for a positive log, got {samples}")));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(FitError::Config(format!("smoothness must be positive, got {beta}")));
    }
    if tokens < 2 {
        return Err(FitError::Config(format!("need N >= 2, got {tokens}")));
    }
    let k = (k_scale * (m / m.ln()).powf(1.0 / (2.0 * beta + 1.0))).round();
    if !(k.is_finite() && k >= 1.0) {
        return Err(FitError::Config(format!("basis size rule gave {k}")));
    }
    let k = k as usize;
    Ok((k, lambda_scale * k as f64 / (m * (tokens as f64 - 1.0))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Condition number of `UᵀU + λI` at the final matrix.
    pub condition_number: f64,
    pub rounds_executed: usize,
    /// Ridge objective just before and just after each round's θ-step.
    pub ridge_before: Vec<f64>,
    pub ridge_after: Vec<f64>,
    /// A-step objective after each round's descent.
    pub a_step_loss: Vec<f64>,
    pub solve_paths: Vec<SolvePath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kernel: SplineKernel,
    pub matrix: InteractionMatrix,
    /// Training MSE `(1/(MN)) Σ (R - Y)²` at the hot start and after each round.
    pub trajectory: Vec<f64>,
    pub diagnostics: FitDiagnostics,
    pub config: FitConfig,
    pub provenance: Provenance,
}

impl FitResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results serialize")
    }
}

/// Resolves the starting matrix from the init mode and the optional true matrix.
pub fn initial_matrix<R: RngCore + ?Sized>(
    config: &FitConfig,
    dim: usize,
    hint: Option<&InteractionMatrix>,
    rng: &mut R,
) -> Result<InteractionMatrix, FitError> {
    let bound = config.op_norm_bound;
    match &config.init {
        InitMode::Explicit { matrix } => Ok(matrix.clone()),
        InitMode::HotStart { sd } => {
            let truth = hint.ok_or(FitError::MissingInit)?;
            let sd = sd.unwrap_or(5e-7 / dim as f64);
            if sd == 0.0 {
                return Ok(truth.clone());
            }
            let noise = Normal::new(0.0, sd).map_err(|e| FitError::Config(e.to_string()))?;
            let entries = truth.entries().iter().map(|a| a + rng.sample(noise)).collect();
            Ok(InteractionMatrix::unconstrained(dim, entries, bound)?)
        }
        InitMode::Cold => {
            let entries: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
            let s = 0.5 * bound / operator_norm(dim, &entries);
            Ok(InteractionMatrix::new(dim, entries.iter().map(|v| v * s).collect(), bound)?)
        }
    }
}

/// Hot-start θ-solve followed by `rounds` pairs of (A-step, θ-step).
pub fn fit<R: RngCore + ?Sized>(
    ds: &Dataset,
    config: &FitConfig,
    hint: Option<&InteractionMatrix>,
    rng: &mut R,
) -> Result<FitResult, FitError> {
    config.validate()?;
    if ds.samples() == 0 {
        return Err(FitError::Config("empty dataset".into()));
    }
    let d = ds.dim();
    if let Some(h) = hint {
        if h.dim() != d {
            return Err(FitError::Config(format!("hint has d={} but data d={d}", h.dim())));
        }
    }
    let knots = build_knots(config.degree, config.basis_size, Interval::symmetric(config.op_norm_bound))?;
    let mn = (ds.samples() * ds.tokens_per_sample()) as f64;
    let mut matrix = initial_matrix(config, d, hint, rng)?;

    let theta_step = |matrix: &InteractionMatrix| -> Result<(SplineKernel, SolvePath, nalgebra::DMatrix<f64>), FitError> {
        let ne = normal_equations(ds, matrix, &knots)?;
        let (theta, path) = solve_with_fallback(&ne.gram, &ne.rhs, config.ridge)?;
        Ok((SplineKernel::new(knots.clone(), theta.as_slice().to_vec())?, path, ne.gram))
    };

    let (mut kernel, path, mut gram) = theta_step(&matrix).map_err(|e| e.at_round(0))?;
    let mut diagnostics = FitDiagnostics {
        condition_number: f64::NAN,
        rounds_executed: 0,
        ridge_before: Vec::with_capacity(config.rounds),
        ridge_after: Vec::with_capacity(config.rounds),
        a_step_loss: Vec::with_capacity(config.rounds),
        solve_paths: vec![path],
    };
    let mut trajectory = Vec::with_capacity(config.rounds + 1);
    trajectory.push(ridge::residual_sum_squares(ds, &matrix, &kernel)? / mn);

    let settings = config.a_settings();
    for round in 1..=config.rounds {
        let step = (|| {
            let outcome = a_step_traced(ds, &matrix, &kernel, &settings)?;
            let a_loss = loss_and_grad_a(ds, &outcome.matrix, &kernel, config.matrix_penalty)?.0;
            let before = ridge_objective(ds, &outcome.matrix, &kernel, config.ridge)?;
            let (next_kernel, path, next_gram) = theta_step(&outcome.matrix)?;
            let sse = ridge::residual_sum_squares(ds, &outcome.matrix, &next_kernel)?;
            let after = sse + config.ridge * next_kernel.theta().iter().map(|t| t * t).sum::<f64>();
            Ok::<_, FitError>((outcome.matrix, next_kernel, next_gram, path, a_loss, before, after, sse))
        })()
        .map_err(|e| e.at_round(round))?;
        let (next_matrix, next_kernel, next_gram, path, a_loss, before, after, sse) = step;
        matrix = next_matrix;
        kernel = next_kernel;
        gram = next_gram;
        diagnostics.solve_paths.push(path);
        diagnostics.a_step_loss.push(a_loss);
        diagnostics.ridge_before.push(before);
        diagnostics.ridge_after.push(after);
        diagnostics.rounds_executed = round;
        trajectory.push(sse / mn);
    }
    diagnostics.condition_number = ridge::condition_number(&gram, config.ridge);
    Ok(FitResult {
        kernel,
        matrix,
        trajectory,
        diagnostics,
        config: config.clone(),
        provenance: ds.provenance.clone(),
    })
}

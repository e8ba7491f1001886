//! Synthetic data from the attention-style interacting particle model
//! `Y_i = (1/(N-1)) Σ_{j≠i} φ(X_iᵀ A X_j) + η_i`.

pub mod io;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{build_knots, Interval, SplineError, SplineKernel};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 tokens per sample, got {0}")]
    TooFewTokens(usize),
    #[error("need at least one sample, got {0}")]
    NoSamples(usize),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("noise level must be finite and nonnegative, got {0}")]
    InvalidNoise(f64),
    #[error("operator norm {norm} exceeds the bound {bound}")]
    NormBound { norm: f64, bound: f64 },
    #[error("operator norm bound must be positive, got {0}")]
    InvalidBound(f64),
    #[error("rank bound must satisfy 2 <= r, got {0}")]
    InvalidRank(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("score {score} at sample {sample} leaves [-{bound}, {bound}]")]
    ScoreOutOfBounds { sample: usize, score: f64, bound: f64 },
    #[error("shared-latent weight must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

/// Tokens stored row-major as `(m, i, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    samples: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenBatch {
    pub fn new(samples: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self, DataError> {
        validate_shape(samples, tokens, dim)?;
        if data.len() != samples * tokens * dim {
            return Err(DataError::Shape(format!(
                "{} values for {samples}x{tokens}x{dim} tokens",
                data.len()
            )));
        }
        Ok(Self { samples, tokens, dim, data })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The `N × d` block of sample `m`.
    pub fn sample(&self, m: usize) -> &[f64] {
        let stride = self.tokens * self.dim;
        &self.data[m * stride..(m + 1) * stride]
    }

    pub fn token(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.tokens + i) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// First `m` samples; used to nest datasets of increasing size.
    pub fn prefix(&self, m: usize) -> Result<Self, DataError> {
        if m == 0 || m > self.samples {
            return Err(DataError::Shape(format!("prefix {m} of {} samples", self.samples)));
        }
        let len = m * self.tokens * self.dim;
        Self::new(m, self.tokens, self.dim, self.data[..len].to_vec())
    }
}

fn validate_shape(samples: usize, tokens: usize, dim: usize) -> Result<(), DataError> {
    if samples == 0 {
        return Err(DataError::NoSamples(samples));
    }
    if tokens < 2 {
        return Err(DataError::TooFewTokens(tokens));
    }
    if dim == 0 {
        return Err(DataError::ZeroDimension);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    pub rank: usize,
    /// `d × r`, row-major.
    pub left: Vec<f64>,
    /// `d × r`, row-major; the matrix is `left · rightᵀ`.
    pub right: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixRepr {
    dim: usize,
    entries: Vec<f64>,
    op_norm_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factors: Option<LowRankFactors>,
}

/// Dense `d × d` interaction matrix with an operator-norm bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct InteractionMatrix {
    dim: usize,
    entries: Vec<f64>,
    op_norm_bound: f64,
    factors: Option<LowRankFactors>,
}

impl TryFrom<MatrixRepr> for InteractionMatrix {
    type Error = DataError;

    fn try_from(r: MatrixRepr) -> Result<Self, DataError> {
        match r.factors {
            Some(f) => Self::low_rank(r.dim, f.rank, f.left, f.right, r.op_norm_bound),
            None => Self::new(r.dim, r.entries, r.op_norm_bound),
        }
    }
}

impl From<InteractionMatrix> for MatrixRepr {
    fn from(a: InteractionMatrix) -> Self {
        Self { dim: a.dim, entries: a.entries, op_norm_bound: a.op_norm_bound, factors: a.factors }
    }
}

const NORM_TOL: f64 = 1e-6;

impl InteractionMatrix {
    /// Rejects matrices whose operator norm exceeds `op_norm_bound` by more than 1e-6 (relative).
    pub fn new(dim: usize, entries: Vec<f64>, op_norm_bound: f64) -> Result<Self, DataError> {
        check_dense(dim, &entries, op_norm_bound)?;
        let norm = operator_norm(dim, &entries);
        if norm > op_norm_bound * (1.0 + NORM_TOL) {
            return Err(DataError::NormBound { norm, bound: op_norm_bound });
        }
        Ok(Self { dim, entries, op_norm_bound, factors: None })
    }

    /// An optimizer iterate. The bound widens to a cheap upper estimate of the
    /// operator norm when that exceeds the nominal one, so it stays valid.
    pub fn unconstrained(dim: usize, entries: Vec<f64>, nominal_bound: f64) -> Result<Self, DataError> {
        check_dense(dim, &entries, nominal_bound)?;
        let upper = operator_norm_upper(dim, &entries);
        let op_norm_bound = nominal_bound.max(upper);
        Ok(Self { dim, entries, op_norm_bound, factors: None })
    }

    pub fn diagonal(diag: &[f64], op_norm_bound: f64) -> Result<Self, DataError> {
        let d = diag.len();
        let mut entries = vec![0.0; d * d];
        for (k, &v) in diag.iter().enumerate() {
            entries[k * d + k] = v;
        }
        Self::new(d, entries, op_norm_bound)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim], 1.0).expect("identity has unit norm")
    }

    /// `A = left · rightᵀ` with both factors `d × rank`, so `rank(A) ≤ rank`.
    pub fn low_rank(
        dim: usize,
        rank: usize,
        left: Vec<f64>,
        right: Vec<f64>,
        op_norm_bound: f64,
    ) -> Result<Self, DataError> {
        if rank < 2 {
            return Err(DataError::InvalidRank(rank));
        }
        if left.len() != dim * rank || right.len() != dim * rank {
            return Err(DataError::Shape(format!("factors must be {dim}x{rank}")));
        }
        let entries = factor_product(dim, rank, &left, &right);
        let mut a = Self::new(dim, entries, op_norm_bound)?;
        a.factors = Some(LowRankFactors { rank, left, right });
        Ok(a)
    }

    /// Low-rank iterate whose bound widens to its norm.
    pub fn low_rank_unconstrained(
        dim: usize,
        rank: usize,
        left: Vec<f64>,
        right: Vec<f64>,
        nominal_bound: f64,
    ) -> Result<Self, DataError> {
        if rank < 2 {
            return Err(DataError::InvalidRank(rank));
        }
        if left.len() != dim * rank || right.len() != dim * rank {
            return Err(DataError::Shape(format!("factors must be {dim}x{rank}")));
        }
        let entries = factor_product(dim, rank, &left, &right);
        let mut a = Self::unconstrained(dim, entries, nominal_bound)?;
        a.factors = Some(LowRankFactors { rank, left, right });
        Ok(a)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn op_norm_bound(&self) -> f64 {
        self.op_norm_bound
    }

    pub fn rank_bound(&self) -> Option<usize> {
        self.factors.as_ref().map(|f| f.rank)
    }

    pub fn factors(&self) -> Option<&LowRankFactors> {
        self.factors.as_ref()
    }

    pub fn op_norm(&self) -> f64 {
        operator_norm(self.dim, &self.entries)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    /// `out = A x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.entries[r * d..(r + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim;
        let mut total = 0.0;
        for (row, xr) in self.entries.chunks_exact(d).zip(x) {
            let ay: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
            total += xr * ay;
        }
        total
    }

    /// Matrix rescaled so its operator norm is at most `bound`.
    pub fn projected(&self, bound: f64) -> Result<Self, DataError> {
        let norm = self.op_norm();
        if norm <= bound {
            let mut a = self.clone();
            a.op_norm_bound = bound;
            return Ok(a);
        }
        let s = bound / norm;
        match &self.factors {
            Some(f) => {
                let left = f.left.iter().map(|v| v * s).collect();
                Self::low_rank(self.dim, f.rank, left, f.right.clone(), bound)
            }
            None => Self::new(self.dim, self.entries.iter().map(|v| v * s).collect(), bound),
        }
    }
}

fn check_dense(dim: usize, entries: &[f64], bound: f64) -> Result<(), DataError> {
    if dim == 0 {
        return Err(DataError::ZeroDimension);
    }
    if entries.len() != dim * dim {
        return Err(DataError::Shape(format!("{} entries for a {dim}x{dim} matrix", entries.len())));
    }
    if !(bound.is_finite() && bound > 0.0) {
        return Err(DataError::InvalidBound(bound));
    }
    Ok(())
}

fn factor_product(dim: usize, rank: usize, left: &[f64], right: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            out[r * dim + c] = (0..rank).map(|k| left[r * rank + k] * right[c * rank + k]).sum();
        }
    }
    out
}

/// `min(‖A‖_F, √(‖A‖_1 ‖A‖_∞))`, an upper bound on the operator norm.
pub fn operator_norm_upper(dim: usize, entries: &[f64]) -> f64 {
    let frob = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
    let row_max = (0..dim).map(|r| entries[r * dim..(r + 1) * dim].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let col_max = (0..dim).map(|c| (0..dim).map(|r| entries[r * dim + c].abs()).sum::<f64>()).fold(0.0, f64::max);
    frob.min((row_max * col_max).sqrt())
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn operator_norm(dim: usize, entries: &[f64]) -> f64 {
    let mut v: Vec<f64> = (0..dim).map(|k| 1.0 + 0.1 * (k as f64 + 1.0).sqrt()).collect();
    let mut av = vec![0.0; dim];
    let mut atav = vec![0.0; dim];
    let mut estimate = 0.0_f64;
    for _ in 0..20_000 {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        for r in 0..dim {
            av[r] = (0..dim).map(|c| entries[r * dim + c] * v[c]).sum();
        }
        for c in 0..dim {
            atav[c] = (0..dim).map(|r| entries[r * dim + c] * av[r]).sum();
        }
        let next = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut atav);
        if (next - estimate).abs() <= 1e-14 * next.max(f64::MIN_POSITIVE) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// How an interaction matrix is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixScheme {
    /// `A_11 = ā`, `A_kk ~ U[-ā, ā]` for `k > 1`, zero off the diagonal.
    #[default]
    Diagonal,
    /// Gaussian `d × r` factors, rescaled to `‖A‖_op = ā`.
    LowRank { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kernel: SplineKernel,
    pub matrix: InteractionMatrix,
    pub degree: usize,
    pub smoothness: f64,
    pub id: String,
}

impl GroundTruth {
    pub fn new(kernel: SplineKernel, matrix: InteractionMatrix) -> Self {
        let degree = kernel.degree();
        let id = truth_id(&kernel, &matrix);
        Self { kernel, matrix, degree, smoothness: degree as f64 - 1.0, id }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// `ā = 1`, kernel supported on `[-ā, ā]`.
    pub fn sup_abs_kernel(&self) -> f64 {
        // Clamped B-splines satisfy the convex hull property.
        self.kernel.theta().iter().fold(0.0_f64, |m, t| m.max(t.abs()))
    }

    /// Returns true when the matrix cannot have rank ≥ 2.
    pub fn is_rank_deficient(&self) -> bool {
        self.dim() < 2
    }
}

fn truth_id(kernel: &SplineKernel, matrix: &InteractionMatrix) -> String {
    // FNV-1a over the exact bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(kernel.degree() as u64);
    eat(kernel.theta().len() as u64);
    kernel.theta().iter().for_each(|t| eat(t.to_bits()));
    eat(matrix.dim() as u64);
    matrix.entries().iter().for_each(|a| eat(a.to_bits()));
    format!(
        "P{}-K{}-d{}-{h:016x}",
        kernel.degree(),
        kernel.theta().len(),
        matrix.dim()
    )
}

/// Draws `θ ~ N(0, I_K)` normalized to `‖θ‖ = √K` on the knot domain
/// `[-ā, ā]`, and `A` per `scheme` with `‖A‖_op ≤ ā`.
pub fn sample_ground_truth<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    degree: usize,
    basis_size: usize,
    scheme: MatrixScheme,
    op_norm_bound: f64,
) -> Result<GroundTruth, DataError> {
    if dim == 0 {
        return Err(DataError::ZeroDimension);
    }
    if !(op_norm_bound.is_finite() && op_norm_bound > 0.0) {
        return Err(DataError::InvalidBound(op_norm_bound));
    }
    let knots = build_knots(degree, basis_size, Interval::symmetric(op_norm_bound))?;
    let mut theta: Vec<f64> = (0..basis_size).map(|_| rng.sample(StandardNormal)).collect();
    let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    let scale = (basis_size as f64).sqrt() / norm;
    theta.iter_mut().for_each(|t| *t *= scale);
    let kernel = SplineKernel::new(knots, theta)?;

    let matrix = match scheme {
        MatrixScheme::Diagonal => {
            let mut diag = vec![op_norm_bound; dim];
            for v in diag.iter_mut().skip(1) {
                *v = rng.random_range(-op_norm_bound..=op_norm_bound);
            }
            InteractionMatrix::diagonal(&diag, op_norm_bound)?
        }
        MatrixScheme::LowRank { rank } => {
            if rank < 2 {
                return Err(DataError::InvalidRank(rank));
            }
            let mut left: Vec<f64> = (0..dim * rank).map(|_| rng.sample(StandardNormal)).collect();
            let right: Vec<f64> = (0..dim * rank).map(|_| rng.sample(StandardNormal)).collect();
            let norm = operator_norm(dim, &factor_product(dim, rank, &left, &right));
            let s = op_norm_bound / norm;
            left.iter_mut().for_each(|v| *v *= s);
            InteractionMatrix::low_rank(dim, rank, left, right, op_norm_bound)?
        }
    };
    Ok(GroundTruth::new(kernel, matrix))
}

/// Exchangeable token distributions.
pub trait TokenSampler: Sync {
    fn sample(&self, rng: &mut dyn RngCore, samples: usize, tokens: usize, dim: usize)
        -> Result<TokenBatch, DataError>;
}

/// I.i.d. `Unif[0,1]^d / √d` tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformTokens;

impl TokenSampler for UniformTokens {
    fn sample(
        &self,
        rng: &mut dyn RngCore,
        samples: usize,
        tokens: usize,
        dim: usize,
    ) -> Result<TokenBatch, DataError> {
        validate_shape(samples, tokens, dim)?;
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..samples * tokens * dim).map(|_| rng.random::<f64>() * scale).collect();
        TokenBatch::new(samples, tokens, dim, data)
    }
}

/// `X_i = (w Z + (1-w) U_i) / √d` with a per-sample latent `Z`; exchangeable
/// but dependent within a sample, and still inside `[0,1]^d / √d`.
#[derive(Debug, Clone, Copy)]
pub struct SharedLatentTokens {
    weight: f64,
}

impl SharedLatentTokens {
    pub fn new(weight: f64) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(DataError::InvalidWeight(weight));
        }
        Ok(Self { weight })
    }
}

impl TokenSampler for SharedLatentTokens {
    fn sample(
        &self,
        rng: &mut dyn RngCore,
        samples: usize,
        tokens: usize,
        dim: usize,
    ) -> Result<TokenBatch, DataError> {
        validate_shape(samples, tokens, dim)?;
        let scale = 1.0 / (dim as f64).sqrt();
        let w = self.weight;
        let mut data = Vec::with_capacity(samples * tokens * dim);
        let mut latent = vec![0.0; dim];
        for _ in 0..samples {
            latent.iter_mut().for_each(|z| *z = rng.random::<f64>());
            for _ in 0..tokens {
                for z in &latent {
                    data.push((w * z + (1.0 - w) * rng.random::<f64>()) * scale);
                }
            }
        }
        TokenBatch::new(samples, tokens, dim, data)
    }
}

/// Convenience for the default uniform sampler.
pub fn sample_tokens<R: RngCore>(
    rng: &mut R,
    samples: usize,
    tokens: usize,
    dim: usize,
) -> Result<TokenBatch, DataError> {
    UniformTokens.sample(rng, samples, tokens, dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on `[-σ√3, σ√3]`, so the variance is still `σ²`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sd: f64,
}

impl NoiseModel {
    pub fn gaussian(sd: f64) -> Self {
        Self { kind: NoiseKind::Gaussian, sd }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => self.sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
            NoiseKind::Uniform => {
                let h = self.sd * 3.0_f64.sqrt();
                rng.random_range(-h..=h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub stream: u64,
    pub truth_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokens: TokenBatch,
    /// `M × N`, row-major.
    pub responses: Vec<f64>,
    pub noise_sd: f64,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        tokens: TokenBatch,
        responses: Vec<f64>,
        noise_sd: f64,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        if responses.len() != tokens.samples() * tokens.tokens() {
            return Err(DataError::Shape(format!(
                "{} responses for {}x{} tokens",
                responses.len(),
                tokens.samples(),
                tokens.tokens()
            )));
        }
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(DataError::InvalidNoise(noise_sd));
        }
        Ok(Self { tokens, responses, noise_sd, provenance })
    }

    pub fn samples(&self) -> usize {
        self.tokens.samples()
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.tokens.tokens()
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim()
    }

    pub fn response(&self, m: usize) -> &[f64] {
        let n = self.tokens.tokens();
        &self.responses[m * n..(m + 1) * n]
    }

    pub fn prefix(&self, m: usize) -> Result<Self, DataError> {
        let tokens = self.tokens.prefix(m)?;
        let n = tokens.tokens();
        Self::new(tokens, self.responses[..m * n].to_vec(), self.noise_sd, self.provenance.clone())
    }
}

/// Fills `scores` (`N × N`, row-major) with `X_iᵀ A X_j`; the diagonal is left untouched.
pub fn pair_scores(matrix: &InteractionMatrix, sample: &[f64], n: usize, scratch: &mut [f64], scores: &mut [f64]) {
    let d = matrix.dim();
    // scratch holds A X_j for every j.
    for j in 0..n {
        matrix.apply(&sample[j * d..(j + 1) * d], &mut scratch[j * d..(j + 1) * d]);
    }
    for i in 0..n {
        let xi = &sample[i * d..(i + 1) * d];
        for j in 0..n {
            if i != j {
                let axj = &scratch[j * d..(j + 1) * d];
                scores[i * n + j] = xi.iter().zip(axj).map(|(a, b)| a * b).sum();
            }
        }
    }
}

/// `R[X]_i = (1/(N-1)) Σ_{j≠i} φ(X_iᵀ A X_j)` for one `N × d` sample.
pub fn forward_operator(kernel: &SplineKernel, matrix: &InteractionMatrix, sample: &[f64]) -> Result<Vec<f64>, DataError> {
    let d = matrix.dim();
    if !sample.len().is_multiple_of(d) {
        return Err(DataError::Shape(format!("{} values are not a multiple of d={d}", sample.len())));
    }
    let n = sample.len() / d;
    if n < 2 {
        return Err(DataError::TooFewTokens(n));
    }
    let mut out = vec![0.0; n];
    forward_into(kernel, matrix, sample, n, &mut vec![0.0; n * d], &mut vec![0.0; n * n], &mut out);
    Ok(out)
}

fn forward_into(
    kernel: &SplineKernel,
    matrix: &InteractionMatrix,
    sample: &[f64],
    n: usize,
    scratch: &mut [f64],
    scores: &mut [f64],
    out: &mut [f64],
) {
    pair_scores(matrix, sample, n, scratch, scores);
    let inv = 1.0 / (n as f64 - 1.0);
    for i in 0..n {
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| kernel.eval(scores[i * n + j])).sum();
        out[i] = s * inv;
    }
}

/// Clean responses for every sample in a batch, `M × N` row-major.
pub fn forward_batch(kernel: &SplineKernel, matrix: &InteractionMatrix, tokens: &TokenBatch) -> Result<Vec<f64>, DataError> {
    if matrix.dim() != tokens.dim() {
        return Err(DataError::Shape(format!("matrix d={} vs tokens d={}", matrix.dim(), tokens.dim())));
    }
    let (n, d) = (tokens.tokens(), tokens.dim());
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    let mut out = vec![0.0; tokens.samples() * n];
    for m in 0..tokens.samples() {
        forward_into(kernel, matrix, tokens.sample(m), n, &mut scratch, &mut scores, &mut out[m * n..(m + 1) * n]);
    }
    Ok(out)
}

/// Uniform tokens plus Gaussian noise.
pub fn generate_dataset<R: RngCore>(
    rng: &mut R,
    truth: &GroundTruth,
    samples: usize,
    tokens: usize,
    noise_sd: f64,
) -> Result<Dataset, DataError> {
    generate_dataset_with(rng, truth, samples, tokens, &UniformTokens, NoiseModel::gaussian(noise_sd))
}

/// Draws a noise seed, then all tokens, then the noise from its own stream.
/// Consequently the first `m` samples do not depend on the total `M`, and
/// rerunning with `sd = 0` reproduces the clean responses on the same tokens.
pub fn generate_dataset_with<R: RngCore>(
    rng: &mut R,
    truth: &GroundTruth,
    samples: usize,
    tokens: usize,
    sampler: &dyn TokenSampler,
    noise: NoiseModel,
) -> Result<Dataset, DataError> {
    if !(noise.sd.is_finite() && noise.sd >= 0.0) {
        return Err(DataError::InvalidNoise(noise.sd));
    }
    let dim = truth.dim();
    let noise_seed = rng.next_u64();
    let batch = sampler.sample(rng, samples, tokens, dim)?;
    check_scores(&truth.matrix, &batch)?;
    let mut responses = forward_batch(&truth.kernel, &truth.matrix, &batch)?;
    if noise.sd > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        responses.iter_mut().for_each(|y| *y += noise.draw(&mut noise_rng));
    }
    let provenance = Provenance { seed: 0, stream: 0, truth_id: truth.id.clone() };
    Dataset::new(batch, responses, noise.sd, provenance)
}

/// Verifies `|X_iᵀ A X_j| ≤ ā` over every pair of the batch.
pub fn check_scores(matrix: &InteractionMatrix, batch: &TokenBatch) -> Result<(), DataError> {
    let (n, d) = (batch.tokens(), batch.dim());
    let bound = matrix.op_norm_bound();
    let limit = bound * (1.0 + 1e-12) + 1e-12;
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    for m in 0..batch.samples() {
        pair_scores(matrix, batch.sample(m), n, &mut scratch, &mut scores);
        for i in 0..n {
            for j in 0..n {
                let s = scores[i * n + j];
                if i != j && s.abs() > limit {
                    return Err(DataError::ScoreOutOfBounds { sample: m, score: s, bound });
                }
            }
        }
    }
    Ok(())
}

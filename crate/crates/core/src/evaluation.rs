//! Test-set error metrics and log-log rate fits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::SplineKernel;
use crate::datagen::{pair_scores, GroundTruth, InteractionMatrix, TokenBatch};
use crate::estimator::FitResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("matrix d={matrix} does not match tokens d={tokens}")]
    Dimension { matrix: usize, tokens: usize },
    #[error("slope fit needs at least 3 distinct sample sizes, got {0}")]
    TooFewPoints(usize),
    #[error("errors and sample sizes must be positive and finite, got ({m}, {err})")]
    NonPositive { m: f64, err: f64 },
    #[error("smoothness must be positive, got {0}")]
    Smoothness(f64),
    #[error("metric {0} is not finite")]
    NonFinite(f64),
}

/// Anything of the form `g(x, y) = φ(xᵀ A y)`.
pub trait Interaction {
    fn kernel(&self) -> &SplineKernel;
    fn matrix(&self) -> &InteractionMatrix;
}

impl Interaction for FitResult {
    fn kernel(&self) -> &SplineKernel {
        &self.kernel
    }
    fn matrix(&self) -> &InteractionMatrix {
        &self.matrix
    }
}

impl Interaction for GroundTruth {
    fn kernel(&self) -> &SplineKernel {
        &self.kernel
    }
    fn matrix(&self) -> &InteractionMatrix {
        &self.matrix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairInteraction {
    pub kernel: SplineKernel,
    pub matrix: InteractionMatrix,
}

impl Interaction for PairInteraction {
    fn kernel(&self) -> &SplineKernel {
        &self.kernel
    }
    fn matrix(&self) -> &InteractionMatrix {
        &self.matrix
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestErrors {
    /// Mean over `(m, i)` of `(R_ĝ[X]_i - R_g[X]_i)²`.
    pub composed_mse: f64,
    /// Mean over ordered off-diagonal pairs of `(ĝ - g)²`.
    pub pairwise_l2: f64,
}

/// Both metrics in one pass over the test tokens.
pub fn test_errors(est: &dyn Interaction, truth: &dyn Interaction, tokens: &TokenBatch) -> Result<TestErrors, EvalError> {
    for m in [est.matrix(), truth.matrix()] {
        if m.dim() != tokens.dim() {
            return Err(EvalError::Dimension { matrix: m.dim(), tokens: tokens.dim() });
        }
    }
    let (n, d) = (tokens.tokens(), tokens.dim());
    let mut scratch = vec![0.0; n * d];
    let mut s_est = vec![0.0; n * n];
    let mut s_true = vec![0.0; n * n];
    let inv = 1.0 / (n as f64 - 1.0);
    let (mut composed, mut pairwise) = (0.0, 0.0);
    for m in 0..tokens.samples() {
        let x = tokens.sample(m);
        pair_scores(est.matrix(), x, n, &mut scratch, &mut s_est);
        pair_scores(truth.matrix(), x, n, &mut scratch, &mut s_true);
        for i in 0..n {
            let mut diff = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let delta = est.kernel().eval(s_est[i * n + j]) - truth.kernel().eval(s_true[i * n + j]);
                diff += delta;
                pairwise += delta * delta;
            }
            composed += (diff * inv).powi(2);
        }
    }
    let rows = (tokens.samples() * n) as f64;
    let out = TestErrors { composed_mse: composed / rows, pairwise_l2: pairwise / (rows * (n as f64 - 1.0)) };
    for v in [out.composed_mse, out.pairwise_l2] {
        if !v.is_finite() {
            return Err(EvalError::NonFinite(v));
        }
    }
    Ok(out)
}

pub fn composed_mse(est: &dyn Interaction, truth: &dyn Interaction, tokens: &TokenBatch) -> Result<f64, EvalError> {
    test_errors(est, truth, tokens).map(|e| e.composed_mse)
}

pub fn pairwise_l2(est: &dyn Interaction, truth: &dyn Interaction, tokens: &TokenBatch) -> Result<f64, EvalError> {
    test_errors(est, truth, tokens).map(|e| e.pairwise_l2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `ln(error)` on `ln(M)`.
pub fn rate_slope(points: &[(f64, f64)]) -> Result<SlopeFit, EvalError> {
    for &(m, e) in points {
        if !(m.is_finite() && e.is_finite() && m > 0.0 && e > 0.0) {
            return Err(EvalError::NonPositive { m, err: e });
        }
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EvalError::TooFewPoints(distinct.len()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(SlopeFit { slope, intercept, r_squared })
}

/// `-2β / (2β + 1)`.
pub fn theoretical_slope(beta: f64) -> Result<f64, EvalError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(EvalError::Smoothness(beta));
    }
    Ok(-2.0 * beta / (2.0 * beta + 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
    pub seed: u64,
    pub composed_mse: f64,
    pub pairwise_l2: f64,
    pub wall_s: f64,
}

pub const RECORD_HEADER: &str = "d,M,N,beta,seed,composed_mse,pairwise_l2,wall_s";

impl ErrorRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.d, self.m, self.n, self.beta, self.seed, self.composed_mse, self.pairwise_l2, self.wall_s
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            d: f[0].parse().ok()?,
            m: f[1].parse().ok()?,
            n: f[2].parse().ok()?,
            beta: f[3].parse().ok()?,
            seed: f[4].parse().ok()?,
            composed_mse: f[5].parse().ok()?,
            pairwise_l2: f[6].parse().ok()?,
            wall_s: f[7].parse().ok()?,
        })
    }
}

/// Median and quartiles by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub d: usize,
    pub beta: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seeds: usize,
    pub median_composed: f64,
    pub q1_composed: f64,
    pub q3_composed: f64,
    pub median_pairwise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSlope {
    pub d: usize,
    pub beta: f64,
    pub fit: SlopeFit,
    pub theoretical: f64,
    /// Cells flagged because the true matrix is rank deficient (`d = 1`).
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub beta: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyReport {
    pub records: Vec<ErrorRecord>,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SeriesSlope>,
    pub failures: Vec<CellFailure>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl RateStudyReport {
    /// Aggregates medians per `(d, β, M)` and fits one slope per `(d, β)` series
    /// that has at least three distinct `M`.
    pub fn from_records(mut records: Vec<ErrorRecord>, failures: Vec<CellFailure>) -> Self {
        records.sort_by(|a, b| {
            (a.d, a.beta.to_bits(), a.m, a.seed).cmp(&(b.d, b.beta.to_bits(), b.m, b.seed))
        });
        let mut groups: BTreeMap<(usize, u64, usize), Vec<&ErrorRecord>> = BTreeMap::new();
        for r in &records {
            groups.entry((r.d, r.beta.to_bits(), r.m)).or_default().push(r);
        }
        let cells: Vec<CellSummary> = groups
            .values()
            .map(|rs| {
                let mut c: Vec<f64> = rs.iter().map(|r| r.composed_mse).collect();
                let mut p: Vec<f64> = rs.iter().map(|r| r.pairwise_l2).collect();
                c.sort_by(f64::total_cmp);
                p.sort_by(f64::total_cmp);
                CellSummary {
                    d: rs[0].d,
                    beta: rs[0].beta,
                    m: rs[0].m,
                    seeds: rs.len(),
                    median_composed: quantile(&c, 0.5),
                    q1_composed: quantile(&c, 0.25),
                    q3_composed: quantile(&c, 0.75),
                    median_pairwise: quantile(&p, 0.5),
                }
            })
            .collect();
        let mut series: BTreeMap<(usize, u64), Vec<&CellSummary>> = BTreeMap::new();
        for c in &cells {
            series.entry((c.d, c.beta.to_bits())).or_default().push(c);
        }
        let slopes = series
            .values()
            .filter_map(|cs| {
                let pts: Vec<(f64, f64)> = cs.iter().map(|c| (c.m as f64, c.median_composed)).collect();
                let fit = rate_slope(&pts).ok()?;
                Some(SeriesSlope {
                    d: cs[0].d,
                    beta: cs[0].beta,
                    fit,
                    theoretical: theoretical_slope(cs[0].beta).ok()?,
                    rank_deficient: cs[0].d < 2,
                })
            })
            .collect();
        Self { records, cells, slopes, failures, config: None }
    }

    pub fn slope(&self, d: usize, beta: f64) -> Option<&SeriesSlope> {
        self.slopes.iter().find(|s| s.d == d && s.beta == beta)
    }

    pub fn cells_for(&self, d: usize, beta: f64) -> Vec<&CellSummary> {
        self.cells.iter().filter(|c| c.d == d && c.beta == beta).collect()
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from(RECORD_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

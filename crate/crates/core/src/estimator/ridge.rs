//! θ-step: averaged-basis design, normal equations and the regularized solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::{KnotVector, SplineKernel, MAX_DEGREE};
use crate::datagen::{pair_scores, Dataset, InteractionMatrix};

use super::FitError;

/// Which factorization produced a θ-step solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    Cholesky,
    Jitter,
    LeastSquares,
}

/// Accumulates one design row `(1/(N-1)) Σ_{j≠i} B(u_ij)` as a sparse list.
struct RowBuilder {
    dense: Vec<f64>,
    touched: Vec<usize>,
    mark: Vec<bool>,
    basis: [f64; MAX_DEGREE + 1],
}

impl RowBuilder {
    fn new(k: usize) -> Self {
        Self { dense: vec![0.0; k], touched: Vec::new(), mark: vec![false; k], basis: [0.0; MAX_DEGREE + 1] }
    }

    fn build(&mut self, knots: &KnotVector, scores: &[f64], n: usize, i: usize) {
        for &t in &self.touched {
            self.dense[t] = 0.0;
            self.mark[t] = false;
        }
        self.touched.clear();
        let p = knots.degree();
        let inv = 1.0 / (n as f64 - 1.0);
        for j in (0..n).filter(|&j| j != i) {
            let first = knots.eval_nonzero(scores[i * n + j], &mut self.basis[..=p]);
            for (r, &b) in self.basis[..=p].iter().enumerate() {
                let k = first + r;
                if !self.mark[k] {
                    self.mark[k] = true;
                    self.touched.push(k);
                }
                self.dense[k] += b * inv;
            }
        }
    }
}

/// Dense `MN × K` matrix with rows ordered `(m, i)`.
pub fn design_matrix(ds: &Dataset, matrix: &InteractionMatrix, knots: &KnotVector) -> Result<DMatrix<f64>, FitError> {
    check_dims(ds, matrix)?;
    let (m, n, d, k) = (ds.samples(), ds.tokens_per_sample(), ds.dim(), knots.basis_size());
    let mut u = DMatrix::zeros(m * n, k);
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    let mut row = RowBuilder::new(k);
    for s in 0..m {
        pair_scores(matrix, ds.tokens.sample(s), n, &mut scratch, &mut scores);
        for i in 0..n {
            row.build(knots, &scores, n, i);
            for &c in &row.touched {
                u[(s * n + i, c)] = row.dense[c];
            }
        }
    }
    Ok(u)
}

pub(crate) fn check_dims(ds: &Dataset, matrix: &InteractionMatrix) -> Result<(), FitError> {
    if ds.dim() != matrix.dim() {
        return Err(FitError::Config(format!("dataset d={} but matrix d={}", ds.dim(), matrix.dim())));
    }
    Ok(())
}

/// `UᵀU` and `Uᵀy` accumulated row by row without forming `U`.
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

pub fn normal_equations(ds: &Dataset, matrix: &InteractionMatrix, knots: &KnotVector) -> Result<NormalEquations, FitError> {
    check_dims(ds, matrix)?;
    let (m, n, d, k) = (ds.samples(), ds.tokens_per_sample(), ds.dim(), knots.basis_size());
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    let mut row = RowBuilder::new(k);
    for s in 0..m {
        pair_scores(matrix, ds.tokens.sample(s), n, &mut scratch, &mut scores);
        let y = ds.response(s);
        for (i, yi) in y.iter().enumerate().take(n) {
            row.build(knots, &scores, n, i);
            for &a in &row.touched {
                let va = row.dense[a];
                rhs[a] += va * yi;
                for &b in &row.touched {
                    gram[a * k + b] += va * row.dense[b];
                }
            }
        }
    }
    Ok(NormalEquations { gram: DMatrix::from_row_slice(k, k, &gram), rhs: DVector::from_vec(rhs) })
}

/// `θ = (UᵀU + λI)^{-1} Uᵀy` by Cholesky; fails with `Conditioning` if the
/// factorization does not exist, leaving the jitter retry to the caller.
pub fn ridge_solve(design: &DMatrix<f64>, responses: &[f64], ridge: f64) -> Result<Vec<f64>, FitError> {
    if design.nrows() != responses.len() {
        return Err(FitError::Config(format!("{} rows but {} responses", design.nrows(), responses.len())));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(FitError::Config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let gram = design.transpose() * design;
    let rhs = design.transpose() * DVector::from_column_slice(responses);
    cholesky_solve(&gram, &rhs, ridge)
        .map(|t| t.as_slice().to_vec())
        .ok_or(FitError::Conditioning { ridge })
}

fn cholesky_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>, shift: f64) -> Option<DVector<f64>> {
    let mut g = gram.clone();
    for k in 0..g.nrows() {
        g[(k, k)] += shift;
    }
    let x = g.cholesky()?.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Cholesky, then a `1e-10·trace/K` diagonal jitter, then an SVD least-squares solve.
pub fn solve_with_fallback(gram: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, SolvePath), FitError> {
    if let Some(x) = cholesky_solve(gram, rhs, ridge) {
        return Ok((x, SolvePath::Cholesky));
    }
    let k = gram.nrows() as f64;
    let jitter = 1e-10 * gram.trace() / k;
    if let Some(x) = cholesky_solve(gram, rhs, ridge + jitter) {
        return Ok((x, SolvePath::Jitter));
    }
    let mut g = gram.clone();
    for i in 0..g.nrows() {
        g[(i, i)] += ridge;
    }
    let x = g
        .svd(true, true)
        .solve(rhs, 1e-12 * gram.trace().max(f64::MIN_POSITIVE))
        .map_err(|_| FitError::Conditioning { ridge })?;
    if x.iter().all(|v| v.is_finite()) {
        Ok((x, SolvePath::LeastSquares))
    } else {
        Err(FitError::Conditioning { ridge })
    }
}

/// `‖Uθ - y‖² + λ‖θ‖²`, with `Uθ` evaluated directly through the kernel.
pub fn ridge_objective(ds: &Dataset, matrix: &InteractionMatrix, kernel: &SplineKernel, ridge: f64) -> Result<f64, FitError> {
    let sse = residual_sum_squares(ds, matrix, kernel)?;
    Ok(sse + ridge * kernel.theta().iter().map(|t| t * t).sum::<f64>())
}

pub(crate) fn residual_sum_squares(ds: &Dataset, matrix: &InteractionMatrix, kernel: &SplineKernel) -> Result<f64, FitError> {
    check_dims(ds, matrix)?;
    let (n, d) = (ds.tokens_per_sample(), ds.dim());
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    let inv = 1.0 / (n as f64 - 1.0);
    let mut sse = 0.0;
    for s in 0..ds.samples() {
        pair_scores(matrix, ds.tokens.sample(s), n, &mut scratch, &mut scores);
        let y = ds.response(s);
        for i in 0..n {
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| kernel.eval(scores[i * n + j])).sum::<f64>() * inv;
            sse += (r - y[i]).powi(2);
        }
    }
    Ok(sse)
}

/// Ratio of extreme eigenvalues of `UᵀU + λI`.
pub fn condition_number(gram: &DMatrix<f64>, ridge: f64) -> f64 {
    let mut g = gram.clone();
    for k in 0..g.nrows() {
        g[(k, k)] += ridge;
    }
    let eig = g.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{build_knots, Interval};
    use crate::datagen::{generate_dataset, sample_ground_truth, MatrixScheme, Provenance, TokenBatch};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset(m: usize, n: usize, d: usize, seed: u64) -> (Dataset, InteractionMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_ground_truth(&mut rng, d, 3, 10, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, m, n, 0.05).unwrap();
        (ds, t.matrix)
    }

    #[test]
    fn design_rows_sum_to_one() {
        let (ds, a) = small_dataset(40, 4, 3, 1);
        let knots = build_knots(3, 12, Interval::symmetric(1.0)).unwrap();
        let u = design_matrix(&ds, &a, &knots).unwrap();
        for r in 0..u.nrows() {
            assert_abs_diff_eq!(u.row(r).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn indicator_basis_for_single_pair() {
        let (ds, a) = small_dataset(15, 2, 2, 2);
        let knots = build_knots(0, 4, Interval::symmetric(1.0)).unwrap();
        let u = design_matrix(&ds, &a, &knots).unwrap();
        for m in 0..15 {
            let s = a.bilinear(ds.tokens.token(m, 0), ds.tokens.token(m, 1));
            let bin = (((s + 1.0) / 0.5).floor() as usize).min(3);
            for c in 0..4 {
                assert_eq!(u[(2 * m, c)], if c == bin { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn design_matches_brute_force_linear() {
        // Hat functions on breakpoints -1, -1/3, 1/3, 1.
        let hat = |c: usize, u: f64| {
            let centers = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
            (1.0 - (u - centers[c]).abs() * 1.5).max(0.0)
        };
        let tokens = TokenBatch::new(1, 3, 2, vec![0.1, 0.6, 0.7, 0.2, 0.3, 0.65]).unwrap();
        let ds = Dataset::new(tokens, vec![0.0; 3], 0.0, Provenance::default()).unwrap();
        let a = InteractionMatrix::new(2, vec![0.9, 0.3, -0.4, -0.8], 1.5).unwrap();
        let knots = build_knots(1, 4, Interval::symmetric(1.0)).unwrap();
        let u = design_matrix(&ds, &a, &knots).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mut expected = 0.0;
                for j in 0..3 {
                    if j != i {
                        expected += hat(c, a.bilinear(ds.tokens.token(0, i), ds.tokens.token(0, j))) / 2.0;
                    }
                }
                assert_abs_diff_eq!(u[(i, c)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn normal_equations_agree_with_dense_design() {
        let (ds, a) = small_dataset(30, 3, 4, 3);
        let knots = build_knots(3, 9, Interval::symmetric(1.0)).unwrap();
        let u = design_matrix(&ds, &a, &knots).unwrap();
        let ne = normal_equations(&ds, &a, &knots).unwrap();
        let y = DVector::from_column_slice(&ds.responses);
        assert!((u.transpose() * &u - &ne.gram).amax() < 1e-12);
        assert!((u.transpose() * y - &ne.rhs).amax() < 1e-12);
    }

    #[test]
    fn identity_design_returns_responses() {
        let u = DMatrix::<f64>::identity(4, 4);
        let y = [1.0, -2.0, 0.5, 3.0];
        let theta = ridge_solve(&u, &y, 0.0).unwrap();
        for (a, b) in theta.iter().zip(&y) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let (ds, a) = small_dataset(20, 3, 2, 4);
        let knots = build_knots(3, 8, Interval::symmetric(1.0)).unwrap();
        let u = design_matrix(&ds, &a, &knots).unwrap();
        let theta = ridge_solve(&u, &ds.responses, 1e9).unwrap();
        let uty = (u.transpose() * DVector::from_column_slice(&ds.responses)).norm();
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(norm <= uty / 1e9 * (1.0 + 1e-9));
        assert!(norm < 1e-6);
    }

    #[test]
    fn small_system_matches_explicit_inverse() {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.25]);
        let y = [1.0, -0.5, 2.0];
        let lambda = 0.3;
        // Closed-form 2x2 inverse of G = UᵀU + λI.
        let (g11, g12, g22) = (1.0 + 0.25 + 9.0 + lambda, 2.0 - 0.5 + 0.75, 4.0 + 1.0 + 0.0625 + lambda);
        let (b1, b2) = (1.0 - 0.25 + 6.0, 2.0 + 0.5 + 0.5);
        let det = g11 * g22 - g12 * g12;
        let expected = [(g22 * b1 - g12 * b2) / det, (g11 * b2 - g12 * b1) / det];
        let theta = ridge_solve(&u, &y, lambda).unwrap();
        assert_abs_diff_eq!(theta[0], expected[0], epsilon = 1e-10);
        assert_abs_diff_eq!(theta[1], expected[1], epsilon = 1e-10);
    }

    #[test]
    fn singular_gram_without_ridge_signals_and_fallback_recovers() {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0]);
        let y = [1.0, 2.0, -1.0];
        assert!(matches!(ridge_solve(&u, &y, 0.0), Err(FitError::Conditioning { .. })));
        let gram = u.transpose() * &u;
        let rhs = u.transpose() * DVector::from_column_slice(&y);
        let (x, path) = solve_with_fallback(&gram, &rhs, 0.0).unwrap();
        assert_ne!(path, SolvePath::Cholesky);
        let fitted = &u * &x;
        for (f, t) in fitted.iter().zip(&y) {
            assert_abs_diff_eq!(f, t, epsilon = 1e-6);
        }
    }

    #[test]
    fn objective_matches_normal_equations() {
        let (ds, a) = small_dataset(25, 3, 3, 5);
        let knots = build_knots(3, 10, Interval::symmetric(1.0)).unwrap();
        let ne = normal_equations(&ds, &a, &knots).unwrap();
        let (theta, _) = solve_with_fallback(&ne.gram, &ne.rhs, 0.01).unwrap();
        let kernel = SplineKernel::new(knots.clone(), theta.as_slice().to_vec()).unwrap();
        let obj = ridge_objective(&ds, &a, &kernel, 0.01).unwrap();
        let y = DVector::from_column_slice(&ds.responses);
        let u = design_matrix(&ds, &a, &knots).unwrap();
        let direct = (&u * &theta - y).norm_squared() + 0.01 * theta.norm_squared();
        assert_abs_diff_eq!(obj, direct, epsilon = 1e-10);
        assert!(condition_number(&ne.gram, 0.01) >= 1.0);
    }
}

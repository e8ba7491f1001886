//! A-step: exact loss gradient with respect to the interaction matrix and
//! first-order descent on it.

use nalgebra::DMatrix;

use crate::bspline::SplineKernel;
use crate::datagen::{pair_scores, Dataset, InteractionMatrix};

use super::ridge::check_dims;
use super::{AStepConfig, FitError, Optimizer};

/// `(1/(MN)) Σ (R_i - Y_i)² + (λ/2)‖A‖_F²` and its gradient (row-major `d × d`).
///
/// With `r_i = R_i - Y_i` and `u_ij = X_iᵀ A X_j`, the data gradient is
/// `2/(MN(N-1)) Σ_m Xᵀ C X` where `C_ij = r_i φ'(u_ij)` off the diagonal.
pub fn loss_and_grad_a(
    ds: &Dataset,
    matrix: &InteractionMatrix,
    kernel: &SplineKernel,
    matrix_penalty: f64,
) -> Result<(f64, Vec<f64>), FitError> {
    check_dims(ds, matrix)?;
    if kernel.degree() == 0 {
        return Err(FitError::Config("the A-step needs a kernel of degree >= 1".into()));
    }
    let (m, n, d) = (ds.samples(), ds.tokens_per_sample(), ds.dim());
    let inv = 1.0 / (n as f64 - 1.0);
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    let mut slope = vec![0.0; n * n];
    let mut cx = vec![0.0; n * d];
    let mut grad = vec![0.0; d * d];
    let mut sse = 0.0;
    for s in 0..m {
        let x = ds.tokens.sample(s);
        let y = ds.response(s);
        pair_scores(matrix, x, n, &mut scratch, &mut scores);
        // C overwrites `slope` in place once the residual is known.
        for i in 0..n {
            let mut r = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let (v, dv) = kernel.eval_with_deriv(scores[i * n + j]);
                r += v;
                slope[i * n + j] = dv;
            }
            let resid = r * inv - y[i];
            sse += resid * resid;
            for j in (0..n).filter(|&j| j != i) {
                slope[i * n + j] *= resid;
            }
            slope[i * n + i] = 0.0;
        }
        // cx = C X, then grad += Xᵀ (C X).
        for i in 0..n {
            let row = &mut cx[i * d..(i + 1) * d];
            row.iter_mut().for_each(|v| *v = 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let c = slope[i * n + j];
                for (v, xj) in row.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                    *v += c * xj;
                }
            }
        }
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let ci = &cx[i * d..(i + 1) * d];
            for (a, xa) in xi.iter().enumerate() {
                let g = &mut grad[a * d..(a + 1) * d];
                for (gv, cv) in g.iter_mut().zip(ci) {
                    *gv += xa * cv;
                }
            }
        }
    }
    let scale = 1.0 / (m as f64 * n as f64);
    let gscale = 2.0 * scale * inv;
    let entries = matrix.entries();
    grad.iter_mut().zip(entries).for_each(|(g, a)| *g = *g * gscale + matrix_penalty * a);
    let loss = sse * scale + 0.5 * matrix_penalty * matrix.frobenius_sq();
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FitError::NonFinite { epoch: 0 });
    }
    Ok((loss, grad))
}

/// Settings the A-step needs beyond the optimizer.
#[derive(Debug, Clone, Copy)]
pub struct AStepSettings<'a> {
    pub optimizer: &'a AStepConfig,
    pub matrix_penalty: f64,
    pub project_norm: bool,
    pub op_norm_bound: f64,
    pub rank_bound: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AStepOutcome {
    pub matrix: InteractionMatrix,
    /// Objective before each epoch's update.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &AStepConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * grad[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Parameter vector the optimizer moves: `A` itself or the factors `(Q, K)`.
enum Param {
    Dense(Vec<f64>),
    Factored { rank: usize, left: Vec<f64>, right: Vec<f64> },
}

impl Param {
    fn from_matrix(a: &InteractionMatrix, rank_bound: Option<usize>) -> Result<Self, FitError> {
        let Some(rank) = rank_bound.filter(|&r| r < a.dim()) else {
            return Ok(Param::Dense(a.entries().to_vec()));
        };
        if let Some(f) = a.factors().filter(|f| f.rank == rank) {
            return Ok(Param::Factored { rank, left: f.left.clone(), right: f.right.clone() });
        }
        // Truncated SVD with the singular values split evenly between factors.
        let d = a.dim();
        let svd = DMatrix::from_row_slice(d, d, a.entries()).svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
        let mut left = vec![0.0; d * rank];
        let mut right = vec![0.0; d * rank];
        for (c, &k) in order.iter().take(rank).enumerate() {
            let s = svd.singular_values[k].sqrt();
            for r in 0..d {
                left[r * rank + c] = u[(r, k)] * s;
                right[r * rank + c] = vt[(k, r)] * s;
            }
        }
        Ok(Param::Factored { rank, left, right })
    }

    fn matrix(&self, d: usize, bound: f64) -> Result<InteractionMatrix, FitError> {
        Ok(match self {
            Param::Dense(e) => InteractionMatrix::unconstrained(d, e.clone(), bound)?,
            Param::Factored { rank, left, right } => {
                InteractionMatrix::low_rank_unconstrained(d, *rank, left.clone(), right.clone(), bound)?
            }
        })
    }

    fn len(&self) -> usize {
        match self {
            Param::Dense(e) => e.len(),
            Param::Factored { left, right, .. } => left.len() + right.len(),
        }
    }

    /// Chain rule: `∂/∂Q = G K`, `∂/∂K = Gᵀ Q` for `A = Q Kᵀ`.
    fn pull_back(&self, grad_a: &[f64], d: usize) -> Vec<f64> {
        match self {
            Param::Dense(_) => grad_a.to_vec(),
            Param::Factored { rank, left, right } => {
                let r = *rank;
                let mut out = vec![0.0; 2 * d * r];
                let (gq, gk) = out.split_at_mut(d * r);
                for a in 0..d {
                    for b in 0..d {
                        let g = grad_a[a * d + b];
                        for c in 0..r {
                            gq[a * r + c] += g * right[b * r + c];
                            gk[b * r + c] += g * left[a * r + c];
                        }
                    }
                }
                out
            }
        }
    }

    fn with_flat<F: FnOnce(&mut [f64])>(&mut self, f: F) {
        match self {
            Param::Dense(e) => f(e),
            Param::Factored { left, right, .. } => {
                let mut flat: Vec<f64> = left.iter().chain(right.iter()).copied().collect();
                f(&mut flat);
                let (l, r) = flat.split_at(left.len());
                left.copy_from_slice(l);
                right.copy_from_slice(r);
            }
        }
    }

    fn rescale(&mut self, s: f64) {
        match self {
            Param::Dense(e) => e.iter_mut().for_each(|v| *v *= s),
            Param::Factored { left, .. } => left.iter_mut().for_each(|v| *v *= s),
        }
    }
}

/// Full-batch descent for `epochs` steps; returns only the final matrix.
pub fn a_step(
    ds: &Dataset,
    init: &InteractionMatrix,
    kernel: &SplineKernel,
    settings: &AStepSettings<'_>,
) -> Result<InteractionMatrix, FitError> {
    a_step_traced(ds, init, kernel, settings).map(|o| o.matrix)
}

pub fn a_step_traced(
    ds: &Dataset,
    init: &InteractionMatrix,
    kernel: &SplineKernel,
    settings: &AStepSettings<'_>,
) -> Result<AStepOutcome, FitError> {
    let cfg = settings.optimizer;
    cfg.validate()?;
    let d = init.dim();
    let bound = settings.op_norm_bound;
    let mut param = Param::from_matrix(init, settings.rank_bound)?;
    let mut adam = Adam::new(param.len());
    let mut current = param.matrix(d, bound)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad_a) = loss_and_grad_a(ds, &current, kernel, settings.matrix_penalty)
            .map_err(|e| e.at_epoch(epoch))?;
        losses.push(loss);
        let grad = param.pull_back(&grad_a, d);
        match cfg.optimizer {
            Optimizer::GradientDescent => param.with_flat(|p| {
                p.iter_mut().zip(&grad).for_each(|(v, g)| *v -= cfg.learning_rate * g);
            }),
            Optimizer::Adam => param.with_flat(|p| adam.step(p, &grad, cfg)),
        }
        current = param.matrix(d, bound)?;
        if current.entries().iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite { epoch });
        }
        if settings.project_norm {
            let norm = current.op_norm();
            if norm > bound {
                param.rescale(bound / norm);
                current = param.matrix(d, bound)?;
            }
        }
    }
    Ok(AStepOutcome { matrix: current, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{build_knots, Interval};
    use crate::datagen::{generate_dataset, sample_ground_truth, MatrixScheme, Provenance, TokenBatch};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(cfg: &AStepConfig, penalty: f64) -> AStepSettings<'_> {
        AStepSettings { optimizer: cfg, matrix_penalty: penalty, project_norm: false, op_norm_bound: 1.0, rank_bound: None }
    }

    #[test]
    fn exact_model_has_zero_loss_and_data_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_ground_truth(&mut rng, 3, 3, 12, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, 40, 3, 0.0).unwrap();
        let (loss, grad) = loss_and_grad_a(&ds, &t.matrix, &t.kernel, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        let (_, grad) = loss_and_grad_a(&ds, &t.matrix, &t.kernel, 0.3).unwrap();
        for (g, a) in grad.iter().zip(t.matrix.entries()) {
            assert_eq!(*g, 0.3 * a);
        }
        let cfg = AStepConfig::default();
        let out = a_step(&ds, &t.matrix, &t.kernel, &settings(&cfg, 0.0)).unwrap();
        assert_eq!(out.entries(), t.matrix.entries());
    }

    #[test]
    fn single_gradient_step_is_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_ground_truth(&mut rng, 2, 3, 8, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, 10, 3, 0.1).unwrap();
        let cfg = AStepConfig { optimizer: Optimizer::GradientDescent, learning_rate: 0.05, epochs: 1, ..AStepConfig::default() };
        let (_, grad) = loss_and_grad_a(&ds, &t.matrix, &t.kernel, 1e-3).unwrap();
        let out = a_step(&ds, &t.matrix, &t.kernel, &settings(&cfg, 1e-3)).unwrap();
        for ((o, a), g) in out.entries().iter().zip(t.matrix.entries()).zip(&grad) {
            assert_eq!(*o, a - 0.05 * g);
        }
    }

    /// Central differences on random small instances.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = sample_ground_truth(&mut rng, 2, 3, 8, MatrixScheme::Diagonal, 1.0).unwrap();
            let ds = generate_dataset(&mut rng, &t, 4, 3, 0.2).unwrap();
            let entries: Vec<f64> = (0..4).map(|_| rng.random_range(-0.6..0.6)).collect();
            let a = InteractionMatrix::unconstrained(2, entries.clone(), 1.0).unwrap();
            let (_, grad) = loss_and_grad_a(&ds, &a, &t.kernel, 0.01).unwrap();
            let h = 1e-6;
            for k in 0..4 {
                let mut plus = entries.clone();
                let mut minus = entries.clone();
                plus[k] += h;
                minus[k] -= h;
                let lp = loss_and_grad_a(&ds, &InteractionMatrix::unconstrained(2, plus, 1.0).unwrap(), &t.kernel, 0.01).unwrap().0;
                let lm = loss_and_grad_a(&ds, &InteractionMatrix::unconstrained(2, minus, 1.0).unwrap(), &t.kernel, 0.01).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((grad[k] - fd).abs() <= 1e-5 * grad[k].abs().max(1e-3), "k={k}: {} vs {fd}", grad[k]);
            }
        }
    }

    /// Scalar Adam recursion on the linear kernel φ(u) = u with one-dimensional tokens.
    #[test]
    fn adam_matches_scalar_recursion() {
        let knots = build_knots(1, 2, Interval::symmetric(1.0)).unwrap();
        let phi = SplineKernel::new(knots, vec![-1.0, 1.0]).unwrap();
        let tokens = TokenBatch::new(2, 2, 1, vec![0.3, 0.8, 0.5, 0.9]).unwrap();
        let y = vec![0.1, 0.2, 0.3, 0.25];
        let ds = Dataset::new(tokens, y.clone(), 0.0, Provenance::default()).unwrap();
        let cfg = AStepConfig { learning_rate: 0.01, epochs: 7, ..AStepConfig::default() };
        let out = a_step(&ds, &InteractionMatrix::diagonal(&[0.4], 1.0).unwrap(), &phi, &settings(&cfg, 0.02)).unwrap();

        // R_i = a x_i x_j, so loss(a) = (1/4) Σ (a p_m - y)² + 0.01 a² with p_m = x_1 x_2.
        let p = [0.3 * 0.8, 0.5 * 0.9];
        let (mut a, mut m, mut v) = (0.4_f64, 0.0, 0.0);
        for t in 1..=7 {
            let g = 0.5 * ((a * p[0] - y[0]) * p[0] + (a * p[0] - y[1]) * p[0] + (a * p[1] - y[2]) * p[1] + (a * p[1] - y[3]) * p[1])
                + 0.02 * a;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9_f64.powi(t));
            let vhat = v / (1.0 - 0.999_f64.powi(t));
            a -= 0.01 * mhat / (vhat.sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(out.entries()[0], a, epsilon = 1e-10);
    }

    #[test]
    fn projection_keeps_norm_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = sample_ground_truth(&mut rng, 3, 3, 8, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, 30, 3, 0.3).unwrap();
        let cfg = AStepConfig { optimizer: Optimizer::GradientDescent, learning_rate: 50.0, epochs: 5, ..AStepConfig::default() };
        let mut s = settings(&cfg, 0.0);
        s.project_norm = true;
        let out = a_step(&ds, &t.matrix, &t.kernel, &s).unwrap();
        assert!(out.op_norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn factored_descent_keeps_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = sample_ground_truth(&mut rng, 4, 3, 8, MatrixScheme::LowRank { rank: 2 }, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, 30, 3, 0.1).unwrap();
        let cfg = AStepConfig { optimizer: Optimizer::GradientDescent, learning_rate: 0.5, epochs: 4, ..AStepConfig::default() };
        let mut s = settings(&cfg, 0.0);
        s.rank_bound = Some(2);
        let start = InteractionMatrix::identity(4).projected(0.5).unwrap();
        let out = a_step_traced(&ds, &start, &t.kernel, &s).unwrap();
        assert_eq!(out.matrix.rank_bound(), Some(2));
        let sv = DMatrix::from_row_slice(4, 4, out.matrix.entries()).singular_values();
        assert!(sv.iter().filter(|&&x| x > 1e-10).count() <= 2);
        assert!(out.losses.last().unwrap() <= &out.losses[0]);
    }

    #[test]
    fn divergent_step_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = sample_ground_truth(&mut rng, 2, 3, 8, MatrixScheme::Diagonal, 1.0).unwrap();
        let ds = generate_dataset(&mut rng, &t, 10, 3, 0.1).unwrap();
        let cfg = AStepConfig { optimizer: Optimizer::GradientDescent, learning_rate: 1e300, epochs: 3, ..AStepConfig::default() };
        let err = a_step(&ds, &t.matrix, &t.kernel, &settings(&cfg, 1.0)).unwrap_err();
        assert!(matches!(err, FitError::NonFinite { .. }), "{err:?}");
    }
}

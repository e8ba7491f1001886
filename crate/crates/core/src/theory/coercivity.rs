//! Monte-Carlo check of `(1/(N-1)) ‖g - g⋆‖² ≤ (1/N) E‖R_{g-g⋆}[X]‖²`.

use serde::{Deserialize, Serialize};

use crate::datagen::{pair_scores, TokenBatch};
use crate::evaluation::Interaction;

use super::TheoryError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoercivityCheck {
    /// `(1/(N-1))` times the pairwise `L²` distance.
    pub lhs: f64,
    /// `(1/N) E‖R_{g-g⋆}[X]‖²`.
    pub rhs: f64,
    pub margin: f64,
    /// Standard error of `margin` across samples.
    pub se: f64,
}

impl CoercivityCheck {
    /// `margin ≥ -z · se`.
    pub fn holds_within(&self, z: f64) -> bool {
        self.margin >= -z * self.se
    }
}

/// Per sample: `P = mean_{i≠j} Δ_ij²`, `R = (1/N) Σ_i ((1/(N-1)) Σ_{j≠i} Δ_ij)²`
/// and the margin term `R - P/(N-1)`, where `Δ_ij = g(u_ij) - g⋆(u⋆_ij)`.
pub fn coercivity_check(g: &dyn Interaction, truth: &dyn Interaction, tokens: &TokenBatch) -> Result<CoercivityCheck, TheoryError> {
    let (n, d, samples) = (tokens.tokens(), tokens.dim(), tokens.samples());
    if n < 2 || samples < 2 {
        return Err(TheoryError::Config(format!("need at least 2 samples of 2 tokens, got {samples} of {n}")));
    }
    if g.matrix().dim() != d || truth.matrix().dim() != d {
        return Err(TheoryError::Config("matrix and token dimensions differ".into()));
    }
    let mut scratch = vec![0.0; n * d];
    let mut s_g = vec![0.0; n * n];
    let mut s_t = vec![0.0; n * n];
    let nm1 = (n - 1) as f64;
    let (mut sum_p, mut sum_r, mut sum_z, mut sum_z2) = (0.0, 0.0, 0.0, 0.0);
    for m in 0..samples {
        pair_scores(g.matrix(), tokens.sample(m), n, &mut scratch, &mut s_g);
        pair_scores(truth.matrix(), tokens.sample(m), n, &mut scratch, &mut s_t);
        let (mut p, mut r) = (0.0, 0.0);
        for i in 0..n {
            let mut row = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let delta = g.kernel().eval(s_g[i * n + j]) - truth.kernel().eval(s_t[i * n + j]);
                p += delta * delta;
                row += delta;
            }
            r += (row / nm1).powi(2);
        }
        p /= (n * (n - 1)) as f64;
        r /= n as f64;
        let z = r - p / nm1;
        sum_p += p;
        sum_r += r;
        sum_z += z;
        sum_z2 += z * z;
    }
    let mf = samples as f64;
    let mean_z = sum_z / mf;
    let var = ((sum_z2 - mf * mean_z * mean_z) / (mf - 1.0)).max(0.0);
    Ok(CoercivityCheck { lhs: sum_p / mf / nm1, rhs: sum_r / mf, margin: mean_z, se: (var / mf).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{build_knots, Interval, SplineKernel};
    use crate::datagen::{sample_ground_truth, sample_tokens, InteractionMatrix, MatrixScheme};
    use crate::evaluation::PairInteraction;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_models_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_ground_truth(&mut rng, 3, 3, 8, MatrixScheme::Diagonal, 1.0).unwrap();
        let tokens = sample_tokens(&mut rng, 100, 3, 3).unwrap();
        let c = coercivity_check(&t, &t, &tokens).unwrap();
        assert_eq!((c.lhs, c.rhs, c.margin), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_difference_closed_form() {
        let knots = build_knots(3, 8, Interval::symmetric(1.0)).unwrap();
        let c = 0.3;
        for n in [2usize, 3, 5] {
            let a = PairInteraction { kernel: SplineKernel::constant(knots.clone(), c), matrix: InteractionMatrix::identity(4) };
            let b = PairInteraction { kernel: SplineKernel::constant(knots.clone(), 0.0), matrix: InteractionMatrix::identity(4) };
            let tokens = sample_tokens(&mut ChaCha8Rng::seed_from_u64(2), 200, n, 4).unwrap();
            let r = coercivity_check(&a, &b, &tokens).unwrap();
            let nm1 = (n - 1) as f64;
            assert_relative_eq!(r.lhs, c * c / nm1, max_relative = 1e-10);
            assert_relative_eq!(r.rhs, c * c, max_relative = 1e-10);
            assert_relative_eq!(r.margin, c * c * (n as f64 - 2.0) / nm1, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_pairs_respect_the_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let g = sample_ground_truth(&mut rng, 5, 3, 10, MatrixScheme::Diagonal, 1.0).unwrap();
            let t = sample_ground_truth(&mut rng, 5, 3, 10, MatrixScheme::Diagonal, 1.0).unwrap();
            let tokens = sample_tokens(&mut rng, 2000, 3, 5).unwrap();
            let c = coercivity_check(&g, &t, &tokens).unwrap();
            assert!(c.holds_within(3.0), "{c:?}");
        }
    }
}

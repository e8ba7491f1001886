//! Bump-function hypothesis family for the one-dimensional lower bound.

use std::sync::OnceLock;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{pair_scores, InteractionMatrix, TokenBatch};

use super::codebook::{hamming_floor, min_pairwise_hamming, vg_codebook, Word};
use super::density::DensityEstimate;
use super::TheoryError;

/// Quadrature nodes per bump support.
pub const QUADRATURE_NODES: usize = 256;
/// Candidate budget for the greedy codebook.
pub const CODEBOOK_CANDIDATES: usize = 10_000;

/// `ψ(u) = exp(-1 / (1 - (2u)²))` on `|u| < 1/2`, zero elsewhere.
pub fn bump_psi(u: f64) -> f64 {
    let t = 2.0 * u;
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

/// `‖ψ‖∞ = ψ(0)`.
pub fn psi_sup() -> f64 {
    (-1.0f64).exp()
}

/// `‖ψ‖₂²` by composite Simpson on `[-1/2, 1/2]`. The integrand is flat to
/// all orders at the endpoints, so the rule converges very fast.
pub fn psi_l2_sq() -> f64 {
    static CACHE: OnceLock<f64> = OnceLock::new();
    *CACHE.get_or_init(|| {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let u = -0.5 + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * bump_psi(u).powi(2);
        }
        s * h / 3.0
    })
}

/// Inputs of the construction that are not read from the density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundParams {
    pub tokens: usize,
    pub beta: f64,
    /// Hölder constant `L`.
    pub holder: f64,
    pub noise_sd: f64,
    /// Super-level floor; `None` uses half the mean density.
    pub floor: Option<f64>,
}

/// Maximal run of bins above the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub lo: f64,
    pub hi: f64,
}

impl Run {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Geometry and rate constants derived from a density estimate. They do not
/// depend on the sample size, which enters only through `K̄` and `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundConstants {
    pub params: LowerBoundParams,
    pub radius: f64,
    pub floor: f64,
    pub max_density: f64,
    /// Every bin is above the floor; the whole domain is partitioned.
    pub uniform: bool,
    pub l0: f64,
    pub n0: usize,
    /// Runs sorted by decreasing length.
    pub runs: Vec<Run>,
    pub c0: f64,
    pub c0n: f64,
    pub c1: f64,
}

impl LowerBoundConstants {
    pub fn new(density: &DensityEstimate, params: LowerBoundParams) -> Result<Self, TheoryError> {
        if !(params.beta > 0.0 && params.holder > 0.0 && params.noise_sd > 0.0) || params.tokens < 2 {
            return Err(TheoryError::Config(format!("invalid lower-bound parameters {params:?}")));
        }
        let radius = 0.5 * (density.hi() - density.lo());
        let floor = params.floor.unwrap_or(0.5 * density.mean_density());
        let max_density = density.max_density();
        if !(floor > 0.0 && floor < max_density.min(1.0)) {
            return Err(TheoryError::Config(format!(
                "floor {floor} must lie in (0, min(max density {max_density}, 1))"
            )));
        }
        let mut runs = Vec::new();
        let mut start: Option<usize> = None;
        for b in 0..=density.bins() {
            let above = b < density.bins() && density.bin_density(b) > floor;
            match (above, start) {
                (true, None) => start = Some(b),
                (false, Some(s)) => {
                    runs.push(Run { lo: density.edges()[s], hi: density.edges()[b] });
                    start = None;
                }
                _ => {}
            }
        }
        runs.sort_by(|a, b| b.len().total_cmp(&a.len()).then(a.lo.total_cmp(&b.lo)));
        let uniform = runs.len() == 1 && runs[0].len() >= (density.hi() - density.lo()) * (1.0 - 1e-12);
        let (l0, n0) = if uniform {
            // L0/(8 n0) = ā reproduces the tiling h = ā/K̄.
            (8.0 * radius, 1)
        } else {
            let l0 = (1.0 - 2.0 * radius * floor) / (max_density - floor);
            let mut acc = 0.0;
            let mut n0 = 0;
            for r in &runs {
                acc += r.len();
                n0 += 1;
                if acc > 0.5 * l0 {
                    break;
                }
            }
            if acc <= 0.5 * l0 {
                return Err(TheoryError::Config(format!(
                    "super-level runs cover {acc}, below L0/2 = {}",
                    0.5 * l0
                )));
            }
            (l0, n0)
        };
        let (beta, holder) = (params.beta, params.holder);
        let scale = l0 / (8.0 * n0 as f64);
        let c_eta = 1.0 / (2.0 * params.noise_sd.powi(2));
        let c0 = (32.0 * c_eta * holder.powi(2) * psi_sup().powi(2) * scale.powf(2.0 * beta)).powf(1.0 / (2.0 * beta + 1.0));
        let c0n = c0 * (params.tokens as f64).powf(1.0 / (2.0 * beta + 1.0));
        let c1 = floor.sqrt() * holder * psi_l2_sq().sqrt() / (4.0 * 2f64.sqrt()) * scale.powf(beta + 0.5);
        Ok(Self { params, radius, floor, max_density, uniform, l0, n0, runs, c0, c0n, c1 })
    }

    fn rate_exponent(&self) -> f64 {
        1.0 / (2.0 * self.params.beta + 1.0)
    }

    /// `⌈c0N · M^{1/(2β+1)}⌉`; the small offset absorbs round-off at exact integers.
    pub fn kbar(&self, m: f64) -> usize {
        (self.c0n * m.powf(self.rate_exponent()) - 1e-9).ceil().max(1.0) as usize
    }

    /// Largest integer sample size whose `K̄` equals `kbar`.
    pub fn sample_size_for(&self, kbar: usize) -> f64 {
        ((kbar as f64 / self.c0n).powf(2.0 * self.params.beta + 1.0)).floor()
    }

    /// `s = C1 c0N^{-β} M^{-β/(2β+1)}`.
    pub fn separation_radius(&self, m: f64) -> f64 {
        let beta = self.params.beta;
        self.c1 * self.c0n.powf(-beta) * m.powf(-beta * self.rate_exponent())
    }

    /// `h = L0 / (8 n0 K̄)`.
    pub fn half_width(&self, kbar: usize) -> f64 {
        self.l0 / (8.0 * self.n0 as f64 * kbar as f64)
    }

    /// The KL factor `α` that the packing constants guarantee at the bound level.
    pub fn bound_alpha(&self) -> f64 {
        let beta = self.params.beta;
        let c_eta = 1.0 / (2.0 * self.params.noise_sd.powi(2));
        let scale = self.l0 / (8.0 * self.n0 as f64);
        c_eta * self.params.holder.powi(2) * psi_sup().powi(2) * self.params.tokens as f64
            / self.c0n.powf(2.0 * beta + 1.0)
            * scale.powf(2.0 * beta)
            * 8.0
            / 2f64.ln()
    }
}

/// Disjoint intervals `(r - h, r + h)` inside the super-level runs.
pub fn pack_intervals(constants: &LowerBoundConstants, kbar: usize) -> Result<Vec<f64>, TheoryError> {
    if kbar == 0 {
        return Err(TheoryError::Config("K̄ must be positive".into()));
    }
    let h = constants.half_width(kbar);
    let mut centers = Vec::with_capacity(kbar);
    if constants.uniform {
        centers.extend((1..=kbar).map(|l| -constants.radius + (2 * l - 1) as f64 * h));
        return Ok(centers);
    }
    for run in &constants.runs {
        // The tolerance keeps exact multiples of 2h from losing an interval to round-off.
        let fit = ((run.len() / (2.0 * h)) * (1.0 + 1e-12)).floor() as usize;
        for l in 1..=fit {
            if centers.len() == kbar {
                break;
            }
            centers.push(run.lo + (2 * l - 1) as f64 * h);
        }
    }
    if centers.len() < kbar {
        return Err(TheoryError::Infeasible {
            kbar,
            capacity: centers.len(),
            hint: "reduce M or the rate constant c0".into(),
        });
    }
    centers.sort_by(f64::total_cmp);
    Ok(centers)
}

/// `φ_k(u) = Σ_ℓ ω_ℓ^(k) L h^β ψ((u - r_ℓ)/h)`, with `φ_0 ≡ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    centers: Vec<f64>,
    half_width: f64,
    amplitude: f64,
    words: Vec<Word>,
    beta: f64,
    holder: f64,
}

impl HypothesisSet {
    pub fn new(centers: Vec<f64>, half_width: f64, beta: f64, holder: f64, words: Vec<Word>) -> Result<Self, TheoryError> {
        if centers.is_empty() || words.is_empty() {
            return Err(TheoryError::Config("empty hypothesis set".into()));
        }
        if words.iter().any(|w| w.len() != centers.len()) {
            return Err(TheoryError::Config("word length differs from interval count".into()));
        }
        if centers.windows(2).any(|w| w[1] - w[0] < 2.0 * half_width * (1.0 - 1e-12)) {
            return Err(TheoryError::Config("intervals overlap".into()));
        }
        let amplitude = holder * half_width.powf(beta);
        Ok(Self { centers, half_width, amplitude, words, beta, holder })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// `L h^β`.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn holder(&self) -> f64 {
        self.holder
    }

    pub fn kbar(&self) -> usize {
        self.centers.len()
    }

    /// Hypotheses including the zero one.
    pub fn count(&self) -> usize {
        self.words.len()
    }

    /// Same geometry with the Hölder constant multiplied by `t`.
    pub fn rescaled(&self, t: f64) -> Self {
        Self { amplitude: self.amplitude * t, holder: self.holder * t, ..self.clone() }
    }

    pub fn interval(&self, l: usize) -> (f64, f64) {
        (self.centers[l] - self.half_width, self.centers[l] + self.half_width)
    }

    pub fn phi(&self, k: usize, u: f64) -> f64 {
        let word = &self.words[k];
        // Bump supports are disjoint: at most one term is nonzero.
        let l = self.centers.partition_point(|&r| r < u);
        [l.wrapping_sub(1), l]
            .into_iter()
            .filter(|&l| l < self.centers.len() && word.bit(l))
            .map(|l| self.amplitude * bump_psi((u - self.centers[l]) / self.half_width))
            .sum()
    }
}

/// Packs `K̄` intervals for sample size `m` and draws a codebook of at least
/// `2^{K̄/8}` nonzero words (capped by `max_words` when given).
pub fn build_hypotheses<R: Rng + ?Sized>(
    constants: &LowerBoundConstants,
    m: f64,
    max_words: Option<usize>,
    rng: &mut R,
) -> Result<HypothesisSet, TheoryError> {
    if m.is_nan() || m < 1.0 {
        return Err(TheoryError::Config(format!("sample size {m} below 1")));
    }
    let kbar = constants.kbar(m);
    if kbar < 8 {
        return Err(TheoryError::KBarTooSmall { kbar });
    }
    let centers = pack_intervals(constants, kbar)?;
    let mut target = (kbar as f64 / 8.0).exp2().ceil() as usize + 1;
    if let Some(cap) = max_words {
        target = target.min(cap.max(2));
    }
    let words = vg_codebook(kbar, target, CODEBOOK_CANDIDATES, rng)?;
    HypothesisSet::new(centers, constants.half_width(kbar), constants.params.beta, constants.params.holder, words)
}

/// `‖φ_k - φ_k'‖` in `L²(p_U)`, midpoint rule over every bump support.
pub fn l2_separation(set: &HypothesisSet, k: usize, k2: usize, density: &DensityEstimate) -> f64 {
    if k == k2 {
        return 0.0;
    }
    let h = set.half_width();
    let step = h / QUADRATURE_NODES as f64;
    let mut total = 0.0;
    for &r in set.centers() {
        let lo = r - 0.5 * h;
        for q in 0..QUADRATURE_NODES {
            let u = lo + (q as f64 + 0.5) * step;
            let diff = set.phi(k, u) - set.phi(k2, u);
            total += diff * diff * density.density_at(u) * step;
        }
    }
    total.sqrt()
}

/// Smallest pairwise separation among the nonzero hypotheses.
pub fn min_separation(set: &HypothesisSet, density: &DensityEstimate) -> f64 {
    let mut best = f64::INFINITY;
    for a in 1..set.count() {
        for b in a + 1..set.count() {
            best = best.min(l2_separation(set, a, b, density));
        }
    }
    best
}

/// Largest `|φ_k|` over a uniform grid (and every bump peak) of `[-ā, ā]`.
pub fn sup_norm_on_grid(set: &HypothesisSet, k: usize, radius: f64, points: usize) -> f64 {
    let grid = (0..=points).map(|i| -radius + 2.0 * radius * i as f64 / points as f64);
    grid.chain(set.centers().iter().copied()).map(|u| set.phi(k, u).abs()).fold(0.0, f64::max)
}

/// Clean responses of the model with kernel `φ_k` and matrix `matrix`.
fn hypothesis_forward(set: &HypothesisSet, k: usize, matrix: &InteractionMatrix, tokens: &TokenBatch, out: &mut Vec<f64>) {
    let (n, d) = (tokens.tokens(), tokens.dim());
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    out.clear();
    for m in 0..tokens.samples() {
        pair_scores(matrix, tokens.sample(m), n, &mut scratch, &mut scores);
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| set.phi(k, scores[i * n + j])).sum();
            out.push(s / (n - 1) as f64);
        }
    }
}

/// Gaussian KL between the data laws of `φ_k` and `φ_0 ≡ 0` given the tokens:
/// `Σ_m ‖R_{φ_k}[X^m]‖² / (2σ²)`.
pub fn kl_budget(
    set: &HypothesisSet,
    k: usize,
    matrix: &InteractionMatrix,
    tokens: &TokenBatch,
    noise_sd: f64,
) -> Result<f64, TheoryError> {
    if noise_sd.is_nan() || noise_sd <= 0.0 {
        return Err(TheoryError::Config(format!("noise sd must be positive, got {noise_sd}")));
    }
    if matrix.dim() != tokens.dim() {
        return Err(TheoryError::Config("matrix and token dimensions differ".into()));
    }
    let mut r = Vec::new();
    hypothesis_forward(set, k, matrix, tokens, &mut r);
    Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * noise_sd * noise_sd))
}

/// KL summary over the nonzero hypotheses. The per-sample KL is estimated on
/// `tokens` and scaled linearly to `target_samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub max: f64,
    pub mean: f64,
    /// `mean / ln K`.
    pub alpha: f64,
}

pub fn kl_summary(
    set: &HypothesisSet,
    matrix: &InteractionMatrix,
    tokens: &TokenBatch,
    noise_sd: f64,
    target_samples: f64,
) -> Result<KlSummary, TheoryError> {
    let scale = target_samples / tokens.samples() as f64;
    let mut kls = Vec::with_capacity(set.count());
    for k in 1..set.count() {
        kls.push(kl_budget(set, k, matrix, tokens, noise_sd)? * scale);
    }
    let max = kls.iter().cloned().fold(0.0, f64::max);
    let mean = kls.iter().sum::<f64>() / kls.len().max(1) as f64;
    let k = (set.count() - 1).max(2) as f64;
    Ok(KlSummary { max, mean, alpha: mean / k.ln() })
}

/// Outcome of the minimum-distance test run on simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoDemo {
    pub trials: usize,
    pub errors: usize,
    pub error_rate: f64,
}

/// Draws a hypothesis uniformly, simulates `samples` responses and picks the
/// hypothesis with the smallest residual sum of squares.
pub fn fano_demo<R: RngCore>(
    set: &HypothesisSet,
    matrix: &InteractionMatrix,
    samples: usize,
    tokens_per_sample: usize,
    noise_sd: f64,
    trials: usize,
    rng: &mut R,
) -> Result<FanoDemo, TheoryError> {
    let normal = Normal::new(0.0, noise_sd).map_err(|e| TheoryError::Config(e.to_string()))?;
    let mut errors = 0;
    let mut clean = Vec::new();
    for _ in 0..trials {
        let tokens = crate::datagen::sample_tokens(rng, samples, tokens_per_sample, matrix.dim())?;
        let truth = rng.random_range(0..set.count());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        hypothesis_forward(set, truth, matrix, &tokens, &mut clean);
        let y: Vec<f64> = clean.iter().map(|c| c + normal.sample(&mut noise_rng)).collect();
        let mut best = (f64::INFINITY, 0);
        for k in 0..set.count() {
            hypothesis_forward(set, k, matrix, &tokens, &mut clean);
            let rss: f64 = clean.iter().zip(&y).map(|(c, y)| (c - y).powi(2)).sum();
            if rss < best.0 {
                best = (rss, k);
            }
        }
        errors += usize::from(best.1 != truth);
    }
    Ok(FanoDemo { trials, errors, error_rate: errors as f64 / trials.max(1) as f64 })
}

/// Pass/fail view of the construction conditions at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionCheck {
    pub kbar: usize,
    pub samples: f64,
    pub hypotheses: usize,
    pub half_width: f64,
    pub amplitude: f64,
    pub max_sup_norm: f64,
    pub min_separation: f64,
    /// `2 s_{N,M}`.
    pub required_separation: f64,
    pub min_hamming: usize,
    pub hamming_floor: usize,
    pub sup_ok: bool,
    pub separation_ok: bool,
    pub hamming_ok: bool,
    pub inside_super_level: bool,
}

pub fn check_construction(
    set: &HypothesisSet,
    constants: &LowerBoundConstants,
    density: &DensityEstimate,
    m: f64,
) -> ConstructionCheck {
    let kbar = set.kbar();
    let max_sup_norm = (0..set.count())
        .map(|k| sup_norm_on_grid(set, k, constants.radius, 20_000))
        .fold(0.0, f64::max);
    let min_sep = min_separation(set, density);
    let required = 2.0 * constants.separation_radius(m);
    let min_hamming = min_pairwise_hamming(set.words()).unwrap_or(0);
    let inside = (0..kbar).all(|l| {
        let (lo, hi) = set.interval(l);
        constants.runs.iter().any(|r| lo >= r.lo - 1e-12 && hi <= r.hi + 1e-12)
    });
    ConstructionCheck {
        kbar,
        samples: m,
        hypotheses: set.count(),
        half_width: set.half_width(),
        amplitude: set.amplitude(),
        max_sup_norm,
        min_separation: min_sep,
        required_separation: required,
        min_hamming,
        hamming_floor: hamming_floor(kbar),
        sup_ok: max_sup_norm <= set.amplitude() * (1.0 + 1e-12),
        separation_ok: min_sep >= required,
        hamming_ok: min_hamming >= hamming_floor(kbar),
        inside_super_level: inside,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_tokens;
    use crate::theory::density::estimate_pu;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn params() -> LowerBoundParams {
        LowerBoundParams { tokens: 3, beta: 2.0, holder: 1.0, noise_sd: 0.07, floor: None }
    }

    #[test]
    fn bump_values() {
        assert_abs_diff_eq!(bump_psi(0.0), 0.367_879_441_171_442_3, epsilon = 1e-15);
        assert_abs_diff_eq!(bump_psi(0.25), (-4.0f64 / 3.0).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(bump_psi(0.25), 0.263_597_138, epsilon = 1e-9);
        for u in [0.5, -0.5, 0.6, -0.6, 3.0] {
            assert_eq!(bump_psi(u), 0.0);
        }
    }

    #[test]
    fn psi_norm_independent_rule() {
        // Gauss–Legendre would need weights; a fine midpoint rule is an independent check.
        let n = 200_000;
        let mid: f64 = (0..n).map(|i| bump_psi(-0.5 + (i as f64 + 0.5) / n as f64).powi(2)).sum::<f64>() / n as f64;
        assert_relative_eq!(psi_l2_sq(), mid, max_relative = 1e-10);
    }

    #[test]
    fn uniform_density_tiles_the_domain() {
        let density = DensityEstimate::uniform(1.0, 40).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        assert!(c.uniform);
        let centers = pack_intervals(&c, 4).unwrap();
        assert_eq!(centers.len(), 4);
        for (got, want) in centers.iter().zip([-0.75, -0.25, 0.25, 0.75]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(c.half_width(4), 0.25, epsilon = 1e-15);
        for &r in &centers {
            let (lo, hi) = (r - 0.25, r + 0.25);
            let mass: f64 = (0..40)
                .filter(|&b| density.edges()[b] >= lo - 1e-12 && density.edges()[b + 1] <= hi + 1e-12)
                .map(|b| density.masses()[b])
                .sum();
            assert!(mass > 0.0);
        }
    }

    #[test]
    fn single_bump_separation_oracle() {
        let density = DensityEstimate::uniform(1.0, 16).unwrap();
        let centers: Vec<f64> = (1..=8).map(|l| -1.0 + (2 * l - 1) as f64 * 0.125).collect();
        let mut bits = vec![false; 8];
        let zero = Word::from_bits(&bits);
        bits[3] = true;
        let one = Word::from_bits(&bits);
        let set = HypothesisSet::new(centers, 0.125, 2.0, 1.5, vec![zero, one]).unwrap();
        let want = 0.5 * 1.5f64.powi(2) * 0.125f64.powi(5) * psi_l2_sq();
        assert_relative_eq!(l2_separation(&set, 0, 1, &density).powi(2), want, max_relative = 1e-10);
        assert_eq!(l2_separation(&set, 1, 1, &density), 0.0);
    }

    #[test]
    fn packing_stays_in_super_level_runs() {
        let tokens = sample_tokens(&mut ChaCha8Rng::seed_from_u64(5), 20_000, 3, 5).unwrap();
        let a = InteractionMatrix::diagonal(&[1.0, -0.3, 0.6, 0.2, -0.8], 1.0).unwrap();
        let density = estimate_pu(&tokens, &a, None).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        assert!(!c.uniform);
        for kbar in [16, 32, 64] {
            let centers = pack_intervals(&c, kbar).unwrap();
            let h = c.half_width(kbar);
            assert!(centers.windows(2).all(|w| w[1] - w[0] >= 2.0 * h * (1.0 - 1e-12)));
            for r in &centers {
                assert!(c.runs.iter().any(|run| r - h >= run.lo - 1e-12 && r + h <= run.hi + 1e-12));
            }
        }
    }

    #[test]
    fn construction_conditions_hold() {
        let tokens = sample_tokens(&mut ChaCha8Rng::seed_from_u64(6), 20_000, 3, 5).unwrap();
        let a = InteractionMatrix::diagonal(&[1.0, 0.4, -0.5, 0.9, 0.1], 1.0).unwrap();
        let density = estimate_pu(&tokens, &a, None).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        let m = c.sample_size_for(16);
        assert_eq!(c.kbar(m), 16);
        let set = build_hypotheses(&c, m, None, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(set.count() > 4);
        let check = check_construction(&set, &c, &density, m);
        assert!(check.sup_ok && check.separation_ok && check.hamming_ok && check.inside_super_level, "{check:?}");
        // Pointwise: zero outside the union of intervals.
        for i in 0..=4000 {
            let u = -1.0 + i as f64 / 2000.0;
            let inside = (0..set.kbar()).any(|l| {
                let (lo, hi) = set.interval(l);
                u > lo && u < hi
            });
            if !inside {
                assert_eq!(set.phi(1, u), 0.0);
            }
        }
    }

    #[test]
    fn kl_budget_basic_and_quadratic() {
        let density = DensityEstimate::uniform(1.0, 16).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        let set = build_hypotheses(&c, c.sample_size_for(16), None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let tokens = sample_tokens(&mut ChaCha8Rng::seed_from_u64(9), 200, 3, 2).unwrap();
        let a = InteractionMatrix::identity(2);
        assert_eq!(kl_budget(&set, 0, &a, &tokens, 0.1).unwrap(), 0.0);
        for k in 1..set.count() {
            let base = kl_budget(&set, k, &a, &tokens, 0.1).unwrap();
            let scaled = kl_budget(&set.rescaled(3.0), k, &a, &tokens, 0.1).unwrap();
            if base > 0.0 {
                assert!((scaled / base / 9.0 - 1.0).abs() <= 1e-10);
            }
        }
        assert!(kl_budget(&set, 1, &a, &tokens, 0.0).is_err());
    }

    #[test]
    fn too_small_kbar_is_rejected() {
        let density = DensityEstimate::uniform(1.0, 16).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        let err = build_hypotheses(&c, 2.0, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, TheoryError::KBarTooSmall { kbar } if kbar < 8), "{err:?}");
    }

    #[test]
    fn bound_level_alpha_is_fixed_by_c0() {
        let density = DensityEstimate::uniform(1.0, 16).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        assert_relative_eq!(c.bound_alpha(), 8.0 / (32.0 * 2f64.ln()), max_relative = 1e-12);
    }

    #[test]
    fn fano_demo_runs() {
        let density = DensityEstimate::uniform(1.0, 16).unwrap();
        let c = LowerBoundConstants::new(&density, params()).unwrap();
        let set = build_hypotheses(&c, c.sample_size_for(16), Some(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let demo = fano_demo(&set, &InteractionMatrix::identity(1), 50, 3, 0.07, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(demo.trials, 10);
        assert!(demo.error_rate <= 1.0);
    }
}

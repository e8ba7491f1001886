//! Histogram estimate of the law of the bilinear score `U = X_iᵀ A X_j`.

use serde::{Deserialize, Serialize};

use crate::datagen::{pair_scores, InteractionMatrix, TokenBatch};

use super::TheoryError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    edges: Vec<f64>,
    masses: Vec<f64>,
    samples: usize,
}

impl DensityEstimate {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>, samples: usize) -> Result<Self, TheoryError> {
        if edges.len() < 3 || masses.len() + 1 != edges.len() {
            return Err(TheoryError::Density(format!("{} edges for {} masses", edges.len(), masses.len())));
        }
        if edges.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(TheoryError::Density("edges must increase strictly".into()));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(TheoryError::Density("masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TheoryError::Density(format!("masses sum to {total}")));
        }
        Ok(Self { edges, masses, samples })
    }

    /// Uniform density on `[-radius, radius]` with `bins` equal bins.
    pub fn uniform(radius: f64, bins: usize) -> Result<Self, TheoryError> {
        let edges = (0..=bins).map(|b| -radius + 2.0 * radius * b as f64 / bins as f64).collect();
        Self::new(edges, vec![1.0 / bins as f64; bins], 0)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().expect("nonempty")
    }

    pub fn bin_density(&self, b: usize) -> f64 {
        self.masses[b] / (self.edges[b + 1] - self.edges[b])
    }

    pub fn max_density(&self) -> f64 {
        (0..self.bins()).map(|b| self.bin_density(b)).fold(0.0, f64::max)
    }

    /// `1 / (domain length)`.
    pub fn mean_density(&self) -> f64 {
        1.0 / (self.hi() - self.lo())
    }

    /// Piecewise-constant density; zero outside the edges.
    pub fn density_at(&self, u: f64) -> f64 {
        if u < self.lo() || u > self.hi() {
            return 0.0;
        }
        let b = self.edges.partition_point(|&e| e <= u).saturating_sub(1).min(self.bins() - 1);
        self.bin_density(b)
    }
}

/// Pools every ordered off-diagonal score of the batch into `bins` equal bins
/// over `[-ā, ā]`. Defaults to `⌈√pairs⌉` bins.
pub fn estimate_pu(tokens: &TokenBatch, matrix: &InteractionMatrix, bins: Option<usize>) -> Result<DensityEstimate, TheoryError> {
    if matrix.dim() != tokens.dim() {
        return Err(TheoryError::Density(format!("matrix d={} vs tokens d={}", matrix.dim(), tokens.dim())));
    }
    let (n, d) = (tokens.tokens(), tokens.dim());
    let pairs = tokens.samples() * n * (n - 1);
    let bins = bins.unwrap_or_else(|| (pairs as f64).sqrt().ceil() as usize);
    if bins < 2 {
        return Err(TheoryError::Density(format!("need at least 2 bins, got {bins}")));
    }
    if pairs < 10 * bins {
        return Err(TheoryError::InsufficientSamples { pairs, bins });
    }
    let radius = matrix.op_norm_bound();
    let mut counts = vec![0usize; bins];
    let mut scratch = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    for m in 0..tokens.samples() {
        pair_scores(matrix, tokens.sample(m), n, &mut scratch, &mut scores);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let u = scores[i * n + j];
                if u.abs() > radius * (1.0 + 1e-12) {
                    return Err(TheoryError::Density(format!("score {u} outside [-{radius}, {radius}]")));
                }
                let b = (((u + radius) / (2.0 * radius)) * bins as f64).floor();
                counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
            }
        }
    }
    let edges = (0..=bins).map(|b| -radius + 2.0 * radius * b as f64 / bins as f64).collect();
    let masses = counts.iter().map(|&c| c as f64 / pairs as f64).collect();
    DensityEstimate::new(edges, masses, pairs)
}

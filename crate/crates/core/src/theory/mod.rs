//! Numerical checks of the well-posedness inequality and of the lower-bound
//! hypothesis construction.

pub mod codebook;
pub mod coercivity;
pub mod density;
pub mod hypotheses;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DataError;
use crate::evaluation::EvalError;

pub use codebook::{hamming_floor, vg_codebook, Word};
pub use coercivity::{coercivity_check, CoercivityCheck};
pub use density::{estimate_pu, DensityEstimate};
pub use hypotheses::{
    build_hypotheses, bump_psi, check_construction, kl_budget, kl_summary, l2_separation, pack_intervals,
    ConstructionCheck, FanoDemo, HypothesisSet, KlSummary, LowerBoundConstants, LowerBoundParams,
};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid density: {0}")]
    Density(String),
    #[error("{pairs} pair values are too few for {bins} bins (need 10 per bin)")]
    InsufficientSamples { pairs: usize, bins: usize },
    #[error("super-level set hosts only {capacity} of {kbar} intervals; {hint}")]
    Infeasible { kbar: usize, capacity: usize, hint: String },
    #[error("K̄ = {kbar} is below 8; increase M")]
    KBarTooSmall { kbar: usize },
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    pub bins: usize,
    pub pairs: usize,
    pub lo: f64,
    pub hi: f64,
    pub max_density: f64,
    pub floor: f64,
    /// Probability mass of the bins above the floor.
    pub super_level_mass: f64,
}

impl DensitySummary {
    pub fn new(density: &DensityEstimate, floor: f64) -> Self {
        let super_level_mass = (0..density.bins())
            .filter(|&b| density.bin_density(b) > floor)
            .map(|b| density.masses()[b])
            .sum();
        Self {
            bins: density.bins(),
            pairs: density.samples(),
            lo: density.lo(),
            hi: density.hi(),
            max_density: density.max_density(),
            floor,
            super_level_mass,
        }
    }
}

/// One construction at a requested `K̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundEntry {
    pub check: ConstructionCheck,
    pub kl: KlSummary,
    pub centers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivitySummary {
    pub trials: usize,
    pub passed: usize,
    pub min_margin_in_se: f64,
    pub checks: Vec<CoercivityCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub density: DensitySummary,
    pub constants: LowerBoundConstants,
    pub bound_alpha: f64,
    pub lower_bound: Vec<LowerBoundEntry>,
    pub coercivity: CoercivitySummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fano: Option<FanoDemo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl TheoryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Top-level keys every theory report carries.
pub const REPORT_KEYS: [&str; 5] = ["density", "constants", "bound_alpha", "lower_bound", "coercivity"];

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{sample_ground_truth, sample_tokens, InteractionMatrix};
use crate::rng::{cell_id, Purpose, SeedStreams};
use crate::theory::hypotheses::fano_demo;
use crate::theory::{
    build_hypotheses, check_construction, coercivity_check, estimate_pu, kl_summary, CoercivityCheck, CoercivitySummary,
    DensitySummary, LowerBoundConstants, LowerBoundEntry, LowerBoundParams, TheoryError, TheoryReport,
};

use super::{ExperimentConfig, ExperimentError};

/// Coercivity margins at or above this many standard errors below zero pass.
pub const MARGIN_Z: f64 = 3.0;

/// The true matrix of the theory cell.
pub fn theory_matrix(config: &ExperimentConfig) -> Result<InteractionMatrix, ExperimentError> {
    let t = &config.theory;
    let streams = SeedStreams::new(config.master_seed);
    let mut rng = streams.stream(theory_cell(config), Purpose::GroundTruth, 0);
    let truth = sample_ground_truth(&mut rng, t.dim, config.degrees[0], config.truth_basis, config.scheme, config.op_norm_bound)?;
    Ok(truth.matrix)
}

fn theory_cell(config: &ExperimentConfig) -> u64 {
    cell_id(&[config.theory.dim as u64, config.tokens as u64])
}

/// `(g, g⋆)` pairs of independently drawn splines and matrices.
pub fn coercivity_trials(config: &ExperimentConfig) -> Result<Vec<CoercivityCheck>, ExperimentError> {
    let t = &config.theory;
    let streams = SeedStreams::new(config.master_seed);
    let cell = theory_cell(config);
    (0..t.coercivity_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = streams.stream(cell, Purpose::Coercivity, trial);
            let degree = config.degrees[0];
            let g = sample_ground_truth(&mut rng, t.dim, degree, config.truth_basis, config.scheme, config.op_norm_bound)?;
            let g_star = sample_ground_truth(&mut rng, t.dim, degree, config.truth_basis, config.scheme, config.op_norm_bound)?;
            let tokens = sample_tokens(&mut rng, t.coercivity_samples, config.tokens, t.dim)?;
            Ok(coercivity_check(&g, &g_star, &tokens)?)
        })
        .collect()
}

/// Density, packing, separation, KL and coercivity for the configured cell.
pub fn theory_report(config: &ExperimentConfig) -> Result<TheoryReport, ExperimentError> {
    config.validate()?;
    let t = &config.theory;
    let streams = SeedStreams::new(config.master_seed);
    let cell = theory_cell(config);
    let matrix = theory_matrix(config)?;
    let tokens = sample_tokens(&mut streams.stream(cell, Purpose::Theory, 0), t.density_samples, config.tokens, t.dim)?;
    let density = estimate_pu(&tokens, &matrix, t.bins)?;
    if config.noise_sd.is_nan() || config.noise_sd <= 0.0 {
        return Err(ExperimentError::Config("the lower-bound check needs noise_sd > 0".into()));
    }
    let params = LowerBoundParams { tokens: config.tokens, beta: t.beta, holder: t.holder, noise_sd: config.noise_sd, floor: t.floor };
    let constants = LowerBoundConstants::new(&density, params)?;
    let kl_tokens = sample_tokens(&mut streams.stream(cell, Purpose::Theory, 1), t.kl_samples, config.tokens, t.dim)?;
    let mut lower_bound = Vec::new();
    for &kbar in &t.kbars {
        let m = constants.sample_size_for(kbar);
        if m < 1.0 || constants.kbar(m) != kbar {
            return Err(TheoryError::Infeasible {
                kbar,
                capacity: constants.kbar(m.max(1.0)),
                hint: "no sample size reaches this K̄ exactly; raise K̄ or lower the Hölder constant".into(),
            }
            .into());
        }
        let set = build_hypotheses(&constants, m, t.max_words, &mut streams.stream(cell, Purpose::Codebook, kbar as u64))?;
        let check = check_construction(&set, &constants, &density, m);
        let kl = kl_summary(&set, &matrix, &kl_tokens, config.noise_sd, m)?;
        lower_bound.push((set, LowerBoundEntry { check, kl, centers: Vec::new() }));
    }
    let fano = match (t.fano_trials, lower_bound.first()) {
        (0, _) | (_, None) => None,
        (trials, Some((set, _))) => {
            let mut rng = streams.stream(cell, Purpose::Theory, 2);
            Some(fano_demo(set, &matrix, t.fano_samples, config.tokens, config.noise_sd, trials, &mut rng)?)
        }
    };
    let lower_bound = lower_bound
        .into_iter()
        .map(|(set, mut e)| {
            e.centers = set.centers().to_vec();
            e
        })
        .collect();
    let checks = coercivity_trials(config)?;
    let passed = checks.iter().filter(|c| c.holds_within(MARGIN_Z)).count();
    let min_margin_in_se = checks
        .iter()
        .map(|c| if c.se > 0.0 { c.margin / c.se } else if c.margin >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY })
        .fold(f64::INFINITY, f64::min);
    Ok(TheoryReport {
        density: DensitySummary::new(&density, constants.floor),
        bound_alpha: constants.bound_alpha(),
        constants,
        lower_bound,
        coercivity: CoercivitySummary {
            trials: checks.len(),
            passed,
            // JSON has no infinities; an empty or exact set reports 0.
            min_margin_in_se: if min_margin_in_se.is_finite() { min_margin_in_se } else { 0.0 },
            checks,
        },
        fano,
        config: Some(config.to_json_value()),
    })
}

/// Writes `theory.json` into `out_dir`.
pub fn run_theory_check(config: &ExperimentConfig, out_dir: &Path) -> Result<TheoryReport, ExperimentError> {
    let report = theory_report(config)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("theory.json"), report.to_json())?;
    Ok(report)
}

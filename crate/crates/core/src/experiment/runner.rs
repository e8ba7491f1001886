use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::{generate_dataset, sample_ground_truth, sample_tokens, Dataset, GroundTruth};
use crate::estimator::{fit, select_hyperparams, FitConfig, InitMode};
use crate::evaluation::{test_errors, CellFailure, ErrorRecord, RateStudyReport, RECORD_HEADER};
use crate::rng::{cell_id, Purpose, SeedStreams};

use super::{emit_plots, ExperimentConfig, ExperimentError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub degree: usize,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn beta(&self) -> f64 {
        (self.degree - 1) as f64
    }

    /// Stream id shared by every `M` of a `(d, P)` series, so datasets nest.
    pub fn stream_cell(&self) -> u64 {
        cell_id(&[self.d as u64, self.degree as u64])
    }
}

/// `key=v1|v2` clauses joined by commas over `d`, `M`, `P` and `seed`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CellFilter {
    d: Option<Vec<u64>>,
    m: Option<Vec<u64>>,
    degree: Option<Vec<u64>>,
    seed: Option<Vec<u64>>,
}

impl CellFilter {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut f = Self::default();
        for clause in text.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let (key, values) = clause
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("filter clause `{clause}` lacks `=`")))?;
            let values = values
                .split('|')
                .map(|v| v.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Config(format!("filter clause `{clause}`: {e}")))?;
            let slot = match key.trim() {
                "d" => &mut f.d,
                "M" | "m" => &mut f.m,
                "P" | "p" => &mut f.degree,
                "seed" => &mut f.seed,
                other => return Err(ExperimentError::Config(format!("unknown filter key `{other}`"))),
            };
            *slot = Some(values);
        }
        Ok(f)
    }

    pub fn accepts(&self, key: &CellKey) -> bool {
        let ok = |set: &Option<Vec<u64>>, v: u64| set.as_ref().is_none_or(|s| s.contains(&v));
        ok(&self.d, key.d as u64) && ok(&self.m, key.m as u64) && ok(&self.degree, key.degree as u64) && ok(&self.seed, key.seed)
    }
}

pub fn cells(config: &ExperimentConfig, filter: Option<&CellFilter>) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &degree in &config.degrees {
        for &d in &config.dims {
            for &m in &config.sample_sizes {
                for seed in config.seed_offset..config.seed_offset + config.seeds {
                    let key = CellKey { degree, d, m, seed };
                    if filter.is_none_or(|f| f.accepts(&key)) {
                        out.push(key);
                    }
                }
            }
        }
    }
    out
}

pub fn ground_truth(config: &ExperimentConfig, key: &CellKey, streams: &SeedStreams) -> Result<GroundTruth, ExperimentError> {
    let mut rng = streams.stream(key.stream_cell(), Purpose::GroundTruth, key.seed);
    Ok(sample_ground_truth(&mut rng, key.d, key.degree, config.truth_basis, config.scheme, config.op_norm_bound)?)
}

pub fn fit_config(config: &ExperimentConfig, key: &CellKey) -> Result<FitConfig, ExperimentError> {
    let degree = config.estimator_degree(key.degree);
    let beta = degree.saturating_sub(1).max(1) as f64;
    let (k_rule, ridge_rule) = select_hyperparams(key.m, config.tokens, beta, config.k_scale(degree), config.lambda_scale)?;
    let mut fc = FitConfig::new(degree, config.basis_size.unwrap_or(k_rule), config.ridge.unwrap_or(ridge_rule));
    fc.matrix_penalty = config.matrix_penalty;
    fc.rounds = config.rounds;
    fc.a_step = config.a_step.clone();
    fc.init = InitMode::HotStart { sd: config.hot_start_sd };
    fc.op_norm_bound = config.op_norm_bound;
    Ok(fc)
}

/// Ground truth and training data of a cell. The provenance records the
/// master seed and seed index, which also key the hot-start stream.
pub fn cell_data(config: &ExperimentConfig, key: &CellKey) -> Result<(GroundTruth, Dataset), ExperimentError> {
    let streams = SeedStreams::new(config.master_seed);
    let truth = ground_truth(config, key, &streams)?;
    let mut rng = streams.stream(key.stream_cell(), Purpose::TrainData, key.seed);
    let mut ds = generate_dataset(&mut rng, &truth, key.m, config.tokens, config.noise_sd)?;
    ds.provenance.seed = config.master_seed;
    ds.provenance.stream = key.seed;
    Ok((truth, ds))
}

/// Hot-start stream for a dataset produced by [`cell_data`].
pub fn hot_start_rng(ds: &Dataset, truth: &GroundTruth) -> rand_chacha::ChaCha8Rng {
    let cell = cell_id(&[truth.dim() as u64, truth.degree as u64]);
    SeedStreams::new(ds.provenance.seed).stream(cell, Purpose::HotStart, ds.provenance.stream)
}

/// Truth, data, fit and held-out evaluation of one cell.
pub fn run_cell(config: &ExperimentConfig, key: &CellKey) -> Result<ErrorRecord, ExperimentError> {
    let start = Instant::now();
    let streams = SeedStreams::new(config.master_seed);
    let cell = key.stream_cell();
    let (truth, ds) = cell_data(config, key)?;
    let test = sample_tokens(&mut streams.stream(cell, Purpose::TestTokens, key.seed), config.test_size, config.tokens, key.d)?;
    let fc = fit_config(config, key)?;
    let result = fit(&ds, &fc, Some(&truth.matrix), &mut hot_start_rng(&ds, &truth))?;
    let errors = test_errors(&result, &truth, &test)?;
    Ok(ErrorRecord {
        d: key.d,
        m: key.m,
        n: config.tokens,
        beta: key.beta(),
        seed: key.seed,
        composed_mse: errors.composed_mse,
        pairwise_l2: errors.pairwise_l2,
        wall_s: if config.record_timing { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Runs every selected cell; results keep the grid order whatever the
/// scheduling. Each finished cell is appended to `sink` under its lock.
pub fn collect_records(
    config: &ExperimentConfig,
    filter: Option<&CellFilter>,
    sink: Option<&Mutex<File>>,
) -> Result<(Vec<ErrorRecord>, Vec<CellFailure>), ExperimentError> {
    config.validate()?;
    let keys = cells(config, filter);
    if keys.is_empty() {
        return Err(ExperimentError::Config("the cell filter selects no cells".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let outcomes: Vec<(CellKey, Result<ErrorRecord, String>)> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let outcome = run_cell(config, key).map_err(|e| e.to_string());
                if let (Some(sink), Ok(rec)) = (sink, &outcome) {
                    let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
                    // A single write per record keeps lines whole.
                    let _ = f.write_all(format!("{}\n", rec.csv_row()).as_bytes()).and_then(|_| f.flush());
                }
                (*key, outcome)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (key, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(error) => failures.push(CellFailure { d: key.d, m: key.m, beta: key.beta(), seed: key.seed, error }),
        }
    }
    Ok((records, failures))
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `records.partial.csv` while running, then `records.csv`,
/// `report.json`, `config.toml` and one SVG per `β` into `out_dir`.
pub fn run_rate_study(config: &ExperimentConfig, filter: Option<&CellFilter>) -> Result<RateStudyReport, ExperimentError> {
    run_rate_study_in(config, filter, &config.out_dir)
}

pub fn run_rate_study_in(
    config: &ExperimentConfig,
    filter: Option<&CellFilter>,
    out_dir: &Path,
) -> Result<RateStudyReport, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let partial = out_dir.join("records.partial.csv");
    let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&partial)?;
    writeln!(file, "{RECORD_HEADER}")?;
    let sink = Mutex::new(file);
    let (records, failures) = collect_records(config, filter, Some(&sink))?;
    let total = records.len() + failures.len();
    let failed = failures.len();
    let mut report = RateStudyReport::from_records(records, failures);
    report.config = Some(config.to_json_value());
    write_atomic(&out_dir.join("records.csv"), &report.records_csv())?;
    write_atomic(&out_dir.join("report.json"), &report.to_json())?;
    write_atomic(&out_dir.join("config.toml"), &config.to_toml())?;
    if report.cells.iter().any(|c| report.slope(c.d, c.beta).is_some()) {
        emit_plots(&report, out_dir)?;
    }
    if failed * 5 > total {
        return Err(ExperimentError::TooManyFailures { failed, total });
    }
    Ok(report)
}

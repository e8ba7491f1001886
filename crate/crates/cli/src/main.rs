use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ipsattn::datagen::io::{read_binary, read_csv, write_binary, write_csv};
use ipsattn::datagen::{Dataset, GroundTruth};
use ipsattn::estimator::fit;
use ipsattn::evaluation::RateStudyReport;
use ipsattn::experiment::runner::cells;
use ipsattn::experiment::{
    cell_data, emit_plots, fit_config, hot_start_rng, run_rate_study_in, run_theory_check, CellFilter, CellKey,
    ExperimentConfig, ExperimentError,
};

#[derive(Parser)]
#[command(name = "ipsattn", version, about = "Attention-style interacting particle experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

#[derive(Subcommand)]
enum Command {
    /// Write the ground truth and training data of the selected cells.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Cell filter, e.g. `d=5,M=2000,seed=0`.
        #[arg(long)]
        cells: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Fit a dataset written by `generate`, hot-started at its ground truth.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run the grid, then write records, report and plots.
    RateStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cells: Option<String>,
    },
    /// Density, lower-bound construction and coercivity checks.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Render plots from a saved `report.json`.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn filter(text: &Option<String>) -> Result<Option<CellFilter>, ExperimentError> {
    text.as_deref().map(CellFilter::parse).transpose()
}

fn cell_stem(key: &CellKey) -> String {
    format!("d{}_P{}_M{}_s{}", key.d, key.degree, key.m, key.seed)
}

fn generate(common: &Common, cells_arg: &Option<String>, format: Format) -> Result<(), ExperimentError> {
    let config = load(common)?;
    let filter = filter(cells_arg)?;
    let keys = cells(&config, filter.as_ref());
    if keys.is_empty() {
        return Err(ExperimentError::Config("the cell filter selects no cells".into()));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    for key in &keys {
        let (truth, ds) = cell_data(&config, key)?;
        let stem = cell_stem(key);
        let path = match format {
            Format::Csv => {
                let p = config.out_dir.join(format!("{stem}.csv"));
                write_csv(&ds, BufWriter::new(File::create(&p)?))?;
                p
            }
            Format::Bin => {
                let p = config.out_dir.join(format!("{stem}.bin"));
                write_binary(&ds, BufWriter::new(File::create(&p)?))?;
                p
            }
        };
        let truth_path = config.out_dir.join(format!("{stem}.truth.json"));
        std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)?)?;
        println!("{} {}", path.display(), truth_path.display());
    }
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset, ExperimentError> {
    let reader = BufReader::new(File::open(path)?);
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_binary(reader)?,
        _ => read_csv(reader)?,
    })
}

fn fit_command(common: &Common, data: &Path, truth: &Path) -> Result<(), ExperimentError> {
    let config = load(common)?;
    let ds = read_dataset(data)?;
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(truth)?)?;
    if truth.dim() != ds.dim() || truth.id != ds.provenance.truth_id {
        return Err(ExperimentError::Config(format!(
            "truth {} does not match the dataset's truth {}",
            truth.id, ds.provenance.truth_id
        )));
    }
    let key = CellKey { degree: truth.degree, d: ds.dim(), m: ds.samples(), seed: ds.provenance.stream };
    let fc = fit_config(&config, &key)?;
    let result = fit(&ds, &fc, Some(&truth.matrix), &mut hot_start_rng(&ds, &truth))?;
    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("fit.json");
    std::fs::write(&path, result.to_json())?;
    let traj: Vec<String> = result.trajectory.iter().map(|v| format!("{v:.6e}")).collect();
    println!("K = {} ridge = {:.3e} train mse: {}", fc.basis_size, fc.ridge, traj.join(" "));
    println!("{}", path.display());
    Ok(())
}

fn rate_study(common: &Common, cells_arg: &Option<String>) -> Result<(), ExperimentError> {
    let config = load(common)?;
    let filter = filter(cells_arg)?;
    let report = run_rate_study_in(&config, filter.as_ref(), &config.out_dir)?;
    for s in &report.slopes {
        println!(
            "d = {} beta = {}: slope {:.3} (theory {:.3}, r2 {:.3})",
            s.d, s.beta, s.fit.slope, s.theoretical, s.fit.r_squared
        );
    }
    println!("{} records, {} failures -> {}", report.records.len(), report.failures.len(), config.out_dir.display());
    Ok(())
}

fn theory_check(common: &Common) -> Result<(), ExperimentError> {
    let config = load(common)?;
    let report = run_theory_check(&config, &config.out_dir)?;
    for e in &report.lower_bound {
        let c = &e.check;
        println!(
            "K̄ = {}: M = {} hypotheses {} sup {} separation {} hamming {} alpha_est {:.3e}",
            c.kbar,
            c.samples,
            c.hypotheses,
            ok(c.sup_ok),
            ok(c.separation_ok),
            ok(c.hamming_ok),
            e.kl.alpha
        );
    }
    let co = &report.coercivity;
    println!("coercivity {}/{} within 3 se (min {:.2} se)", co.passed, co.trials, co.min_margin_in_se);
    println!("{}", config.out_dir.join("theory.json").display());
    Ok(())
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn plot(report: &Path, out: &Path) -> Result<(), ExperimentError> {
    let report: RateStudyReport = serde_json::from_str(&std::fs::read_to_string(report)?)?;
    for p in emit_plots(&report, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate { common, cells, format } => generate(common, cells, *format),
        Command::Fit { common, data, truth } => fit_command(common, data, truth),
        Command::RateStudy { common, cells } => rate_study(common, cells),
        Command::TheoryCheck { common } => theory_check(common),
        Command::Plot { report, out } => plot(report, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `faultline` — command-line front end over the core library.
//!
//! Every subcommand reads and writes plain JSON files, prints a compact
//! JSON summary on stdout, and reports failures as a machine-readable
//! JSON object on stderr with a nonzero exit code:
//!
//! ```text
//! {"error":{"kind":"config","message":"..."}}
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use faultline_core::attack::{
    poison_dataset, poison_dataset_measurements, ChainOptions, ConstraintSet, PoisonPlan,
    ThreatModel, Trigger,
};
use faultline_core::estimation::{MeasurementSet, StateEstimator};
use faultline_core::exec::with_threads;
use faultline_core::fault::{generate_dataset, Dataset, DatasetConfig};
use faultline_core::harness::{
    attack_success_rate, clean_accuracy, export_report, run_sweep, ExperimentConfig, ReportFormat,
};
use faultline_core::models::{train_model, DesignMatrix, ModelKind, TrainConfig, TrainedModel};
use faultline_core::{BusState, Error, GridModel, Result};

/// Measurement-noise scale assumed when replaying a measurement-level plan;
/// matches the harness default.
const DEFAULT_MEASUREMENT_SIGMA: f64 = 0.01;

#[derive(Parser)]
#[command(
    name = "faultline",
    version,
    about = "Backdoor-poisoning evaluation workbench for fault-line localization classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled fault dataset from a grid description.
    Generate {
        /// Grid description JSON.
        #[arg(long)]
        grid: PathBuf,
        /// Dataset configuration JSON; defaults per grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for dataset.json.
        #[arg(long)]
        out: PathBuf,
        /// csv additionally writes a flat feature table (dataset.csv).
        #[arg(long, default_value = "json", value_parser = ReportFormat::from_str)]
        format: ReportFormat,
    },
    /// Apply a poison plan to a stored dataset.
    Poison {
        /// Dataset JSON produced by `generate`.
        dataset: PathBuf,
        /// Poison plan JSON (ratio, trigger entries, target label,
        /// threat model, seed).
        #[arg(long)]
        config: PathBuf,
        /// Grid description JSON; required by measurement-level plans,
        /// which replay the attack through the estimation chain.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output directory for poisoned.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a victim classifier on a dataset's training split.
    Train {
        /// Dataset JSON (clean or poisoned).
        dataset: PathBuf,
        /// Victim architecture: fcnn, cnn, or svm.
        #[arg(value_parser = ModelKind::from_str)]
        model: ModelKind,
        /// Training configuration JSON; library defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's test split.
    Evaluate {
        /// Checkpoint JSON produced by `train`.
        checkpoint: PathBuf,
        /// Dataset JSON whose test split is scored.
        dataset: PathBuf,
        /// Trigger JSON (mask_indices, delta_values, target_label); when
        /// given, the attack success rate is measured alongside clean
        /// accuracy. Poison plan files are accepted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// When set, metrics are also written to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Format of the written metrics file.
        #[arg(long, default_value = "json", value_parser = ReportFormat::from_str)]
        format: ReportFormat,
    },
    /// Run a sweep experiment and export the report.
    Sweep {
        /// Grid description JSON.
        #[arg(long)]
        grid: PathBuf,
        /// Experiment configuration JSON (see configs/).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
        /// Report format: json or csv.
        #[arg(long, default_value = "json", value_parser = ReportFormat::from_str)]
        format: ReportFormat,
        /// Worker threads (0 = library default).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Run WLS estimation and the bad-data detector on measurements.
    Detect {
        /// Measurement JSON: {"z": [...]} with either "sigma" (per entry)
        /// or "uniform_sigma". Layout: P then Q per bus, optionally
        /// followed by voltage magnitudes.
        measurements: PathBuf,
        /// Grid description JSON.
        #[arg(long)]
        grid: PathBuf,
        /// When set, the report is also written to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Sparse trigger file: the subset of a poison plan that `evaluate` needs,
/// so plan files parse as trigger files too.
#[derive(Debug, Serialize, Deserialize)]
struct TriggerFile {
    mask_indices: Vec<usize>,
    delta_values: Vec<f64>,
    target_label: usize,
}

impl TriggerFile {
    fn into_trigger(self, dim: usize, class_count: usize) -> Result<Trigger> {
        if self.mask_indices.len() != self.delta_values.len() {
            return Err(Error::Config(
                "mask_indices and delta_values lengths differ".into(),
            ));
        }
        if let Some(&bad) = self.mask_indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Config(format!(
                "mask index {bad} out of range for feature dimension {dim}"
            )));
        }
        let entries: Vec<(usize, f64)> = self
            .mask_indices
            .into_iter()
            .zip(self.delta_values)
            .collect();
        let trigger = Trigger::from_entries(dim, &entries, self.target_label);
        trigger.validate(dim, class_count)?;
        Ok(trigger)
    }
}

/// Measurement file consumed by `detect`.
#[derive(Debug, Deserialize)]
struct MeasurementsFile {
    z: Vec<f64>,
    #[serde(default)]
    sigma: Option<Vec<f64>>,
    #[serde(default)]
    uniform_sigma: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Generate {
            grid,
            config,
            seed,
            out,
            format,
        } => generate(&grid, config.as_deref(), seed, &out, format),
        Command::Poison {
            dataset,
            config,
            grid,
            out,
        } => poison(&dataset, &config, grid.as_deref(), &out),
        Command::Train {
            dataset,
            model,
            config,
            seed,
            out,
        } => train(&dataset, model, config.as_deref(), seed, &out),
        Command::Evaluate {
            checkpoint,
            dataset,
            config,
            out,
            format,
        } => evaluate(&checkpoint, &dataset, config.as_deref(), out.as_deref(), format),
        Command::Sweep {
            grid,
            config,
            seed,
            out,
            format,
            threads,
        } => sweep(&grid, &config, seed, &out, format, threads),
        Command::Detect {
            measurements,
            grid,
            out,
        } => detect(&measurements, &grid, out.as_deref()),
    }
}

fn generate(
    grid_path: &Path,
    config_path: Option<&Path>,
    seed: u64,
    out: &Path,
    format: ReportFormat,
) -> Result<serde_json::Value> {
    let grid = GridModel::load(grid_path)?;
    let config = match config_path {
        Some(path) => {
            let config: DatasetConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            config.validate(&grid)?;
            config
        }
        None => DatasetConfig::default_for(&grid),
    };
    let dataset = generate_dataset(&grid, &config, seed)?;
    fs::create_dir_all(out)?;
    let json_path = out.join("dataset.json");
    dataset.save(&json_path)?;
    let mut summary = json!({
        "dataset": json_path,
        "samples": dataset.samples.len(),
        "classes": dataset.class_count(),
        "train_rows": dataset.train_indices.len(),
        "test_rows": dataset.test_indices.len(),
    });
    if format == ReportFormat::Csv {
        let csv_path = out.join("dataset.csv");
        dataset.save_csv(&csv_path)?;
        summary["csv"] = json!(csv_path);
    }
    Ok(summary)
}

fn poison(
    dataset_path: &Path,
    plan_path: &Path,
    grid_path: Option<&Path>,
    out: &Path,
) -> Result<serde_json::Value> {
    let dataset = Dataset::load(dataset_path)?;
    let plan = PoisonPlan::from_json(&fs::read_to_string(plan_path)?, dataset.feature_dim())?;
    let poisoned = match plan.threat_model {
        ThreatModel::FeatureLevel => poison_dataset(&dataset, &plan)?,
        ThreatModel::MeasurementLevel => {
            let grid_path = grid_path.ok_or_else(|| {
                Error::Config("measurement-level plans need --grid to replay the chain".into())
            })?;
            let grid = GridModel::load(grid_path)?;
            let (regenerated, traces) = regenerate_with_traces(&grid, &dataset)?;
            debug_assert_eq!(regenerated.samples.len(), dataset.samples.len());
            poison_dataset_measurements(
                &grid,
                &dataset,
                &traces,
                &plan,
                &ConstraintSet::new(*grid.limits()),
                &ChainOptions::default(),
                DEFAULT_MEASUREMENT_SIGMA,
            )?
        }
    };
    fs::create_dir_all(out)?;
    let out_path = out.join("poisoned.json");
    poisoned.save(&out_path)?;
    let victims = poisoned
        .poison_manifest
        .as_ref()
        .map(|m| m.victim_indices.len())
        .unwrap_or(0);
    Ok(json!({
        "poisoned": out_path,
        "victims": victims,
        "threat_model": plan.threat_model,
    }))
}

/// Rebuilds the generation-time voltage traces a measurement-level plan
/// needs. The stored dataset carries its grid hash, seed, and config, so
/// regeneration is exact; a mismatch means the file was edited or belongs
/// to a different grid.
fn regenerate_with_traces(
    grid: &GridModel,
    dataset: &Dataset,
) -> Result<(Dataset, Vec<faultline_core::fault::SampleTrace>)> {
    if grid.content_hash() != dataset.header.grid_hash {
        return Err(Error::Config(
            "grid does not match the dataset header (different content hash)".into(),
        ));
    }
    let (regenerated, traces) = faultline_core::fault::generate_dataset_with_traces(
        grid,
        &dataset.header.config,
        dataset.header.seed,
    )?;
    if regenerated.samples != dataset.samples {
        return Err(Error::Config(
            "dataset does not reproduce from its header; measurement-level \
             poisoning needs the original generated file"
                .into(),
        ));
    }
    Ok((regenerated, traces))
}

fn train(
    dataset_path: &Path,
    model: ModelKind,
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<serde_json::Value> {
    let dataset = Dataset::load(dataset_path)?;
    let mut config = match config_path {
        Some(path) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    let trained = train_model(model, &dataset, &config)?;
    fs::create_dir_all(out)?;
    let out_path = out.join(format!("{model}.model.json"));
    trained.save(&out_path)?;
    Ok(json!({
        "checkpoint": out_path,
        "model": model.name(),
        "classes": trained.class_count(),
    }))
}

fn evaluate(
    checkpoint_path: &Path,
    dataset_path: &Path,
    trigger_path: Option<&Path>,
    out: Option<&Path>,
    format: ReportFormat,
) -> Result<serde_json::Value> {
    let model = TrainedModel::load(checkpoint_path)?;
    let dataset = Dataset::load(dataset_path)?;
    let test = DesignMatrix::test_split(&dataset)?;
    let accuracy = clean_accuracy(&model, &test)?;
    let asr = match trigger_path {
        Some(path) => {
            let file: TriggerFile = serde_json::from_str(&fs::read_to_string(path)?)?;
            let trigger = file.into_trigger(dataset.feature_dim(), dataset.class_count())?;
            Some(attack_success_rate(&model, &test, &trigger)?)
        }
        None => None,
    };
    let metrics = json!({
        "clean_accuracy": accuracy,
        "attack_success_rate": asr,
        "test_rows": test.rows.len(),
    });
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        match format {
            ReportFormat::Json => {
                fs::write(out.join("metrics.json"), format!("{metrics:#}\n"))?;
            }
            ReportFormat::Csv => {
                let asr_text = asr.map(|a| a.to_string()).unwrap_or_default();
                fs::write(
                    out.join("metrics.csv"),
                    format!(
                        "clean_accuracy,attack_success_rate,test_rows\n{accuracy},{asr_text},{}\n",
                        test.rows.len()
                    ),
                )?;
            }
        }
    }
    Ok(metrics)
}

fn sweep(
    grid_path: &Path,
    config_path: &Path,
    seed: Option<u64>,
    out: &Path,
    format: ReportFormat,
    threads: usize,
) -> Result<serde_json::Value> {
    let grid = GridModel::load(grid_path)?;
    let mut config = ExperimentConfig::from_json(&fs::read_to_string(config_path)?)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    let report = with_threads(threads, || run_sweep(&grid, &config))?;
    let path = export_report(&report, out, format)?;
    let failed = report.trials.iter().filter(|t| t.error.is_some()).count();
    Ok(json!({
        "report": path,
        "trials": report.trials.len(),
        "failed_trials": failed,
        "points": report.summaries.len(),
    }))
}

fn detect(
    measurements_path: &Path,
    grid_path: &Path,
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    let grid = GridModel::load(grid_path)?;
    let file: MeasurementsFile = serde_json::from_str(&fs::read_to_string(measurements_path)?)?;
    let z = DVector::from_vec(file.z);
    let measurements = match (file.sigma, file.uniform_sigma) {
        (Some(sigma), None) => MeasurementSet::new(z, DVector::from_vec(sigma))?,
        (None, Some(uniform)) => MeasurementSet::with_uniform_sigma(z, uniform)?,
        _ => {
            return Err(Error::Config(
                "measurement file needs exactly one of sigma or uniform_sigma".into(),
            ))
        }
    };
    let d = grid.bus_count();
    let estimator = match measurements.len() {
        m if m == 2 * d => StateEstimator::new(&grid),
        m if m == 3 * d => StateEstimator::new(&grid).with_voltage_rows(true),
        m => {
            return Err(Error::Dimension {
                expected: 2 * d,
                actual: m,
                context: "measurement vector (P,Q per bus, optional |u|)",
            })
        }
    };
    let (solution, report) = estimator.estimate_and_test(&measurements, &BusState::flat(d))?;
    let summary = json!({
        "flagged": report.flagged,
        "objective": report.objective,
        "chi2_threshold": report.chi2_threshold,
        "degrees_of_freedom": report.degrees_of_freedom,
        "max_normalized_residual": report.max_normalized_residual,
        "iterations": solution.iterations,
    });
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bad_data.json"), format!("{summary:#}\n"))?;
    }
    Ok(summary)
}

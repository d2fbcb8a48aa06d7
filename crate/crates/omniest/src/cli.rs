//! Batch front end shared by the binary and the integration tests: `simulate`
//! runs a scenario config into report files, `estimate` fits a CSV dataset
//! with optional hospital-level stratification, `report` merges coefficient
//! tables. All commands write a manifest describing their inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{design_view, read_csv, DataError, DesignView, LongitudinalDataset};
use crate::dropout::{
    build_weights, fit_dropout, write_hazard_diagnostics, DropoutError, DropoutModelFit,
    DropoutSpec, WeightScheme, WeightVector,
};
use crate::estimators::{fit_baseline, fit_omni, BaselineKind, EstimatorError, OmniFit};
use crate::inference::{
    confidence_intervals, sandwich_variance, stabilization_default, stabilize_effects,
    EffectClusters, EffectSource, InferenceError,
};
use crate::report::{
    coefficient_table_csv, comparison_report_csv, comparison_report_text, merged_comparison,
    merged_comparison_csv, merged_comparison_text, parse_coefficient_table, simulation_report_csv,
    simulation_report_text, CoefficientRow, ReportError,
};
use crate::simulation::{
    run_monte_carlo_with_progress, table4_experiment_with_progress, EstimatorName, KmeansConfig,
    KmeansMode, ScenarioConfig, SimulationError,
};

/// Fixed k-means restart seed for `estimate`; the command has no seed input
/// and its outputs must be a pure function of (data, config).
const ESTIMATE_KMEANS_SEED: u64 = 1729;

/// Command failures carrying the process exit code: 2 config, 3 data, 4
/// numerical.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

fn config_err(context: &Path, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {message}", context.display()))
}

fn io_err(context: &Path, err: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {err}", context.display()))
}

fn data_err(err: DataError) -> CliError {
    match err {
        // The config named a column the data does not have.
        DataError::UnknownCovariate { .. } | DataError::EmptySelection => {
            CliError::Config(err.to_string())
        }
        other => CliError::Data(other.to_string()),
    }
}

fn data_err_at(path: &Path, err: DataError) -> CliError {
    match data_err(err) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn dropout_err(err: DropoutError) -> CliError {
    match err {
        DropoutError::UnknownPredictor { .. } => CliError::Config(err.to_string()),
        DropoutError::Io(io) => CliError::Data(io.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn estimator_err(err: EstimatorError) -> CliError {
    CliError::Numerical(err.to_string())
}

fn inference_err(err: InferenceError) -> CliError {
    CliError::Numerical(err.to_string())
}

fn simulation_err(err: SimulationError) -> CliError {
    match err {
        SimulationError::ConfigInvalid { .. } => CliError::Config(err.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn report_err(err: ReportError) -> CliError {
    CliError::Data(err.to_string())
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    /// Input file name -> SHA-256 of its bytes.
    pub input_sha256: BTreeMap<String, String>,
    pub tool_version: String,
    pub duration_seconds: f64,
}

fn sha256_of(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    fs::write(&path, body + "\n").map_err(|e| io_err(&path, e))
}

fn write_output(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| io_err(path, e))
}

/// Thread-count resolution: the environment variable wins over the flag.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let env = std::env::var("OMNIEST_THREADS").ok();
    threads_from(env.as_deref(), flag)
}

fn threads_from(env: Option<&str>, flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match env {
        None => Ok(flag),
        Some(text) => match text.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "OMNIEST_THREADS must be a positive integer, got {text:?}"
            ))),
        },
    }
}

/// Runs `body` inside a dedicated pool of `threads` workers, or on the global
/// pool when no count was requested.
fn with_threads<T: Send>(
    threads: Option<usize>,
    body: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(body()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(body))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Run the paired with/without-stabilization experiment instead of the
    /// plain estimator comparison.
    pub paired: bool,
    pub verbosity: u8,
}

pub fn cmd_simulate(opts: &SimulateOptions) -> Result<(), CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(&opts.config).map_err(|e| config_err(&opts.config, e))?;
    let mut cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| config_err(&opts.config, e))?;
    if let Some(n) = opts.replicates {
        cfg.n_replicates = n;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(simulation_err)?;
    let threads = resolve_threads(opts.threads)?;
    fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, e))?;

    let total = cfg.n_replicates;
    let done = AtomicUsize::new(0);
    let progress = |_replicate: u64| {
        let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
        eprintln!("replicate {finished}/{total}");
    };
    let hook: Option<&(dyn Fn(u64) + Sync)> = (opts.verbosity >= 1).then_some(&progress);

    if opts.paired {
        let cmp = with_threads(threads, || table4_experiment_with_progress(&cfg, hook))?
            .map_err(simulation_err)?;
        write_output(&opts.out.join("comparison.csv"), &comparison_report_csv(&cmp))?;
        write_output(&opts.out.join("comparison.txt"), &comparison_report_text(&cmp))?;
    } else {
        let report = with_threads(threads, || run_monte_carlo_with_progress(&cfg, hook))?
            .map_err(simulation_err)?;
        write_output(&opts.out.join("report.csv"), &simulation_report_csv(&report))?;
        write_output(&opts.out.join("report.txt"), &simulation_report_text(&report))?;
    }

    let manifest = RunManifest {
        command: if opts.paired {
            "simulate --paired".into()
        } else {
            "simulate".into()
        },
        config_path: Some(opts.config.display().to_string()),
        seed: Some(cfg.seed),
        input_sha256: BTreeMap::from([(
            opts.config.display().to_string(),
            sha256_of(&opts.config)?,
        )]),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&opts.out, &manifest)
}

/// Config for `estimate`: which columns to model and how.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub covariates: Vec<String>,
    #[serde(default)]
    pub dropout: DropoutSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorName>,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    /// Hospital-constant column to split the analysis by.
    #[serde(default)]
    pub strata: Option<String>,
    #[serde(default)]
    pub kmeans: KmeansConfig,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_estimators() -> Vec<EstimatorName> {
    vec![
        EstimatorName::Omni,
        EstimatorName::Gee,
        EstimatorName::WGee,
        EstimatorName::CWGee,
    ]
}

fn default_level() -> f64 {
    0.95
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |message: String| CliError::Config(message);
        if self.covariates.is_empty() {
            return Err(invalid("covariates: must name at least one column".into()));
        }
        for (i, name) in self.covariates.iter().enumerate() {
            if self.covariates[..i].contains(name) {
                return Err(invalid(format!("covariates: {name:?} listed twice")));
            }
        }
        if self.estimators.is_empty() {
            return Err(invalid("estimators: must name at least one".into()));
        }
        for (i, est) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(est) {
                return Err(invalid(format!("estimators: {} listed twice", est.label())));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(invalid(format!(
                "level: must be strictly between 0 and 1, got {}",
                self.level
            )));
        }
        if self.kmeans.k_grid.is_empty() {
            return Err(invalid("kmeans.k_grid: must not be empty".into()));
        }
        if let Some(k) = self.kmeans.k_grid.iter().find(|&&k| k < 2) {
            return Err(invalid(format!("kmeans.k_grid: entry {k} is below 2")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub data: PathBuf,
    pub config: PathBuf,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub parallel_strata: bool,
    pub verbosity: u8,
}

/// One stratum's slice of the dataset, labeled by the stratifying value.
struct Stratum {
    label: Option<String>,
    dataset: LongitudinalDataset,
}

/// Splits by a hospital-constant column; the full dataset when `column` is
/// None. Strata are ordered by value.
fn split_strata(
    dataset: &LongitudinalDataset,
    column: Option<&str>,
) -> Result<Vec<Stratum>, CliError> {
    let Some(column) = column else {
        return Ok(vec![Stratum {
            label: None,
            dataset: dataset.clone(),
        }]);
    };
    let col = dataset
        .covariate_names
        .iter()
        .position(|n| n == column)
        .ok_or_else(|| CliError::Config(format!("strata: unknown column {column:?}")))?;

    let mut value_of: BTreeMap<&str, f64> = BTreeMap::new();
    for hospital in &dataset.hospitals {
        let mut seen: Option<f64> = None;
        for patient in &hospital.patients {
            for row in &patient.covariates {
                let value = row[col];
                match seen {
                    None => seen = Some(value),
                    Some(prev) if prev == value => {}
                    Some(prev) => {
                        return Err(CliError::Data(format!(
                            "strata column {column:?} varies within hospital {}: {prev} vs {value}",
                            hospital.id
                        )));
                    }
                }
            }
        }
        value_of.insert(&hospital.id, seen.expect("patients have rows"));
    }

    let mut levels: Vec<f64> = value_of.values().copied().collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite strata values"));
    levels.dedup();

    let mut out = Vec::new();
    for level in levels {
        let subset = dataset
            .retain_hospitals(|id| value_of[id] == level)
            .map_err(data_err)?;
        out.push(Stratum {
            label: Some(level.to_string()),
            dataset: subset,
        });
    }
    Ok(out)
}

pub fn cmd_estimate(opts: &EstimateOptions) -> Result<(), CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(&opts.config).map_err(|e| config_err(&opts.config, e))?;
    let cfg: AnalysisConfig =
        serde_json::from_str(&text).map_err(|e| config_err(&opts.config, e))?;
    cfg.validate()?;
    let threads = resolve_threads(opts.threads)?;
    let dataset = read_csv(&opts.data, None).map_err(|e| data_err_at(&opts.data, e))?;
    fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, e))?;

    let strata = split_strata(&dataset, cfg.strata.as_deref())?;
    let run_one = |stratum: &Stratum| -> Result<(), CliError> {
        let dir = match &stratum.label {
            None => opts.out.clone(),
            Some(label) => opts.out.join(format!("stratum_{label}")),
        };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        if opts.verbosity >= 1 {
            eprintln!(
                "stratum {}: {} hospitals, {} patients",
                stratum.label.as_deref().unwrap_or("(all)"),
                stratum.dataset.n_hospitals(),
                stratum.dataset.n_patients()
            );
        }
        analyze_into(&dir, &stratum.dataset, &cfg)
    };
    with_threads(threads, || {
        if opts.parallel_strata {
            use rayon::prelude::*;
            strata.par_iter().map(run_one).collect::<Result<(), _>>()
        } else {
            strata.iter().try_for_each(run_one)
        }
    })??;

    let manifest = RunManifest {
        command: "estimate".into(),
        config_path: Some(opts.config.display().to_string()),
        seed: None,
        input_sha256: BTreeMap::from([
            (opts.config.display().to_string(), sha256_of(&opts.config)?),
            (opts.data.display().to_string(), sha256_of(&opts.data)?),
        ]),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_manifest(&opts.out, &manifest)
}

/// Fitted pieces of one stratum that the output writers consume.
struct OmniOutputs {
    fit: OmniFit,
    clusters: Option<EffectClusters>,
    intervals: Vec<crate::inference::CoefficientInterval>,
}

fn fit_omni_outputs(
    view: &DesignView,
    weights: &WeightVector,
    dropout: &DropoutModelFit,
    cfg: &AnalysisConfig,
) -> Result<OmniOutputs, CliError> {
    let fit = fit_omni(view, weights).map_err(estimator_err)?;
    let stabilize = match cfg.kmeans.mode {
        KmeansMode::On => true,
        KmeansMode::Off => false,
        KmeansMode::Auto => stabilization_default(view.mean_cluster_size()),
    };
    let clusters = if stabilize {
        let effects: Vec<f64> = fit.hospital_effects.iter().copied().collect();
        Some(
            stabilize_effects(&effects, &cfg.kmeans.k_grid, ESTIMATE_KMEANS_SEED)
                .map_err(inference_err)?,
        )
    } else {
        None
    };
    let source = match &clusters {
        Some(c) => EffectSource::Stabilized(c),
        None => EffectSource::Raw,
    };
    let components =
        sandwich_variance(view, &fit, weights, Some(dropout), source).map_err(inference_err)?;
    let intervals = confidence_intervals(&fit, &components, cfg.level);
    Ok(OmniOutputs {
        fit,
        clusters,
        intervals,
    })
}

fn analyze_into(
    dir: &Path,
    dataset: &LongitudinalDataset,
    cfg: &AnalysisConfig,
) -> Result<(), CliError> {
    let selection: Vec<&str> = cfg.covariates.iter().map(String::as_str).collect();
    let view = design_view(dataset, &selection).map_err(data_err)?;
    let dropout = fit_dropout(&view, &cfg.dropout).map_err(dropout_err)?;
    let w1 = build_weights(&view, &dropout, WeightScheme::InversePi).map_err(dropout_err)?;
    let omni_weights = match cfg.weight_scheme {
        WeightScheme::InversePi => None,
        scheme => Some(build_weights(&view, &dropout, scheme).map_err(dropout_err)?),
    };

    write_dropout_model(&dir.join("dropout_model.csv"), &dropout)?;
    write_hazard_diagnostics(&view, &dropout, &w1, &dir.join("dropout_diagnostics.csv"))
        .map_err(dropout_err)?;

    let mut rows: Vec<CoefficientRow> = Vec::new();
    for estimator in &cfg.estimators {
        match estimator {
            EstimatorName::Omni => {
                let outputs =
                    fit_omni_outputs(&view, omni_weights.as_ref().unwrap_or(&w1), &dropout, cfg)?;
                for interval in &outputs.intervals {
                    rows.push(CoefficientRow {
                        estimator: "OMNI".into(),
                        coefficient: interval.name.clone(),
                        estimate: interval.estimate,
                        ase: Some(interval.ase),
                        p_value: Some(interval.p_value),
                    });
                }
                write_inference(&dir.join("inference.csv"), &outputs)?;
                write_hospital_effects(&dir.join("hospital_effects.csv"), &view, &outputs)?;
            }
            baseline => {
                let kind = match baseline {
                    EstimatorName::Gee => BaselineKind::Gee,
                    EstimatorName::WGee => BaselineKind::WGee,
                    EstimatorName::CWGee => BaselineKind::CWGee,
                    EstimatorName::Omni => unreachable!("handled above"),
                };
                let ip = match kind {
                    BaselineKind::Gee => None,
                    _ => Some(&w1),
                };
                let fit = fit_baseline(&view, ip, kind).map_err(estimator_err)?;
                // Slot 0 is the baseline's nuisance intercept; the comparison
                // tables list the shared covariate slopes.
                for (c, name) in fit.coefficient_names.iter().enumerate().skip(1) {
                    rows.push(CoefficientRow {
                        estimator: kind.label().into(),
                        coefficient: name.clone(),
                        estimate: fit.coefficients[c],
                        ase: None,
                        p_value: None,
                    });
                }
            }
        }
    }
    write_output(&dir.join("coefficients.csv"), &coefficient_table_csv(&rows))
}

fn write_dropout_model(path: &Path, fit: &DropoutModelFit) -> Result<(), CliError> {
    let se = dropout_standard_errors(fit)?;
    let mut out = String::from("term,estimate,se\n");
    for (i, name) in fit.coefficient_names.iter().enumerate() {
        use std::fmt::Write as _;
        let _ = writeln!(out, "{},{},{}", name, fit.coefficients[i], se[i]);
    }
    write_output(path, &out)
}

fn dropout_standard_errors(fit: &DropoutModelFit) -> Result<Vec<f64>, CliError> {
    let inverse = fit
        .information
        .clone()
        .try_inverse()
        .ok_or_else(|| CliError::Numerical("dropout information matrix is singular".into()))?;
    Ok((0..inverse.nrows()).map(|i| inverse[(i, i)].sqrt()).collect())
}

fn write_inference(path: &Path, outputs: &OmniOutputs) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let k_chosen = outputs
        .clusters
        .as_ref()
        .map(|c| c.k_chosen.to_string())
        .unwrap_or_default();
    let silhouette = outputs
        .clusters
        .as_ref()
        .and_then(|c| c.silhouette)
        .map(|s| s.to_string())
        .unwrap_or_default();
    let mut out = String::from("coefficient,estimate,ase,lower,upper,p_value,k_chosen,silhouette\n");
    for interval in &outputs.intervals {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            interval.name,
            interval.estimate,
            interval.ase,
            interval.lower,
            interval.upper,
            interval.p_value,
            k_chosen,
            silhouette
        );
    }
    write_output(path, &out)
}

fn write_hospital_effects(
    path: &Path,
    view: &DesignView,
    outputs: &OmniOutputs,
) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let mut out = String::from("hospital_id,theta,cluster,stabilized_theta\n");
    for (h, id) in view.hospital_ids.iter().enumerate() {
        let (cluster, stabilized) = match &outputs.clusters {
            Some(c) => (c.assignments[h].to_string(), c.stabilized[h].to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{}",
            id, outputs.fit.hospital_effects[h], cluster, stabilized
        );
    }
    write_output(path, &out)
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
}

pub fn cmd_report(opts: &ReportOptions) -> Result<(), CliError> {
    if opts.inputs.is_empty() {
        return Err(CliError::Config("report: at least one input file".into()));
    }
    let mut tables = Vec::new();
    for path in &opts.inputs {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let table = parse_coefficient_table(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        tables.push(table);
    }
    let merged = merged_comparison(&tables).map_err(report_err)?;
    let is_csv = opts
        .out
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
    let body = if is_csv {
        merged_comparison_csv(&merged)
    } else {
        merged_comparison_text(&merged)
    };
    write_output(&opts.out, &body)
}

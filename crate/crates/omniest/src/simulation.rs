//! Synthetic hospital panels and the Monte Carlo harness that evaluates the
//! estimators on them.
//!
//! A scenario draws hospital-level context (two latent factors, a continuous
//! score, a binary flag), a cluster size from a zero-truncated log-linear
//! Poisson model, patient covariates, correlated residuals, and a monotone
//! observation process whose continuation hazard depends on the current x1
//! and the previous outcome. The latent factor m1 enters both the cluster
//! size model and the outcome, which is what makes cluster size informative
//! and plain GEE biased.
//!
//! Replicates are independent: replicate r runs on stream r of a ChaCha
//! counter-based generator keyed by the scenario seed, so results do not
//! depend on scheduling or worker count.

use crate::data::{build_dataset, design_view, LongitudinalDataset, ObservationRecord};
use crate::dropout::{
    build_weights, expit, fit_dropout, DropoutError, DropoutSpec, WeightScheme,
};
use crate::estimators::{fit_baseline, fit_omni, BaselineKind, EstimatorError};
use crate::inference::{
    confidence_intervals, sandwich_variance, stabilization_default, stabilize_effects,
    EffectSource, InferenceError,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Baseline level of the continuation hazard, expit(HAZARD_OFFSET - alpha0 +
/// x1 - y_prev). Calibrated so that alpha0 = 0.5 truncates roughly 30% of
/// patients and alpha0 = -0.5 roughly 15% under the default outcome scale;
/// raising alpha0 lowers every continuation probability.
pub const HAZARD_OFFSET: f64 = 5.9;

/// Covariate names produced by the generator, in design order.
pub const SIM_COVARIATES: [&str; 5] = ["x1", "x2", "x3", "x4", "x5"];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid config: {field}: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("all {total} replicates failed; kinds: {}", format_failures(.failures))]
    AllReplicatesFailed {
        total: usize,
        failures: BTreeMap<String, usize>,
    },
}

fn format_failures(failures: &BTreeMap<String, usize>) -> String {
    failures
        .iter()
        .map(|(kind, count)| format!("{kind} x{count}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualKind {
    #[default]
    Normal,
    SkewedMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorName {
    #[serde(rename = "OMNI")]
    Omni,
    #[serde(rename = "GEE")]
    Gee,
    #[serde(rename = "WGEE")]
    WGee,
    #[serde(rename = "CWGEE")]
    CWGee,
}

impl EstimatorName {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorName::Omni => "OMNI",
            EstimatorName::Gee => "GEE",
            EstimatorName::WGee => "WGEE",
            EstimatorName::CWGee => "CWGEE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KmeansMode {
    On,
    Off,
    /// Stabilize when the mean cluster size is small (under 15).
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansConfig {
    #[serde(default)]
    pub mode: KmeansMode,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<usize>,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            mode: KmeansMode::Auto,
            k_grid: default_k_grid(),
        }
    }
}

fn default_k_grid() -> Vec<usize> {
    (2..=10).collect()
}

fn default_k_months() -> usize {
    6
}

fn default_true_beta() -> [f64; 5] {
    [1.0, 0.5, -0.5, 0.5, 1.0]
}

fn default_cluster_effect() -> f64 {
    1.0
}

fn default_estimators() -> Vec<EstimatorName> {
    vec![
        EstimatorName::Omni,
        EstimatorName::Gee,
        EstimatorName::WGee,
        EstimatorName::CWGee,
    ]
}

/// One Monte Carlo scenario. The JSON schema mirrors the field names; see
/// docs/config.md.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_hospitals: usize,
    /// Log-linear cluster size model: intercept, hospital score, hospital
    /// flag, latent confounder m1.
    pub gamma: [f64; 4],
    /// Dropout severity shift; larger truncates more patients.
    pub alpha0: f64,
    #[serde(rename = "K", default = "default_k_months")]
    pub k_months: usize,
    #[serde(default)]
    pub residual_kind: ResidualKind,
    /// Within-patient residual correlation; None means corr(e_k, e_l) =
    /// 0.5^|k-l|.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_true_beta")]
    pub true_beta: [f64; 5],
    /// Strength of the confounder in the outcome; 0 switches informative
    /// cluster size off.
    #[serde(default = "default_cluster_effect")]
    pub cluster_effect: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorName>,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    pub n_replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub kmeans: KmeansConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let invalid = |field: &str, message: String| SimulationError::ConfigInvalid {
            field: field.to_string(),
            message,
        };
        if self.n_hospitals == 0 {
            return Err(invalid("n_hospitals", "must be at least 1".into()));
        }
        if self.n_replicates == 0 {
            return Err(invalid("n_replicates", "must be at least 1".into()));
        }
        if self.k_months == 0 {
            return Err(invalid("K", "must be at least 1".into()));
        }
        for (name, values) in [
            ("gamma", &self.gamma[..]),
            ("true_beta", &self.true_beta[..]),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid(name, "entries must be finite".into()));
            }
        }
        if !self.alpha0.is_finite() {
            return Err(invalid("alpha0", "must be finite".into()));
        }
        if !self.cluster_effect.is_finite() {
            return Err(invalid("cluster_effect", "must be finite".into()));
        }
        if self.estimators.is_empty() {
            return Err(invalid("estimators", "must name at least one estimator".into()));
        }
        let mut seen = self.estimators.clone();
        seen.dedup();
        if seen.len() != self.estimators.len()
            || self
                .estimators
                .iter()
                .enumerate()
                .any(|(i, e)| self.estimators[..i].contains(e))
        {
            return Err(invalid("estimators", "estimators listed twice".into()));
        }
        if self.kmeans.k_grid.is_empty() {
            return Err(invalid("kmeans.k_grid", "must be nonempty".into()));
        }
        if let Some(&bad) = self.kmeans.k_grid.iter().find(|&&k| k < 2) {
            return Err(invalid("kmeans.k_grid", format!("entry {bad} is below 2")));
        }
        self.correlation_matrix().map(|_| ())
    }

    /// The residual correlation matrix, validated: symmetric, unit diagonal,
    /// positive definite, K x K.
    fn correlation_matrix(&self) -> Result<DMatrix<f64>, SimulationError> {
        let invalid = |message: String| SimulationError::ConfigInvalid {
            field: "correlation".to_string(),
            message,
        };
        let k = self.k_months;
        let matrix = match &self.correlation {
            None => kms_matrix(k, 0.5),
            Some(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(invalid(format!("must be {k} x {k}")));
                }
                let mut m = DMatrix::zeros(k, k);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        if !v.is_finite() {
                            return Err(invalid("entries must be finite".into()));
                        }
                        m[(i, j)] = v;
                    }
                }
                m
            }
        };
        for i in 0..k {
            if (matrix[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(invalid("diagonal must be 1".into()));
            }
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 {
                    return Err(invalid("must be symmetric".into()));
                }
            }
        }
        if nalgebra::Cholesky::new(matrix.clone()).is_none() {
            return Err(invalid("must be positive definite".into()));
        }
        Ok(matrix)
    }
}

/// corr(e_k, e_l) = rho^|k-l|.
fn kms_matrix(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Scenario with ~60-patient clusters and 30% truncation at alpha0 = 0.5;
/// cluster size is heavily informative through m1.
pub fn dense_scenario(residual_kind: ResidualKind, n_replicates: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_hospitals: 100,
        gamma: [0.85, 0.5, 0.5, 1.0],
        alpha0: 0.5,
        k_months: 6,
        residual_kind,
        correlation: None,
        true_beta: default_true_beta(),
        cluster_effect: 1.0,
        estimators: default_estimators(),
        weight_scheme: WeightScheme::InversePi,
        n_replicates,
        seed,
        kmeans: KmeansConfig::default(),
    }
}

/// Scenario with many small clusters (mean size tuned into [6, 10]), where
/// the hospital effects are noisy and stabilization matters.
pub fn small_cluster_scenario(n_hospitals: usize, n_replicates: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_hospitals,
        gamma: [1.65, 0.3, -0.3, -0.8],
        alpha0: 0.5,
        k_months: 6,
        residual_kind: ResidualKind::Normal,
        correlation: None,
        true_beta: default_true_beta(),
        cluster_effect: 1.0,
        estimators: vec![EstimatorName::Omni],
        weight_scheme: WeightScheme::InversePi,
        n_replicates,
        seed,
        kmeans: KmeansConfig {
            mode: KmeansMode::Auto,
            k_grid: default_k_grid(),
        },
    }
}

/// Per-replicate generator truth, for diagnostics and benchmark tests only;
/// estimators never see it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateTruth {
    pub true_beta: [f64; 5],
    /// cluster_effect * m1 per hospital, canonical order.
    pub hospital_effects: Vec<f64>,
    pub hospital_m1: Vec<f64>,
    pub hospital_m2: Vec<f64>,
    /// True observation probability per design row (canonical order).
    pub observation_probabilities: Vec<f64>,
    /// Continuation model truth: (HAZARD_OFFSET - alpha0, 1, -1) on
    /// (intercept, x1, lagged outcome).
    pub dropout_coefficients: [f64; 3],
    /// Fraction of patients unobserved by the final month.
    pub truncated_fraction: f64,
    pub mean_cluster_size: f64,
}

struct ResidualFactory {
    kind: ResidualKind,
    chol: DMatrix<f64>,
}

impl ResidualFactory {
    fn new(cfg: &ScenarioConfig) -> Result<Self, SimulationError> {
        let matrix = cfg.correlation_matrix()?;
        let chol = nalgebra::Cholesky::new(matrix)
            .expect("validated positive definite")
            .l();
        Ok(ResidualFactory {
            kind: cfg.residual_kind,
            chol,
        })
    }

    /// One correlated residual vector with the configured marginals.
    fn draw(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let k = self.chol.nrows();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let z = DVector::from_fn(k, |_, _| normal.sample(rng));
        let w = &self.chol * z;
        match self.kind {
            ResidualKind::Normal => w.iter().copied().collect(),
            // Gaussian copula: push each correlated normal through its CDF,
            // then through the mixture quantile. Marginals are exact; the
            // correlation carries over approximately.
            ResidualKind::SkewedMixture => w
                .iter()
                .map(|&v| mixture_quantile(standard_normal_cdf(v)))
                .collect(),
        }
    }
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// CDF of the equal mixture of N(0,1) and Gamma(shape 2, scale 1) shifted to
/// mean zero. Mean 0, variance 1.5, right skew.
pub(crate) fn mixture_cdf(x: f64) -> f64 {
    let t = x + 2.0;
    let gamma_part = if t <= 0.0 { 0.0 } else { 1.0 - (-t).exp() * (1.0 + t) };
    0.5 * standard_normal_cdf(x) + 0.5 * gamma_part
}

fn mixture_pdf(x: f64) -> f64 {
    let t = x + 2.0;
    let gamma_part = if t <= 0.0 { 0.0 } else { t * (-t).exp() };
    0.5 * standard_normal_pdf(x) + 0.5 * gamma_part
}

/// Inverse of `mixture_cdf` by safeguarded Newton iteration.
pub(crate) fn mixture_quantile(u: f64) -> f64 {
    let u = u.clamp(1e-16, 1.0 - 1e-16);
    let mut lo = -9.0;
    let mut hi = 45.0;
    let mut x = 0.0;
    for _ in 0..200 {
        let f = mixture_cdf(x) - u;
        if f.abs() < 1e-14 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = mixture_pdf(x);
        let newton = x - f / d;
        x = if d > 1e-300 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-13 {
            break;
        }
    }
    x
}

/// Conditional-on-positive Poisson draw by rejection; the rates used here
/// make rejections rare.
fn zero_truncated_poisson(rng: &mut ChaCha12Rng, rate: f64) -> usize {
    let dist = Poisson::new(rate).expect("positive rate");
    loop {
        let draw: f64 = dist.sample(rng);
        if draw >= 1.0 {
            return draw as usize;
        }
    }
}

pub fn generate_replicate(
    cfg: &ScenarioConfig,
    replicate: u64,
) -> Result<(LongitudinalDataset, ReplicateTruth), SimulationError> {
    cfg.validate()?;
    let factory = ResidualFactory::new(cfg)?;
    Ok(generate_with_factory(cfg, &factory, replicate))
}

/// Draw order per hospital: context (m1, m2, score, flag), cluster size; per
/// patient: time-fixed covariates, residual vector, then per month x1 and x2,
/// then per transition one uniform for the continuation draw. Uniforms are
/// consumed even after death so the stream position never depends on the
/// realized path.
fn generate_with_factory(
    cfg: &ScenarioConfig,
    factory: &ResidualFactory,
    replicate: u64,
) -> (LongitudinalDataset, ReplicateTruth) {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(replicate);
    let k = cfg.k_months;
    let beta = cfg.true_beta;
    let two_draws = Binomial::new(2, 0.5).expect("valid binomial");
    let unit_normal = Normal::new(0.0, 1.0).expect("standard normal");

    let mut records = Vec::new();
    let mut hospital_m1 = Vec::with_capacity(cfg.n_hospitals);
    let mut hospital_m2 = Vec::with_capacity(cfg.n_hospitals);
    let mut hospital_effects = Vec::with_capacity(cfg.n_hospitals);
    let mut pi_rows = Vec::new();
    let mut n_patients = 0usize;
    let mut n_truncated = 0usize;

    for i in 0..cfg.n_hospitals {
        let m1 = two_draws.sample(&mut rng) as f64;
        let m2 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let score = 3.0 + unit_normal.sample(&mut rng);
        let flag = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let rate =
            (cfg.gamma[0] + cfg.gamma[1] * score + cfg.gamma[2] * flag + cfg.gamma[3] * m1).exp();
        let cluster = zero_truncated_poisson(&mut rng, rate);
        hospital_m1.push(m1);
        hospital_m2.push(m2);
        hospital_effects.push(cfg.cluster_effect * m1);
        let hospital_id = format!("h{i:04}");
        let x2_prob = expit(m1 - m2);

        for j in 0..cluster {
            n_patients += 1;
            let patient_id = format!("p{j:04}");
            let x3 = m1 + 0.5 * unit_normal.sample(&mut rng);
            let x4 = 1.0 + unit_normal.sample(&mut rng);
            let x5 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let residuals = factory.draw(&mut rng);

            let mut x1 = vec![0.0; k];
            let mut x2 = vec![0.0; k];
            let mut y = vec![0.0; k];
            for t in 0..k {
                x1[t] = 2.0 + m1 + 0.5 * unit_normal.sample(&mut rng);
                x2[t] = if rng.random::<f64>() < x2_prob { 1.0 } else { 0.0 };
                y[t] = beta[0] * x1[t]
                    + beta[1] * x2[t]
                    + beta[2] * x3
                    + beta[3] * x4
                    + beta[4] * x5
                    + cfg.cluster_effect * m1
                    + residuals[t];
            }

            // Monotone observation: everyone contributes month 1; afterwards
            // the patient continues with probability lambda_t. The true pi is
            // the product of the lambdas along the full simulated path.
            let mut observed = vec![true; k];
            let mut cumulative = 1.0;
            let mut alive = true;
            pi_rows.push(1.0);
            for t in 1..k {
                let lambda = expit(HAZARD_OFFSET - cfg.alpha0 + x1[t] - y[t - 1]);
                cumulative *= lambda;
                pi_rows.push(cumulative);
                let u = rng.random::<f64>();
                if alive {
                    alive = u < lambda;
                }
                observed[t] = alive;
            }
            if !observed[k - 1] {
                n_truncated += 1;
            }

            for t in 0..k {
                records.push(ObservationRecord {
                    hospital_id: hospital_id.clone(),
                    patient_id: patient_id.clone(),
                    month: (t + 1) as u32,
                    observed: observed[t],
                    outcome: observed[t].then(|| y[t]),
                    covariates: vec![x1[t], x2[t], x3, x4, x5],
                });
            }
        }
    }

    let names: Vec<String> = SIM_COVARIATES.iter().map(|s| s.to_string()).collect();
    let dataset =
        build_dataset(records, names, k).expect("generated panels satisfy data-model invariants");
    let truth = ReplicateTruth {
        true_beta: beta,
        hospital_effects,
        hospital_m1,
        hospital_m2,
        observation_probabilities: pi_rows,
        dropout_coefficients: [HAZARD_OFFSET - cfg.alpha0, 1.0, -1.0],
        truncated_fraction: n_truncated as f64 / n_patients as f64,
        mean_cluster_size: n_patients as f64 / cfg.n_hospitals as f64,
    };
    (dataset, truth)
}

/// Dropout model matching the generator: hazard on x1 and the lagged outcome.
pub fn simulation_dropout_spec() -> DropoutSpec {
    DropoutSpec {
        predictors: vec!["x1".to_string()],
        lagged_outcome: true,
        stratify_by_month: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub label: String,
    pub bias100: Vec<f64>,
    pub mcsd100: Vec<f64>,
    /// Mean asymptotic standard error x100; reported for OMNI only.
    pub ase100: Option<Vec<f64>>,
    /// 95% interval coverage in percent; reported for OMNI only.
    pub cp: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub coefficient_names: Vec<String>,
    pub estimators: Vec<EstimatorSummary>,
    pub n_replicates: usize,
    pub n_success: usize,
    pub failures: BTreeMap<String, usize>,
    pub mean_cluster_size: f64,
    pub mean_truncated_fraction: f64,
    /// Mean chosen cluster count over replicates that stabilized.
    pub mean_k_chosen: Option<f64>,
}

struct OmniReplicate {
    coefficients: DVector<f64>,
    ase: Vec<f64>,
    covers: Vec<bool>,
    k_chosen: Option<usize>,
}

struct ReplicateFit {
    omni: Option<OmniReplicate>,
    baselines: Vec<(&'static str, DVector<f64>)>,
    mean_cluster_size: f64,
    truncated_fraction: f64,
}

fn dropout_failure_kind(e: &DropoutError) -> String {
    let kind = match e {
        DropoutError::NoDropoutEvents { .. } => "no dropout events",
        DropoutError::CompleteSeparation { .. } => "complete separation",
        DropoutError::SingularInformation { .. } => "singular information",
        DropoutError::DidNotConverge { .. } => "nonconvergence",
        DropoutError::UnknownPredictor { .. } => "unknown predictor",
        DropoutError::DegeneratePi { .. } => "degenerate probability",
        DropoutError::Io(_) => "io",
    };
    format!("dropout: {kind}")
}

fn estimator_failure_kind(e: &EstimatorError) -> String {
    let kind = match e {
        EstimatorError::RankDeficientDesign { .. } => "rank deficient design",
        EstimatorError::ZeroWeightHospital { .. } => "zero weight hospital",
        EstimatorError::MissingDropoutWeights { .. } => "missing dropout weights",
    };
    format!("estimation: {kind}")
}

fn inference_failure_kind(e: &InferenceError) -> String {
    let kind = match e {
        InferenceError::SingularBread => "singular bread",
        InferenceError::SingularDropoutInformation => "singular dropout information",
        InferenceError::NegativeVarianceDiagonal { .. } => "negative variance diagonal",
        InferenceError::KTooLarge { .. }
        | InferenceError::SingleCluster
        | InferenceError::EmptyGrid
        | InferenceError::InvalidGrid { .. } => "clustering failure",
    };
    format!("inference: {kind}")
}

fn replicate_kmeans_seed(seed: u64, replicate: u64) -> u64 {
    seed ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(13)
}

fn run_replicate(
    cfg: &ScenarioConfig,
    factory: &ResidualFactory,
    replicate: u64,
) -> Result<ReplicateFit, String> {
    let (dataset, truth) = generate_with_factory(cfg, factory, replicate);
    let view = design_view(&dataset, &SIM_COVARIATES).map_err(|e| format!("data: {e}"))?;

    let wants = |e: EstimatorName| cfg.estimators.contains(&e);
    let needs_pi = wants(EstimatorName::Omni)
        || wants(EstimatorName::WGee)
        || wants(EstimatorName::CWGee);
    let dropout_fit = if needs_pi {
        Some(
            fit_dropout(&view, &simulation_dropout_spec())
                .map_err(|e| dropout_failure_kind(&e))?,
        )
    } else {
        None
    };
    let w1 = dropout_fit
        .as_ref()
        .map(|fit| build_weights(&view, fit, WeightScheme::InversePi))
        .transpose()
        .map_err(|e| dropout_failure_kind(&e))?;

    let mut baselines = Vec::new();
    for (name, kind) in [
        (EstimatorName::Gee, BaselineKind::Gee),
        (EstimatorName::WGee, BaselineKind::WGee),
        (EstimatorName::CWGee, BaselineKind::CWGee),
    ] {
        if !wants(name) {
            continue;
        }
        let fit =
            fit_baseline(&view, w1.as_ref(), kind).map_err(|e| estimator_failure_kind(&e))?;
        // Slopes only; the intercept is not a reporting target.
        let slopes = fit.coefficients.rows(1, view.n_covariates()).into_owned();
        baselines.push((kind.label(), slopes));
    }

    let omni = if wants(EstimatorName::Omni) {
        let drop_fit = dropout_fit.as_ref().expect("needs_pi implies dropout fit");
        let weights = match cfg.weight_scheme {
            WeightScheme::InversePi => w1.clone().expect("needs_pi implies weights"),
            WeightScheme::InverseClusterPi => {
                build_weights(&view, drop_fit, WeightScheme::InverseClusterPi)
                    .map_err(|e| dropout_failure_kind(&e))?
            }
        };
        let fit = fit_omni(&view, &weights).map_err(|e| estimator_failure_kind(&e))?;
        let stabilize = match cfg.kmeans.mode {
            KmeansMode::On => true,
            KmeansMode::Off => false,
            KmeansMode::Auto => stabilization_default(view.mean_cluster_size()),
        };
        let (components, k_chosen) = if stabilize {
            let effects: Vec<f64> = fit.hospital_effects.iter().copied().collect();
            let clusters = stabilize_effects(
                &effects,
                &cfg.kmeans.k_grid,
                replicate_kmeans_seed(cfg.seed, replicate),
            )
            .map_err(|e| inference_failure_kind(&e))?;
            let comp = sandwich_variance(
                &view,
                &fit,
                &weights,
                Some(drop_fit),
                EffectSource::Stabilized(&clusters),
            )
            .map_err(|e| inference_failure_kind(&e))?;
            (comp, Some(clusters.k_chosen))
        } else {
            let comp = sandwich_variance(
                &view,
                &fit,
                &weights,
                Some(drop_fit),
                EffectSource::Raw,
            )
            .map_err(|e| inference_failure_kind(&e))?;
            (comp, None)
        };
        let intervals = confidence_intervals(&fit, &components, 0.95);
        let covers = intervals
            .iter()
            .enumerate()
            .map(|(c, ci)| ci.lower <= truth.true_beta[c] && truth.true_beta[c] <= ci.upper)
            .collect();
        Some(OmniReplicate {
            coefficients: fit.coefficients,
            ase: components.ase,
            covers,
            k_chosen,
        })
    } else {
        None
    };

    Ok(ReplicateFit {
        omni,
        baselines,
        mean_cluster_size: truth.mean_cluster_size,
        truncated_fraction: truth.truncated_fraction,
    })
}

pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MonteCarloReport, SimulationError> {
    run_monte_carlo_with_progress(cfg, None)
}

/// Like `run_monte_carlo`, invoking `progress` as each replicate finishes
/// (from worker threads, in completion order).
pub fn run_monte_carlo_with_progress(
    cfg: &ScenarioConfig,
    progress: Option<&(dyn Fn(u64) + Sync)>,
) -> Result<MonteCarloReport, SimulationError> {
    cfg.validate()?;
    let factory = ResidualFactory::new(cfg)?;
    let outcomes: Vec<Result<ReplicateFit, String>> = (0..cfg.n_replicates as u64)
        .into_par_iter()
        .map(|replicate| {
            let out = run_replicate(cfg, &factory, replicate);
            if let Some(hook) = progress {
                hook(replicate);
            }
            out
        })
        .collect();

    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut fits = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(fit) => fits.push(fit),
            Err(kind) => *failures.entry(kind).or_insert(0) += 1,
        }
    }
    if fits.is_empty() {
        return Err(SimulationError::AllReplicatesFailed {
            total: cfg.n_replicates,
            failures,
        });
    }

    let p = SIM_COVARIATES.len();
    let n = fits.len();
    let mut estimators = Vec::new();
    for name in [
        EstimatorName::Omni,
        EstimatorName::Gee,
        EstimatorName::WGee,
        EstimatorName::CWGee,
    ] {
        if !cfg.estimators.contains(&name) {
            continue;
        }
        if name == EstimatorName::Omni {
            let draws: Vec<&OmniReplicate> =
                fits.iter().map(|f| f.omni.as_ref().expect("configured")).collect();
            let (bias100, mcsd100) =
                bias_and_sd(&draws.iter().map(|o| &o.coefficients).collect::<Vec<_>>(), &cfg.true_beta, p);
            let ase100 = (0..p)
                .map(|c| 100.0 * draws.iter().map(|o| o.ase[c]).sum::<f64>() / n as f64)
                .collect();
            let cp = (0..p)
                .map(|c| {
                    100.0 * draws.iter().filter(|o| o.covers[c]).count() as f64 / n as f64
                })
                .collect();
            estimators.push(EstimatorSummary {
                label: "OMNI".to_string(),
                bias100,
                mcsd100,
                ase100: Some(ase100),
                cp: Some(cp),
            });
        } else {
            let label = match name {
                EstimatorName::Gee => "GEE",
                EstimatorName::WGee => "WGEE",
                EstimatorName::CWGee => "CWGEE",
                EstimatorName::Omni => unreachable!(),
            };
            let draws: Vec<&DVector<f64>> = fits
                .iter()
                .map(|f| {
                    &f.baselines
                        .iter()
                        .find(|(l, _)| *l == label)
                        .expect("configured baseline present")
                        .1
                })
                .collect();
            let (bias100, mcsd100) = bias_and_sd(&draws, &cfg.true_beta, p);
            estimators.push(EstimatorSummary {
                label: label.to_string(),
                bias100,
                mcsd100,
                ase100: None,
                cp: None,
            });
        }
    }

    let k_draws: Vec<usize> = fits
        .iter()
        .filter_map(|f| f.omni.as_ref().and_then(|o| o.k_chosen))
        .collect();
    let mean_k_chosen = if k_draws.is_empty() {
        None
    } else {
        Some(k_draws.iter().sum::<usize>() as f64 / k_draws.len() as f64)
    };

    Ok(MonteCarloReport {
        coefficient_names: SIM_COVARIATES.iter().map(|s| s.to_string()).collect(),
        estimators,
        n_replicates: cfg.n_replicates,
        n_success: n,
        failures,
        mean_cluster_size: fits.iter().map(|f| f.mean_cluster_size).sum::<f64>() / n as f64,
        mean_truncated_fraction: fits.iter().map(|f| f.truncated_fraction).sum::<f64>()
            / n as f64,
        mean_k_chosen,
    })
}

fn bias_and_sd(draws: &[&DVector<f64>], truth: &[f64; 5], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = draws.len();
    let mut bias100 = Vec::with_capacity(p);
    let mut mcsd100 = Vec::with_capacity(p);
    for c in 0..p {
        let mean = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
        let ss: f64 = draws.iter().map(|d| (d[c] - mean) * (d[c] - mean)).sum();
        bias100.push(100.0 * (mean - truth[c]));
        mcsd100.push(100.0 * (ss / (n - 1).max(1) as f64).sqrt());
    }
    (bias100, mcsd100)
}

/// Side-by-side coverage of the raw and stabilized variance paths over the
/// same replicates. Point estimates are shared; only the variance changes.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizationComparison {
    pub coefficient_names: Vec<String>,
    pub bias100: Vec<f64>,
    pub mcsd100: Vec<f64>,
    pub ase100_raw: Vec<f64>,
    pub cp_raw: Vec<f64>,
    pub ase100_stabilized: Vec<f64>,
    pub cp_stabilized: Vec<f64>,
    pub mean_k_chosen: f64,
    pub mean_cluster_size: f64,
    pub mean_truncated_fraction: f64,
    pub n_replicates: usize,
    pub n_success: usize,
    pub failures: BTreeMap<String, usize>,
}

struct PairedReplicate {
    coefficients: DVector<f64>,
    ase_raw: Vec<f64>,
    covers_raw: Vec<bool>,
    ase_stabilized: Vec<f64>,
    covers_stabilized: Vec<bool>,
    k_chosen: usize,
    mean_cluster_size: f64,
    truncated_fraction: f64,
}

fn run_paired_replicate(
    cfg: &ScenarioConfig,
    factory: &ResidualFactory,
    replicate: u64,
) -> Result<PairedReplicate, String> {
    let (dataset, truth) = generate_with_factory(cfg, factory, replicate);
    let view = design_view(&dataset, &SIM_COVARIATES).map_err(|e| format!("data: {e}"))?;
    let drop_fit =
        fit_dropout(&view, &simulation_dropout_spec()).map_err(|e| dropout_failure_kind(&e))?;
    let weights = build_weights(&view, &drop_fit, cfg.weight_scheme)
        .map_err(|e| dropout_failure_kind(&e))?;
    let fit = fit_omni(&view, &weights).map_err(|e| estimator_failure_kind(&e))?;

    let effects: Vec<f64> = fit.hospital_effects.iter().copied().collect();
    let clusters = stabilize_effects(
        &effects,
        &cfg.kmeans.k_grid,
        replicate_kmeans_seed(cfg.seed, replicate),
    )
    .map_err(|e| inference_failure_kind(&e))?;

    let comp_raw = sandwich_variance(&view, &fit, &weights, Some(&drop_fit), EffectSource::Raw)
        .map_err(|e| inference_failure_kind(&e))?;
    let comp_stab = sandwich_variance(
        &view,
        &fit,
        &weights,
        Some(&drop_fit),
        EffectSource::Stabilized(&clusters),
    )
    .map_err(|e| inference_failure_kind(&e))?;

    let cover = |comp: &crate::inference::SandwichComponents| {
        confidence_intervals(&fit, comp, 0.95)
            .iter()
            .enumerate()
            .map(|(c, ci)| ci.lower <= truth.true_beta[c] && truth.true_beta[c] <= ci.upper)
            .collect::<Vec<bool>>()
    };
    let covers_raw = cover(&comp_raw);
    let covers_stabilized = cover(&comp_stab);

    Ok(PairedReplicate {
        coefficients: fit.coefficients,
        ase_raw: comp_raw.ase,
        covers_raw,
        ase_stabilized: comp_stab.ase,
        covers_stabilized,
        k_chosen: clusters.k_chosen,
        mean_cluster_size: truth.mean_cluster_size,
        truncated_fraction: truth.truncated_fraction,
    })
}

pub fn table4_experiment(cfg: &ScenarioConfig) -> Result<StabilizationComparison, SimulationError> {
    table4_experiment_with_progress(cfg, None)
}

pub fn table4_experiment_with_progress(
    cfg: &ScenarioConfig,
    progress: Option<&(dyn Fn(u64) + Sync)>,
) -> Result<StabilizationComparison, SimulationError> {
    cfg.validate()?;
    let factory = ResidualFactory::new(cfg)?;
    let outcomes: Vec<Result<PairedReplicate, String>> = (0..cfg.n_replicates as u64)
        .into_par_iter()
        .map(|replicate| {
            let out = run_paired_replicate(cfg, &factory, replicate);
            if let Some(hook) = progress {
                hook(replicate);
            }
            out
        })
        .collect();

    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut fits = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(fit) => fits.push(fit),
            Err(kind) => *failures.entry(kind).or_insert(0) += 1,
        }
    }
    if fits.is_empty() {
        return Err(SimulationError::AllReplicatesFailed {
            total: cfg.n_replicates,
            failures,
        });
    }

    let p = SIM_COVARIATES.len();
    let n = fits.len();
    let coef: Vec<&DVector<f64>> = fits.iter().map(|f| &f.coefficients).collect();
    let (bias100, mcsd100) = bias_and_sd(&coef, &cfg.true_beta, p);
    let mean_of = |get: &dyn Fn(&PairedReplicate, usize) -> f64| -> Vec<f64> {
        (0..p)
            .map(|c| fits.iter().map(|f| get(f, c)).sum::<f64>() / n as f64)
            .collect()
    };
    let ase100_raw = mean_of(&|f, c| 100.0 * f.ase_raw[c]);
    let ase100_stabilized = mean_of(&|f, c| 100.0 * f.ase_stabilized[c]);
    let cp_raw = mean_of(&|f, c| if f.covers_raw[c] { 100.0 } else { 0.0 });
    let cp_stabilized = mean_of(&|f, c| if f.covers_stabilized[c] { 100.0 } else { 0.0 });

    Ok(StabilizationComparison {
        coefficient_names: SIM_COVARIATES.iter().map(|s| s.to_string()).collect(),
        bias100,
        mcsd100,
        ase100_raw,
        cp_raw,
        ase100_stabilized,
        cp_stabilized,
        mean_k_chosen: fits.iter().map(|f| f.k_chosen as f64).sum::<f64>() / n as f64,
        mean_cluster_size: fits.iter().map(|f| f.mean_cluster_size).sum::<f64>() / n as f64,
        mean_truncated_fraction: fits.iter().map(|f| f.truncated_fraction).sum::<f64>()
            / n as f64,
        n_replicates: cfg.n_replicates,
        n_success: n,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::weights_from_probabilities;

    fn tiny(n_hospitals: usize, n_replicates: usize, seed: u64) -> ScenarioConfig {
        let mut cfg = dense_scenario(ResidualKind::Normal, n_replicates, seed);
        cfg.n_hospitals = n_hospitals;
        cfg
    }

    #[test]
    fn truncation_windows_by_severity() {
        for (alpha0, lo, hi) in [(0.5, 0.25, 0.35), (-0.5, 0.10, 0.20)] {
            let mut cfg = dense_scenario(ResidualKind::Normal, 1, 41);
            cfg.alpha0 = alpha0;
            let factory = ResidualFactory::new(&cfg).unwrap();
            let mut total = 0.0;
            for rep in 0..15 {
                let (_, truth) = generate_with_factory(&cfg, &factory, rep);
                total += truth.truncated_fraction;
            }
            let mean = total / 15.0;
            assert!(
                (lo..=hi).contains(&mean),
                "alpha0 {alpha0}: truncated fraction {mean}"
            );
        }
    }

    #[test]
    fn dense_cluster_size_window() {
        let mut cfg = dense_scenario(ResidualKind::Normal, 1, 7);
        cfg.n_hospitals = 200;
        let (_, truth) = generate_replicate(&cfg, 0).unwrap();
        assert!(
            (54.0..=66.0).contains(&truth.mean_cluster_size),
            "mean cluster {}",
            truth.mean_cluster_size
        );
    }

    #[test]
    fn small_cluster_size_window() {
        let cfg = small_cluster_scenario(500, 1, 13);
        let factory = ResidualFactory::new(&cfg).unwrap();
        let mut total = 0.0;
        for rep in 0..5 {
            let (_, truth) = generate_with_factory(&cfg, &factory, rep);
            total += truth.mean_cluster_size;
        }
        let mean = total / 5.0;
        assert!((6.0..=10.0).contains(&mean), "mean cluster {mean}");
    }

    #[test]
    fn hospital_effects_track_the_confounder() {
        let mut cfg = tiny(30, 1, 3);
        let (_, truth) = generate_replicate(&cfg, 2).unwrap();
        for (effect, m1) in truth.hospital_effects.iter().zip(&truth.hospital_m1) {
            assert_eq!(effect, m1);
            assert!([0.0, 1.0, 2.0].contains(m1));
        }
        cfg.cluster_effect = 0.0;
        let (_, flat) = generate_replicate(&cfg, 2).unwrap();
        assert!(flat.hospital_effects.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn generation_is_deterministic_per_stream() {
        let cfg = tiny(8, 1, 99);
        let (ds_a, truth_a) = generate_replicate(&cfg, 4).unwrap();
        let (ds_b, truth_b) = generate_replicate(&cfg, 4).unwrap();
        assert_eq!(ds_a.to_records(), ds_b.to_records());
        assert_eq!(truth_a, truth_b);
        let (ds_c, _) = generate_replicate(&cfg, 5).unwrap();
        assert_ne!(ds_a.to_records(), ds_c.to_records());
    }

    #[test]
    fn cluster_sizes_match_the_log_linear_rate() {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        // Large rate: truncation at zero is negligible, so the mean is the
        // rate itself.
        let rate = (0.85f64 + 0.5 * 3.0 + 0.5 * 1.0).exp();
        let mut total = 0usize;
        for _ in 0..100_000 {
            total += zero_truncated_poisson(&mut rng, rate);
        }
        let mean = total as f64 / 100_000.0;
        assert!(
            (mean / rate - 1.0).abs() < 0.02,
            "mean {mean} vs rate {rate}"
        );

        // Small rate: compare against the exact truncated mean.
        let small = 0.8f64;
        let expected = small / (1.0 - (-small).exp());
        let mut total = 0usize;
        for _ in 0..100_000 {
            total += zero_truncated_poisson(&mut rng, small);
        }
        let mean = total as f64 / 100_000.0;
        assert!(
            (mean / expected - 1.0).abs() < 0.02,
            "mean {mean} vs expected {expected}"
        );
    }

    #[test]
    fn observed_mass_is_recovered_by_inverse_probability() {
        // Horvitz-Thompson identity per month: sum of 1/pi over patients
        // still observed estimates the full count.
        let mut cfg = dense_scenario(ResidualKind::Normal, 1, 23);
        cfg.n_hospitals = 400;
        let (ds, truth) = generate_replicate(&cfg, 0).unwrap();
        let view = design_view(&ds, &SIM_COVARIATES).unwrap();
        let n_patients = view.n_patients() as f64;
        assert!(n_patients > 20_000.0);
        for month in 1..cfg.k_months {
            let mut ht = 0.0;
            for row in 0..view.n_rows() {
                if view.month_of_row[row] == month && view.observed[row] {
                    ht += 1.0 / truth.observation_probabilities[row];
                }
            }
            assert!(
                (ht / n_patients - 1.0).abs() < 0.03,
                "month {month}: HT {ht} vs {n_patients}"
            );
        }
    }

    #[test]
    fn mixture_quantile_inverts_the_cdf() {
        let mut u = 1e-6;
        let mut last = f64::NEG_INFINITY;
        while u < 1.0 {
            let x = mixture_quantile(u);
            assert!((mixture_cdf(x) - u).abs() < 1e-10, "u {u}");
            assert!(x >= last);
            last = x;
            u += 0.007;
        }
    }

    #[test]
    fn mixture_moments_and_skew() {
        use rand::SeedableRng;
        let cfg = ScenarioConfig {
            k_months: 1,
            residual_kind: ResidualKind::SkewedMixture,
            ..tiny(1, 1, 0)
        };
        let factory = ResidualFactory::new(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| factory.draw(&mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let m3 = draws
            .iter()
            .map(|d| (d - mean) * (d - mean) * (d - mean))
            .sum::<f64>()
            / n as f64;
        let skew = m3 / var.powf(1.5);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.5).abs() < 0.06, "variance {var}");
        assert!((0.8..=1.4).contains(&skew), "skewness {skew}");
    }

    #[test]
    fn residual_correlation_follows_the_matrix() {
        use rand::SeedableRng;
        let corr = |draws: &[Vec<f64>], a: usize, b: usize| {
            let n = draws.len() as f64;
            let ma = draws.iter().map(|d| d[a]).sum::<f64>() / n;
            let mb = draws.iter().map(|d| d[b]).sum::<f64>() / n;
            let mut cab = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for d in draws {
                cab += (d[a] - ma) * (d[b] - mb);
                va += (d[a] - ma) * (d[a] - ma);
                vb += (d[b] - mb) * (d[b] - mb);
            }
            cab / (va * vb).sqrt()
        };

        let cfg = tiny(1, 1, 0);
        let factory = ResidualFactory::new(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| factory.draw(&mut rng)).collect();
        assert!((corr(&draws, 0, 1) - 0.5).abs() < 0.02);
        assert!((corr(&draws, 0, 2) - 0.25).abs() < 0.02);

        let skew_cfg = ScenarioConfig {
            residual_kind: ResidualKind::SkewedMixture,
            ..tiny(1, 1, 0)
        };
        let factory = ResidualFactory::new(&skew_cfg).unwrap();
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| factory.draw(&mut rng)).collect();
        let lag1 = corr(&draws, 0, 1);
        assert!((0.40..=0.55).contains(&lag1), "copula lag-1 {lag1}");
    }

    #[test]
    fn no_confounding_scenario_is_unbiased() {
        // Cut both links: cluster size no longer depends on m1 and m1 leaves
        // the outcome. The raised intercept keeps the patient count (and so
        // the Monte Carlo precision) at the dense-scenario level.
        //
        // The profiled estimator must be clean. The weighted baselines keep
        // a small residual dropout effect here: observation-level weights
        // only make the estimating equation exactly unbiased when the
        // working correlation is diagonal, and ours is exchangeable, so
        // future observation indicators correlate with the current residual
        // through the lagged-outcome hazard. That effect is around one on
        // the x100 scale, an order of magnitude below the confounding bias
        // the baselines are there to exhibit, and it is bounded rather than
        // asserted away.
        let mut cfg = dense_scenario(ResidualKind::Normal, 150, 61);
        cfg.gamma = [2.1, 0.5, 0.5, 0.0];
        cfg.cluster_effect = 0.0;
        cfg.estimators = vec![
            EstimatorName::Omni,
            EstimatorName::WGee,
            EstimatorName::CWGee,
        ];
        let report = run_monte_carlo(&cfg).unwrap();
        for est in &report.estimators {
            let bound = if est.label == "OMNI" { 0.5 } else { 2.0 };
            for (c, bias) in est.bias100.iter().enumerate() {
                assert!(
                    bias.abs() <= bound,
                    "{} x{}: bias100 {bias} (bound {bound})",
                    est.label,
                    c + 1
                );
            }
        }

        // Plain GEE needs dropout switched off as well, and with no dropout
        // the weighting subtlety disappears.
        cfg.alpha0 = -30.0;
        cfg.estimators = vec![EstimatorName::Gee];
        let report = run_monte_carlo(&cfg).unwrap();
        let gee = &report.estimators[0];
        assert!(report.mean_truncated_fraction == 0.0);
        for (c, bias) in gee.bias100.iter().enumerate() {
            assert!(bias.abs() <= 0.5, "GEE x{}: bias100 {bias}", c + 1);
        }
    }

    #[test]
    fn oracle_weights_remove_dropout_bias() {
        // Fitting with the generator's true probabilities isolates the
        // estimator from weight estimation error.
        let cfg = dense_scenario(ResidualKind::Normal, 1, 83);
        let factory = ResidualFactory::new(&cfg).unwrap();
        let reps = 60;
        let mut sums = [0.0; 5];
        for rep in 0..reps {
            let (ds, truth) = generate_with_factory(&cfg, &factory, rep);
            let view = design_view(&ds, &SIM_COVARIATES).unwrap();
            let weights = weights_from_probabilities(
                &view,
                &truth.observation_probabilities,
                WeightScheme::InversePi,
            )
            .unwrap();
            let fit = fit_omni(&view, &weights).unwrap();
            for c in 0..5 {
                sums[c] += fit.coefficients[c];
            }
        }
        for c in 0..5 {
            let bias100 = 100.0 * (sums[c] / reps as f64 - cfg.true_beta[c]);
            assert!(bias100.abs() <= 0.5, "x{}: bias100 {bias100}", c + 1);
        }
    }

    #[test]
    fn monte_carlo_is_thread_count_invariant() {
        let mut cfg = tiny(20, 6, 77);
        cfg.kmeans.mode = KmeansMode::On;
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&cfg).unwrap());
        let double = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&cfg).unwrap());
        assert_eq!(single, double);
        let again = run_monte_carlo(&cfg).unwrap();
        assert_eq!(single, again);
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        // One-hospital scenario with one or two patients per replicate:
        // dropout fits fail often, and the bookkeeping must balance.
        let mut cfg = tiny(1, 40, 19);
        cfg.gamma = [-1.5, 0.0, 0.0, 0.0];
        cfg.estimators = vec![EstimatorName::Omni];
        match run_monte_carlo(&cfg) {
            Ok(report) => {
                let failed: usize = report.failures.values().sum();
                assert_eq!(report.n_success + failed, cfg.n_replicates);
                assert!(!report.failures.is_empty(), "expected some failures");
            }
            Err(SimulationError::AllReplicatesFailed { total, failures }) => {
                assert_eq!(total, cfg.n_replicates);
                assert_eq!(failures.values().sum::<usize>(), cfg.n_replicates);
            }
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn paired_stabilization_report_smoke() {
        let cfg = small_cluster_scenario(80, 10, 29);
        let report = table4_experiment(&cfg).unwrap();
        assert_eq!(report.coefficient_names.len(), 5);
        assert_eq!(report.n_success + report.failures.values().sum::<usize>(), 10);
        assert!(report.mean_k_chosen >= 1.0);
        assert!((4.0..=10.0).contains(&report.mean_cluster_size));
        for c in 0..5 {
            assert!(report.cp_raw[c] >= 0.0 && report.cp_raw[c] <= 100.0);
            assert!(report.ase100_stabilized[c] > 0.0);
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let parsed: ScenarioConfig = serde_json::from_str(
            r#"{"n_hospitals": 4, "gamma": [0.85, 0.5, 0.5, 1.0], "alpha0": 0.5,
                "n_replicates": 2, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(parsed.k_months, 6);
        assert_eq!(parsed.residual_kind, ResidualKind::Normal);
        assert_eq!(parsed.true_beta, [1.0, 0.5, -0.5, 0.5, 1.0]);
        assert_eq!(parsed.cluster_effect, 1.0);
        assert_eq!(parsed.estimators.len(), 4);
        assert_eq!(parsed.weight_scheme, WeightScheme::InversePi);
        assert_eq!(parsed.kmeans.mode, KmeansMode::Auto);
        assert_eq!(parsed.kmeans.k_grid, (2..=10).collect::<Vec<_>>());
        parsed.validate().unwrap();

        let missing = serde_json::from_str::<ScenarioConfig>(
            r#"{"n_hospitals": 4, "alpha0": 0.5, "n_replicates": 2, "seed": 9}"#,
        )
        .unwrap_err();
        assert!(missing.to_string().contains("gamma"));

        let unknown = serde_json::from_str::<ScenarioConfig>(
            r#"{"n_hospitals": 4, "gamma": [0.85, 0.5, 0.5, 1.0], "alpha0": 0.5,
                "n_replicates": 2, "seed": 9, "gama": 1}"#,
        )
        .unwrap_err();
        assert!(unknown.to_string().contains("gama"));

        let mut bad = parsed.clone();
        bad.k_months = 0;
        assert!(matches!(
            bad.validate(),
            Err(SimulationError::ConfigInvalid { ref field, .. }) if field == "K"
        ));

        let mut bad = parsed.clone();
        bad.correlation = Some(vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert!(matches!(
            bad.validate(),
            Err(SimulationError::ConfigInvalid { ref field, .. }) if field == "correlation"
        ));

        let mut bad = parsed.clone();
        bad.correlation = Some(vec![vec![1.0; 6]; 6]);
        assert!(bad.validate().is_err(), "singular matrix must be rejected");

        let mut bad = parsed.clone();
        bad.estimators = vec![];
        assert!(bad.validate().is_err());

        let mut bad = parsed.clone();
        bad.estimators = vec![EstimatorName::Gee, EstimatorName::Gee];
        assert!(bad.validate().is_err());

        let mut bad = parsed.clone();
        bad.kmeans.k_grid = vec![1, 2];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dropout_truth_matches_severity() {
        let mut cfg = tiny(5, 1, 1);
        cfg.alpha0 = 0.5;
        let (_, truth) = generate_replicate(&cfg, 0).unwrap();
        assert_eq!(truth.dropout_coefficients, [HAZARD_OFFSET - 0.5, 1.0, -1.0]);
    }
}

//! Discrete-time dropout hazard and inverse-probability-of-observation weights.
//!
//! The hazard is the probability of remaining observed at month k given
//! observation at k-1, modeled as pooled logistic regression over at-risk
//! person-months (baseline is always observed, so months 2..K contribute).
//! Cumulative products of fitted hazards give the observation probabilities
//! pi used to weight observed records by 1/pi.

use crate::data::DesignView;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Predictor layout for the hazard model. The intercept is always included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// Names of current-month covariates entering the linear predictor.
    #[serde(default)]
    pub predictors: Vec<String>,
    /// Include the previous month's outcome as a predictor.
    #[serde(default = "default_true")]
    pub lagged_outcome: bool,
    /// Fit a separate coefficient vector per month instead of pooling.
    #[serde(default)]
    pub stratify_by_month: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DropoutSpec {
    fn default() -> Self {
        DropoutSpec {
            predictors: Vec::new(),
            lagged_outcome: true,
            stratify_by_month: false,
        }
    }
}

/// Lack-of-fit summary of the fitted hazard model.
#[derive(Debug, Clone)]
pub struct HazardFitStats {
    pub deviance: f64,
    pub pearson: f64,
    pub df: usize,
    /// Upper-tail chi-square p-values; None when df = 0.
    pub deviance_p: Option<f64>,
    pub pearson_p: Option<f64>,
}

/// Fitted hazard model with the by-products needed for variance correction.
#[derive(Debug, Clone)]
pub struct DropoutModelFit {
    pub spec: DropoutSpec,
    pub coefficient_names: Vec<String>,
    /// Stacked per-month blocks when stratified, a single block otherwise.
    pub coefficients: DVector<f64>,
    /// Observed information at the optimum (block diagonal when stratified).
    pub information: DMatrix<f64>,
    /// Per-patient summed score contributions at the optimum, n_patients x q.
    pub patient_scores: DMatrix<f64>,
    /// Per row; 1.0 at baseline and wherever the row is not modeled.
    pub hazards: Vec<f64>,
    /// Cumulative products per patient; pi = 1 at baseline.
    pub observation_probabilities: Vec<f64>,
    pub n_at_risk: usize,
    pub n_events: usize,
    pub iterations: usize,
    pub fit_stats: HazardFitStats,
}

#[derive(Debug, Error)]
pub enum DropoutError {
    #[error("no dropout events among {n_at_risk} at-risk records{}", month_tag(.month))]
    NoDropoutEvents { n_at_risk: usize, month: Option<usize> },
    #[error("complete separation suspected: |coefficient| exceeded {limit} with max |score| {score:.3e}")]
    CompleteSeparation { limit: f64, score: f64 },
    #[error("singular information matrix at iteration {iteration}")]
    SingularInformation { iteration: usize },
    #[error("hazard fit did not converge in {iterations} iterations (max |score| {score:.3e})")]
    DidNotConverge { iterations: usize, score: f64 },
    #[error("unknown hazard predictor {name}")]
    UnknownPredictor { name: String },
    #[error(
        "observation probability {pi:.3e} below floor 1e-6 for observed record \
         (hospital {hospital}, patient {patient}, month {month}); positivity violated"
    )]
    DegeneratePi {
        hospital: String,
        patient: String,
        month: usize,
        pi: f64,
    },
    #[error("weight output: {0}")]
    Io(#[from] std::io::Error),
}

fn month_tag(month: &Option<usize>) -> String {
    match month {
        Some(m) => format!(" (month {m})"),
        None => String::new(),
    }
}

/// Inverse-probability weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WeightScheme {
    /// w = R / pi.
    #[default]
    #[serde(rename = "W1")]
    InversePi,
    /// w = R / (n_i * pi), adding inverse cluster size.
    #[serde(rename = "W2")]
    InverseClusterPi,
}

/// Per-record nonnegative estimation weights; exactly 0 on unobserved rows.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub scheme: WeightScheme,
    pub values: Vec<f64>,
}

pub(crate) fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const COEF_TOL: f64 = 1e-10;
const SEPARATION_LIMIT: f64 = 30.0;
const PI_FLOOR: f64 = 1e-6;

/// One at-risk person-month: predictor vector, response, owning patient.
struct AtRiskRecord {
    x: Vec<f64>,
    continued: bool,
    patient: usize,
}

struct PredictorLayout {
    columns: Vec<usize>,
    names: Vec<String>,
}

fn predictor_layout(view: &DesignView, spec: &DropoutSpec) -> Result<PredictorLayout, DropoutError> {
    let mut columns = Vec::with_capacity(spec.predictors.len());
    for name in &spec.predictors {
        let idx = view
            .covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DropoutError::UnknownPredictor { name: name.clone() })?;
        columns.push(idx);
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(spec.predictors.iter().cloned());
    if spec.lagged_outcome {
        names.push("lag_y".to_string());
    }
    Ok(PredictorLayout { columns, names })
}

/// Predictor vector for the transition into `row`: intercept, current-month
/// covariates, and the lagged outcome (forward-filled with the last observed
/// value so that post-death hazards stay well defined for diagnostics).
fn predictor_at(view: &DesignView, layout: &PredictorLayout, spec: &DropoutSpec, row: usize, lag_y: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(layout.names.len());
    x.push(1.0);
    for &c in &layout.columns {
        x.push(view.x[(row, c)]);
    }
    if spec.lagged_outcome {
        x.push(lag_y);
    }
    x
}

/// At-risk records for one month (1-based at-risk months are 2..=K), or for
/// all months pooled when `month` is None.
fn collect_at_risk(
    view: &DesignView,
    layout: &PredictorLayout,
    spec: &DropoutSpec,
    month: Option<usize>,
) -> Vec<AtRiskRecord> {
    let mut out = Vec::new();
    for patient in 0..view.n_patients() {
        let rows = view.patient_rows(patient);
        let mut lag_y = view.y[rows.start];
        for k in 1..view.k_months {
            let row = rows.start + k;
            if !view.observed[row - 1] {
                break;
            }
            if month.is_none() || month == Some(k) {
                out.push(AtRiskRecord {
                    x: predictor_at(view, layout, spec, row, lag_y),
                    continued: view.observed[row],
                    patient,
                });
            }
            if view.observed[row] {
                lag_y = view.y[row];
            }
        }
    }
    out
}

struct BlockFit {
    alpha: DVector<f64>,
    information: DMatrix<f64>,
    iterations: usize,
}

/// Newton-Raphson on the pooled Bernoulli likelihood. The observed and
/// expected information coincide for the canonical logit link.
fn newton_logistic(records: &[AtRiskRecord], month: Option<usize>) -> Result<BlockFit, DropoutError> {
    let n = records.len();
    let n_events = records.iter().filter(|r| !r.continued).count();
    if n == 0 || n_events == 0 {
        return Err(DropoutError::NoDropoutEvents { n_at_risk: n, month });
    }
    let q = records[0].x.len();
    let mut alpha = DVector::zeros(q);
    let mut iterations = 0;
    let mut last_score = f64::INFINITY;

    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        let mut score = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        for rec in records {
            let eta: f64 = rec.x.iter().zip(alpha.iter()).map(|(x, a)| x * a).sum();
            let mu = expit(eta);
            let resid = (rec.continued as u8 as f64) - mu;
            let v = mu * (1.0 - mu);
            for a in 0..q {
                score[a] += rec.x[a] * resid;
                for b in a..q {
                    info[(a, b)] += rec.x[a] * rec.x[b] * v;
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }

        let max_score = score.amax();
        last_score = max_score;
        if max_score < SCORE_TOL {
            return Ok(BlockFit { alpha, information: info, iterations });
        }
        let chol = Cholesky::new(info.clone())
            .ok_or(DropoutError::SingularInformation { iteration: iterations })?;
        let step = chol.solve(&score);
        let rel = step.amax() / (1.0 + alpha.amax());
        alpha += step;
        if alpha.amax() > SEPARATION_LIMIT {
            return Err(DropoutError::CompleteSeparation {
                limit: SEPARATION_LIMIT,
                score: max_score,
            });
        }
        if rel < COEF_TOL {
            return Ok(BlockFit { alpha, information: info, iterations });
        }
    }

    Err(DropoutError::DidNotConverge { iterations, score: last_score })
}

/// Fit the dropout hazard by maximum likelihood over at-risk person-months.
pub fn fit_dropout(view: &DesignView, spec: &DropoutSpec) -> Result<DropoutModelFit, DropoutError> {
    let layout = predictor_layout(view, spec)?;
    let q_block = layout.names.len();

    let (blocks, coefficient_names) = if spec.stratify_by_month {
        let mut blocks = Vec::new();
        let mut names = Vec::new();
        for k in 1..view.k_months {
            let records = collect_at_risk(view, &layout, spec, Some(k));
            blocks.push((Some(k), records));
            for n in &layout.names {
                names.push(format!("month{}:{}", k + 1, n));
            }
        }
        if blocks.is_empty() {
            return Err(DropoutError::NoDropoutEvents { n_at_risk: 0, month: None });
        }
        (blocks, names)
    } else {
        let records = collect_at_risk(view, &layout, spec, None);
        (vec![(None, records)], layout.names.clone())
    };

    let n_blocks = blocks.len();
    let q = q_block * n_blocks;
    let mut coefficients = DVector::zeros(q);
    let mut information = DMatrix::zeros(q, q);
    let mut iterations = 0;
    let mut n_at_risk = 0;
    let mut n_events = 0;
    let mut patient_scores = DMatrix::zeros(view.n_patients(), q);
    let mut deviance = 0.0;
    let mut pearson = 0.0;

    let mut block_alphas: Vec<DVector<f64>> = Vec::with_capacity(n_blocks);
    for (bi, (month, records)) in blocks.iter().enumerate() {
        let month_1based = month.map(|k| k + 1);
        let fit = newton_logistic(records, month_1based)?;
        let off = bi * q_block;
        for a in 0..q_block {
            coefficients[off + a] = fit.alpha[a];
            for b in 0..q_block {
                information[(off + a, off + b)] = fit.information[(a, b)];
            }
        }
        iterations = iterations.max(fit.iterations);
        n_at_risk += records.len();
        n_events += records.iter().filter(|r| !r.continued).count();

        for rec in records {
            let eta: f64 = rec.x.iter().zip(fit.alpha.iter()).map(|(x, a)| x * a).sum();
            let mu = expit(eta);
            let r = rec.continued as u8 as f64;
            for a in 0..q_block {
                patient_scores[(rec.patient, off + a)] += rec.x[a] * (r - mu);
            }
            deviance -= 2.0 * if rec.continued { mu.ln() } else { (1.0 - mu).ln() };
            pearson += (r - mu).powi(2) / (mu * (1.0 - mu));
        }
        block_alphas.push(fit.alpha);
    }

    let df = n_at_risk.saturating_sub(q);
    let fit_stats = HazardFitStats {
        deviance,
        pearson,
        df,
        deviance_p: chi_square_upper_tail(deviance, df),
        pearson_p: chi_square_upper_tail(pearson, df),
    };

    // Hazards and cumulative probabilities for every row, including post-death
    // rows (diagnostics only; those rows carry weight 0 regardless).
    let n_rows = view.n_rows();
    let mut hazards = vec![1.0; n_rows];
    let mut observation_probabilities = vec![1.0; n_rows];
    for patient in 0..view.n_patients() {
        let rows = view.patient_rows(patient);
        let mut lag_y = view.y[rows.start];
        let mut pi = 1.0;
        for k in 1..view.k_months {
            let row = rows.start + k;
            let alpha = if spec.stratify_by_month {
                &block_alphas[k - 1]
            } else {
                &block_alphas[0]
            };
            let x = predictor_at(view, &layout, spec, row, lag_y);
            let eta: f64 = x.iter().zip(alpha.iter()).map(|(xv, a)| xv * a).sum();
            let lambda = expit(eta);
            pi *= lambda;
            hazards[row] = lambda;
            observation_probabilities[row] = pi;
            if view.observed[row] {
                lag_y = view.y[row];
            }
        }
    }

    Ok(DropoutModelFit {
        spec: spec.clone(),
        coefficient_names,
        coefficients,
        information,
        patient_scores,
        hazards,
        observation_probabilities,
        n_at_risk,
        n_events,
        iterations,
        fit_stats,
    })
}

fn chi_square_upper_tail(stat: f64, df: usize) -> Option<f64> {
    if df == 0 || !stat.is_finite() {
        return None;
    }
    let dist = ChiSquared::new(df as f64).ok()?;
    Some(1.0 - dist.cdf(stat))
}

/// Build W1 or W2 weights from fitted observation probabilities.
pub fn build_weights(
    view: &DesignView,
    fit: &DropoutModelFit,
    scheme: WeightScheme,
) -> Result<WeightVector, DropoutError> {
    weights_from_probabilities(view, &fit.observation_probabilities, scheme)
}

/// Same as `build_weights` but from an explicit probability table (used with
/// generator-truth probabilities in benchmarks).
pub fn weights_from_probabilities(
    view: &DesignView,
    pi: &[f64],
    scheme: WeightScheme,
) -> Result<WeightVector, DropoutError> {
    assert_eq!(pi.len(), view.n_rows(), "probability table length mismatch");
    let mut values = vec![0.0; view.n_rows()];
    for row in 0..view.n_rows() {
        if !view.observed[row] {
            continue;
        }
        let p = pi[row];
        if p < PI_FLOOR {
            let patient = view.patient_of_row[row];
            return Err(DropoutError::DegeneratePi {
                hospital: view.hospital_ids[view.hospital_of_row[row]].clone(),
                patient: view.patient_ids[patient].clone(),
                month: view.month_of_row[row] + 1,
                pi: p,
            });
        }
        let base = 1.0 / p;
        values[row] = match scheme {
            WeightScheme::InversePi => base,
            WeightScheme::InverseClusterPi => {
                base / view.cluster_sizes[view.hospital_of_row[row]] as f64
            }
        };
    }
    Ok(WeightVector { scheme, values })
}

/// Per-record diagnostic table: hazard, cumulative probability, weight.
pub fn write_hazard_diagnostics(
    view: &DesignView,
    fit: &DropoutModelFit,
    weights: &WeightVector,
    path: &Path,
) -> Result<(), DropoutError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "hospital_id,patient_id,month,lambda,pi,weight")?;
    for row in 0..view.n_rows() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            view.hospital_ids[view.hospital_of_row[row]],
            view.patient_ids[view.patient_of_row[row]],
            view.month_of_row[row] + 1,
            fit.hazards[row],
            fit.observation_probabilities[row],
            weights.values[row],
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, design_view, ObservationRecord};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rec(
        hospital: &str,
        patient: &str,
        month: u32,
        observed: bool,
        outcome: Option<f64>,
        covs: &[f64],
    ) -> ObservationRecord {
        ObservationRecord {
            hospital_id: hospital.to_string(),
            patient_id: patient.to_string(),
            month,
            observed,
            outcome,
            covariates: covs.to_vec(),
        }
    }

    /// Panel of two-month patients: `n_continue` stay observed, `n_drop` drop
    /// at month 2.
    fn two_month_panel(n_continue: usize, n_drop: usize) -> crate::data::LongitudinalDataset {
        let mut records = Vec::new();
        for j in 0..(n_continue + n_drop) {
            let id = format!("p{j:03}");
            let stays = j < n_continue;
            records.push(rec("h1", &id, 1, true, Some(0.0), &[0.0]));
            records.push(rec(
                "h1",
                &id,
                2,
                stays,
                stays.then_some(0.0),
                &[0.0],
            ));
        }
        build_dataset(records, vec!["x1".to_string()], 2).unwrap()
    }

    #[test]
    fn intercept_only_matches_logit_of_rate() {
        // Closed form: intercept-only logistic MLE is logit(continue rate).
        let ds = two_month_panel(6, 2);
        let view = design_view(&ds, &["x1"]).unwrap();
        let spec = DropoutSpec {
            predictors: vec![],
            lagged_outcome: false,
            stratify_by_month: false,
        };
        let fit = fit_dropout(&view, &spec).unwrap();
        assert_eq!(fit.n_at_risk, 8);
        assert_eq!(fit.n_events, 2);
        let expected = (0.75f64 / 0.25).ln();
        assert!((fit.coefficients[0] - expected).abs() < 1e-8);
        // Hazard at month 2 equals the continue rate; pi = 1 * hazard.
        let row = view.patient_rows(0).start + 1;
        assert!((fit.hazards[row] - 0.75).abs() < 1e-8);
        assert!((fit.observation_probabilities[row] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn cumulative_probabilities_multiply_hazards() {
        // Fit anything valid, then verify pi is the running product of lambda.
        let mut records = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for j in 0..200 {
            let id = format!("p{j:03}");
            let mut alive = true;
            for k in 1..=4u32 {
                if alive && k > 1 && rng.random::<f64>() < 0.25 {
                    alive = false;
                }
                let y = alive.then(|| rng.random::<f64>());
                records.push(rec("h1", &id, k, alive, y, &[rng.random::<f64>()]));
            }
        }
        let ds = build_dataset(records, vec!["x1".to_string()], 4).unwrap();
        let view = design_view(&ds, &["x1"]).unwrap();
        let fit = fit_dropout(&view, &DropoutSpec::default()).unwrap();
        for pt in 0..view.n_patients() {
            let rows = view.patient_rows(pt);
            let mut prod = 1.0;
            assert_eq!(fit.observation_probabilities[rows.start], 1.0);
            for k in 1..view.k_months {
                let row = rows.start + k;
                prod *= fit.hazards[row];
                let pi = fit.observation_probabilities[row];
                assert!((pi - prod).abs() < 1e-12);
                assert!(pi > 0.0 && pi <= 1.0);
                assert!(pi <= fit.observation_probabilities[row - 1] + 1e-15);
            }
        }
    }

    #[test]
    fn recovers_known_hazard_coefficients() {
        // Generate at-risk transitions from a known logistic law and check
        // estimate against truth within 3 standard errors from the fitted
        // information, plus the stationarity invariant.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let truth = [0.3, 1.0, -1.0];
        let n = 50_000;
        let mut records = Vec::new();
        for j in 0..n {
            let id = format!("p{j:05}");
            let y1: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let x2: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let eta = truth[0] + truth[1] * x2 - truth[2].abs() * y1;
            let stays = rng.random::<f64>() < expit(eta);
            records.push(rec("h1", &id, 1, true, Some(y1), &[0.0]));
            records.push(rec("h1", &id, 2, stays, stays.then_some(0.0), &[x2]));
        }
        let ds = build_dataset(records, vec!["x1".to_string()], 2).unwrap();
        let view = design_view(&ds, &["x1"]).unwrap();
        let spec = DropoutSpec {
            predictors: vec!["x1".to_string()],
            lagged_outcome: true,
            stratify_by_month: false,
        };
        let fit = fit_dropout(&view, &spec).unwrap();
        assert_eq!(fit.coefficient_names, vec!["intercept", "x1", "lag_y"]);

        let cov = fit.information.clone().try_inverse().unwrap();
        for (i, t) in truth.iter().enumerate() {
            let se = cov[(i, i)].sqrt();
            assert!(
                (fit.coefficients[i] - t).abs() < 3.0 * se,
                "coefficient {i}: {} vs {t} (se {se})",
                fit.coefficients[i]
            );
        }

        // Score at the optimum vanishes.
        let mut score = [0.0f64; 3];
        for pt in 0..view.n_patients() {
            for a in 0..3 {
                score[a] += fit.patient_scores[(pt, a)];
            }
        }
        for s in score {
            assert!(s.abs() < 1e-6);
        }
        assert!(fit.fit_stats.deviance.is_finite());
        assert!(fit.fit_stats.pearson.is_finite());
        assert_eq!(fit.fit_stats.df, fit.n_at_risk - 3);
    }

    #[test]
    fn all_observed_is_no_events() {
        let ds = two_month_panel(5, 0);
        let view = design_view(&ds, &["x1"]).unwrap();
        let err = fit_dropout(&view, &DropoutSpec::default()).unwrap_err();
        assert!(matches!(err, DropoutError::NoDropoutEvents { n_at_risk: 5, .. }));
    }

    #[test]
    fn single_month_panel_has_no_at_risk_records() {
        let records = vec![rec("h1", "p1", 1, true, Some(1.0), &[0.0])];
        let ds = build_dataset(records, vec!["x1".to_string()], 1).unwrap();
        let view = design_view(&ds, &["x1"]).unwrap();
        let err = fit_dropout(&view, &DropoutSpec::default()).unwrap_err();
        assert!(matches!(err, DropoutError::NoDropoutEvents { n_at_risk: 0, .. }));
    }

    #[test]
    fn perfect_separation_is_detected() {
        // A separated predictor on a small scale: the slope must grow past
        // the divergence limit long before the score can flatten out.
        let mut records = Vec::new();
        for j in 0..40 {
            let id = format!("p{j:02}");
            let x = if j % 2 == 0 { 0.1 } else { -0.1 };
            let stays = x > 0.0;
            records.push(rec("h1", &id, 1, true, Some(0.0), &[x]));
            records.push(rec("h1", &id, 2, stays, stays.then_some(0.0), &[x]));
        }
        let ds = build_dataset(records, vec!["x1".to_string()], 2).unwrap();
        let view = design_view(&ds, &["x1"]).unwrap();
        let spec = DropoutSpec {
            predictors: vec!["x1".to_string()],
            lagged_outcome: false,
            stratify_by_month: false,
        };
        let err = fit_dropout(&view, &spec).unwrap_err();
        assert!(matches!(err, DropoutError::CompleteSeparation { .. }));
    }

    #[test]
    fn stratified_fit_recovers_per_month_rates() {
        // Month 2 drops 1/4, month 3 drops 1/2; stratified intercepts are the
        // per-month logits.
        let mut records = Vec::new();
        for j in 0..8 {
            let id = format!("p{j}");
            let stays2 = j < 6;
            let stays3 = j < 3;
            records.push(rec("h1", &id, 1, true, Some(0.0), &[0.0]));
            records.push(rec("h1", &id, 2, stays2, stays2.then_some(0.0), &[0.0]));
            records.push(rec(
                "h1",
                &id,
                3,
                stays2 && stays3,
                (stays2 && stays3).then_some(0.0),
                &[0.0],
            ));
        }
        let ds = build_dataset(records, vec!["x1".to_string()], 3).unwrap();
        let view = design_view(&ds, &["x1"]).unwrap();
        let spec = DropoutSpec {
            predictors: vec![],
            lagged_outcome: false,
            stratify_by_month: true,
        };
        let fit = fit_dropout(&view, &spec).unwrap();
        assert_eq!(fit.coefficient_names, vec!["month2:intercept", "month3:intercept"]);
        let rate2: f64 = 6.0 / 8.0;
        let rate3: f64 = 3.0 / 6.0;
        assert!((fit.coefficients[0] - (rate2 / (1.0 - rate2)).ln()).abs() < 1e-8);
        assert!((fit.coefficients[1] - (rate3 / (1.0 - rate3)).ln()).abs() < 1e-8);
    }

    #[test]
    fn weight_arithmetic_by_scheme() {
        let ds = two_month_panel(3, 1);
        let view = design_view(&ds, &["x1"]).unwrap();
        let mut pi = vec![1.0; view.n_rows()];
        // Patient 0, month 2: observed with pi = 0.25.
        let row = view.patient_rows(0).start + 1;
        pi[row] = 0.25;
        let w1 = weights_from_probabilities(&view, &pi, WeightScheme::InversePi).unwrap();
        assert_eq!(w1.values[row], 4.0);
        let w2 = weights_from_probabilities(&view, &pi, WeightScheme::InverseClusterPi).unwrap();
        assert!((w2.values[row] - 4.0 / 4.0).abs() < 1e-15);
        // W1 and W2 differ row-wise by exactly 1/n_i.
        for r in 0..view.n_rows() {
            let n_i = view.cluster_sizes[view.hospital_of_row[r]] as f64;
            assert!((w2.values[r] - w1.values[r] / n_i).abs() < 1e-15);
        }
        // Unobserved rows get exactly zero.
        let dead_row = view.patient_rows(3).start + 1;
        assert!(!view.observed[dead_row]);
        assert_eq!(w1.values[dead_row], 0.0);
    }

    #[test]
    fn degenerate_pi_is_a_hard_error() {
        let ds = two_month_panel(2, 0);
        let view = design_view(&ds, &["x1"]).unwrap();
        let mut pi = vec![1.0; view.n_rows()];
        pi[view.patient_rows(1).start + 1] = 1e-8;
        let err = weights_from_probabilities(&view, &pi, WeightScheme::InversePi).unwrap_err();
        assert!(matches!(err, DropoutError::DegeneratePi { month: 2, .. }));
    }
}

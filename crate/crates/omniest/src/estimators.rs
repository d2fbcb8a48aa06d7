//! Closed-form profile least squares with hospital-level nuisance intercepts,
//! plus weighted GEE baselines without them.
//!
//! The profiling route never materializes the projection matrix: each
//! covariate column and the outcome are centered by their hospital-level
//! weighted means, and the coefficient solve is a single p x p system. The
//! algebraic identity (I - ZS)' W (I - ZS) = W (I - ZS) makes this equal to
//! the literal projected normal equations; `joint_wls_oracle` provides the
//! dense joint regression used to verify that equivalence in tests.

use crate::data::DesignView;
use crate::dropout::{WeightScheme, WeightVector};
use nalgebra::{Cholesky, DMatrix, DVector, LU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("design is rank deficient after within-hospital centering; offending columns: {}", .columns.join(", "))]
    RankDeficientDesign { columns: Vec<String> },
    #[error("hospital {hospital} has zero total weight; its intercept is undefined")]
    ZeroWeightHospital { hospital: String },
    #[error("{estimator} requires inverse-probability weights")]
    MissingDropoutWeights { estimator: &'static str },
}

/// Fitted profile-least-squares model.
#[derive(Debug, Clone)]
pub struct OmniFit {
    pub coefficient_names: Vec<String>,
    /// Slope estimates for the selected covariates.
    pub coefficients: DVector<f64>,
    /// Profiled per-hospital intercepts, one per hospital in view order.
    pub hospital_effects: DVector<f64>,
    /// y - x beta - effect, for every row including weight-zero ones.
    pub residuals: DVector<f64>,
    /// Within-hospital weighted-centered covariates, all rows.
    pub centered_x: DMatrix<f64>,
    pub centered_y: DVector<f64>,
    /// Sum over rows of w * xc xc', the p x p normal-equation matrix.
    pub gram: DMatrix<f64>,
    pub weight_scheme: WeightScheme,
}

/// Per-hospital weighted means of the partial residual y - x beta.
pub fn profile_hospital_effects(
    view: &DesignView,
    weights: &WeightVector,
    coefficients: &DVector<f64>,
) -> Result<DVector<f64>, EstimatorError> {
    let n_hosp = view.n_hospitals();
    let mut num = vec![0.0; n_hosp];
    let mut den = vec![0.0; n_hosp];
    for row in 0..view.n_rows() {
        let w = weights.values[row];
        if w == 0.0 {
            continue;
        }
        let h = view.hospital_of_row[row];
        let fitted: f64 = (0..view.n_covariates())
            .map(|c| view.x[(row, c)] * coefficients[c])
            .sum();
        num[h] += w * (view.y[row] - fitted);
        den[h] += w;
    }
    let mut effects = DVector::zeros(n_hosp);
    for h in 0..n_hosp {
        if den[h] <= 0.0 {
            return Err(EstimatorError::ZeroWeightHospital {
                hospital: view.hospital_ids[h].clone(),
            });
        }
        effects[h] = num[h] / den[h];
    }
    Ok(effects)
}

struct CenteredDesign {
    centered_x: DMatrix<f64>,
    centered_y: DVector<f64>,
    x_means: DMatrix<f64>,
    y_means: DVector<f64>,
}

/// Subtract per-hospital weighted means from every column of x and from y.
fn center_by_hospital(
    view: &DesignView,
    weights: &WeightVector,
) -> Result<CenteredDesign, EstimatorError> {
    let p = view.n_covariates();
    let n_hosp = view.n_hospitals();
    let mut sw = vec![0.0; n_hosp];
    let mut swy = vec![0.0; n_hosp];
    let mut swx: DMatrix<f64> = DMatrix::zeros(n_hosp, p);
    for row in 0..view.n_rows() {
        let w = weights.values[row];
        if w == 0.0 {
            continue;
        }
        let h = view.hospital_of_row[row];
        sw[h] += w;
        swy[h] += w * view.y[row];
        for c in 0..p {
            swx[(h, c)] += w * view.x[(row, c)];
        }
    }

    let mut x_means = DMatrix::zeros(n_hosp, p);
    let mut y_means = DVector::zeros(n_hosp);
    for h in 0..n_hosp {
        if sw[h] <= 0.0 {
            return Err(EstimatorError::ZeroWeightHospital {
                hospital: view.hospital_ids[h].clone(),
            });
        }
        y_means[h] = swy[h] / sw[h];
        for c in 0..p {
            x_means[(h, c)] = swx[(h, c)] / sw[h];
        }
    }

    let mut centered_x = view.x.clone();
    let mut centered_y = view.y.clone();
    for row in 0..view.n_rows() {
        let h = view.hospital_of_row[row];
        centered_y[row] -= y_means[h];
        for c in 0..p {
            centered_x[(row, c)] -= x_means[(h, c)];
        }
    }
    Ok(CenteredDesign {
        centered_x,
        centered_y,
        x_means,
        y_means,
    })
}

const RANK_TOL: f64 = 1e-10;

/// Columns implicated in the (near-)null space of a p x p Gram matrix.
fn rank_deficiency_columns(gram: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let eig = gram.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut flagged = vec![false; names.len()];
    for (i, ev) in eig.eigenvalues.iter().enumerate() {
        // Gram eigenvalues are squared singular values of the design.
        if *ev <= RANK_TOL * RANK_TOL * max_ev || *ev <= 0.0 {
            let v = eig.eigenvectors.column(i);
            let vmax = v.amax();
            for c in 0..names.len() {
                if v[c].abs() > 0.3 * vmax {
                    flagged[c] = true;
                }
            }
        }
    }
    let out: Vec<String> = names
        .iter()
        .zip(&flagged)
        .filter(|(_, &f)| f)
        .map(|(n, _)| n.clone())
        .collect();
    if out.is_empty() {
        names.to_vec()
    } else {
        out
    }
}

/// Profile least squares: center within hospitals under the weights, solve the
/// p x p normal equations, then recover the hospital intercepts.
pub fn fit_omni(view: &DesignView, weights: &WeightVector) -> Result<OmniFit, EstimatorError> {
    let p = view.n_covariates();
    let centered = center_by_hospital(view, weights)?;

    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for row in 0..view.n_rows() {
        let w = weights.values[row];
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = centered.centered_x[(row, a)];
            rhs[a] += w * xa * centered.centered_y[row];
            for b in a..p {
                gram[(a, b)] += w * xa * centered.centered_x[(row, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let coefficients = match solve_gram(&gram, &rhs) {
        Some(beta) => beta,
        None => {
            return Err(EstimatorError::RankDeficientDesign {
                columns: rank_deficiency_columns(&gram, &view.covariate_names),
            })
        }
    };

    // theta_i = weighted mean of (y - x beta) over hospital i; identical to
    // y_mean_i - x_mean_i' beta by linearity, reusing the centering sums.
    let n_hosp = view.n_hospitals();
    let mut hospital_effects = DVector::zeros(n_hosp);
    for h in 0..n_hosp {
        let mut fitted = 0.0;
        for c in 0..p {
            fitted += centered.x_means[(h, c)] * coefficients[c];
        }
        hospital_effects[h] = centered.y_means[h] - fitted;
    }

    let mut residuals = DVector::zeros(view.n_rows());
    for row in 0..view.n_rows() {
        let h = view.hospital_of_row[row];
        let fitted: f64 = (0..p).map(|c| view.x[(row, c)] * coefficients[c]).sum();
        residuals[row] = view.y[row] - fitted - hospital_effects[h];
    }

    Ok(OmniFit {
        coefficient_names: view.covariate_names.clone(),
        coefficients,
        hospital_effects,
        residuals,
        centered_x: centered.centered_x,
        centered_y: centered.centered_y,
        gram,
        weight_scheme: weights.scheme,
    })
}

/// Cholesky with a rank guard: None when the Gram matrix is numerically
/// singular at the declared tolerance.
fn solve_gram(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let eig_dominated = {
        let diag_max = (0..gram.nrows())
            .map(|i| gram[(i, i)])
            .fold(0.0f64, f64::max);
        diag_max <= 0.0
    };
    if eig_dominated {
        return None;
    }
    match Cholesky::new(gram.clone()) {
        Some(chol) => {
            // Cholesky can succeed numerically on near-singular systems;
            // confirm with the eigenvalue tolerance.
            let eig = gram.clone().symmetric_eigen();
            let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_ev <= RANK_TOL * RANK_TOL * max_ev {
                None
            } else {
                Some(chol.solve(rhs))
            }
        }
        None => None,
    }
}

/// Joint weighted least squares over [X | hospital indicators], solved densely.
/// Testing oracle; intended for small instances only.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub coefficients: DVector<f64>,
    pub hospital_effects: DVector<f64>,
}

pub fn joint_wls_oracle(
    view: &DesignView,
    weights: &WeightVector,
) -> Result<JointFit, EstimatorError> {
    let p = view.n_covariates();
    let n_hosp = view.n_hospitals();
    let cols = p + n_hosp;

    // Accumulate the joint normal equations directly; each row touches the p
    // covariate columns and its own hospital indicator only. The solve goes
    // through the same guarded Cholesky as the profiling path, so the two
    // sides of the equivalence tests share their numerics.
    let mut gram = DMatrix::zeros(cols, cols);
    let mut rhs = DVector::zeros(cols);
    for row in 0..view.n_rows() {
        let w = weights.values[row];
        if w == 0.0 {
            continue;
        }
        let h = p + view.hospital_of_row[row];
        let y = view.y[row];
        for a in 0..p {
            let xa = view.x[(row, a)];
            rhs[a] += w * xa * y;
            for b in a..p {
                gram[(a, b)] += w * xa * view.x[(row, b)];
            }
            gram[(a, h)] += w * xa;
        }
        gram[(h, h)] += w;
        rhs[h] += w * y;
    }
    for a in 0..cols {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    match solve_gram(&gram, &rhs) {
        Some(solution) => Ok(JointFit {
            coefficients: solution.rows(0, p).into_owned(),
            hospital_effects: solution.rows(p, n_hosp).into_owned(),
        }),
        None => {
            let mut names = view.covariate_names.clone();
            names.extend(view.hospital_ids.iter().map(|h| format!("hospital:{h}")));
            Err(EstimatorError::RankDeficientDesign {
                columns: rank_deficiency_columns(&gram, &names),
            })
        }
    }
}

/// Baseline estimating-equation family: no hospital intercepts, global
/// intercept column instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Gee,
    WGee,
    CWGee,
}

impl BaselineKind {
    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::Gee => "GEE",
            BaselineKind::WGee => "WGEE",
            BaselineKind::CWGee => "CWGEE",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub kind: BaselineKind,
    /// "intercept" followed by the covariate names.
    pub coefficient_names: Vec<String>,
    pub coefficients: DVector<f64>,
    /// Estimated exchangeable working correlation (0.0 for plain GEE runs
    /// that converge to independent residuals).
    pub working_correlation: f64,
    pub residual_variance: f64,
}

/// Fixed number of GLS refinement passes for the working-correlation moment
/// update; the estimate changes negligibly after the third pass.
const GLS_PASSES: usize = 6;

/// Fit a baseline with an exchangeable working correlation, iterating between
/// a GLS solve and moment re-estimation of the correlation.
///
/// `ip_weights` must be inverse-probability weights of scheme W1 (R / pi).
/// WGEE uses them as-is; CWGEE divides by the cluster size; GEE ignores them.
pub fn fit_baseline(
    view: &DesignView,
    ip_weights: Option<&WeightVector>,
    kind: BaselineKind,
) -> Result<BaselineFit, EstimatorError> {
    let weights = baseline_weights(view, ip_weights, kind)?;
    let p_d = view.n_covariates() + 1;
    let n_patients = view.n_patients();
    let k = view.k_months;

    // Design with intercept, patient-major rows.
    let xd = {
        let mut m = DMatrix::zeros(view.n_rows(), p_d);
        for row in 0..view.n_rows() {
            m[(row, 0)] = 1.0;
            for c in 0..view.n_covariates() {
                m[(row, c + 1)] = view.x[(row, c)];
            }
        }
        m
    };

    let mut rho = 0.0f64;
    let mut sigma2 = 1.0f64;
    let mut beta = DVector::zeros(p_d);
    for _pass in 0..GLS_PASSES {
        let mut a: DMatrix<f64> = DMatrix::zeros(p_d, p_d);
        let mut b: DVector<f64> = DVector::zeros(p_d);
        for patient in 0..n_patients {
            let rows = view.patient_rows(patient);
            let obs: Vec<usize> = rows.filter(|&r| view.observed[r]).collect();
            let m = obs.len();
            if m == 0 {
                continue;
            }
            // Closed-form inverse of sigma2 * ((1-rho) I + rho J):
            // V^{-1} = (I - (rho / (1 - rho + m rho)) J) / ((1 - rho) sigma2).
            // Also exact at m = 1, where it collapses to 1/sigma2.
            let denom = 1.0 - rho + rho * m as f64;
            let scale = 1.0 / ((1.0 - rho) * sigma2);
            let jfac = rho / denom;
            // Weighted row sums for the J part.
            let mut xw_sum: DVector<f64> = DVector::zeros(p_d);
            let mut yw_sum = 0.0;
            for &r in &obs {
                let w = weights[r];
                for c in 0..p_d {
                    xw_sum[c] += xd[(r, c)] * w;
                }
                yw_sum += view.y[r] * w;
            }
            let mut x_sum: DVector<f64> = DVector::zeros(p_d);
            for &r in &obs {
                for c in 0..p_d {
                    x_sum[c] += xd[(r, c)];
                }
            }
            for &r in &obs {
                let w = weights[r];
                for ca in 0..p_d {
                    let xa = xd[(r, ca)];
                    b[ca] += scale * (xa * view.y[r] * w);
                    for cb in 0..p_d {
                        a[(ca, cb)] += scale * (xa * xd[(r, cb)] * w);
                    }
                }
            }
            if jfac != 0.0 {
                for ca in 0..p_d {
                    b[ca] -= scale * jfac * x_sum[ca] * yw_sum;
                    for cb in 0..p_d {
                        a[(ca, cb)] -= scale * jfac * x_sum[ca] * xw_sum[cb];
                    }
                }
            }
        }
        let lu = LU::new(a);
        beta = match lu.solve(&b) {
            Some(sol) => sol,
            None => {
                let mut names = vec!["intercept".to_string()];
                names.extend(view.covariate_names.iter().cloned());
                return Err(EstimatorError::RankDeficientDesign { columns: names });
            }
        };

        // Moment update of sigma2 and rho from observed-row residuals.
        let mut ss = 0.0;
        let mut n_obs = 0usize;
        let mut cross = 0.0;
        let mut pairs = 0usize;
        for patient in 0..n_patients {
            let rows = view.patient_rows(patient);
            let mut es: Vec<f64> = Vec::with_capacity(k);
            for r in rows {
                if view.observed[r] {
                    let fitted: f64 = (0..p_d).map(|c| xd[(r, c)] * beta[c]).sum();
                    es.push(view.y[r] - fitted);
                }
            }
            let m = es.len();
            n_obs += m;
            let sum: f64 = es.iter().sum();
            let sum2: f64 = es.iter().map(|e| e * e).sum();
            ss += sum2;
            if m > 1 {
                cross += (sum * sum - sum2) / 2.0;
                pairs += m * (m - 1) / 2;
            }
        }
        sigma2 = ss / n_obs.max(1) as f64;
        rho = if pairs > 0 && sigma2 > 0.0 {
            (cross / pairs as f64 / sigma2).clamp(-0.95, 0.95)
        } else {
            0.0
        };
    }

    let mut coefficient_names = vec!["intercept".to_string()];
    coefficient_names.extend(view.covariate_names.iter().cloned());
    Ok(BaselineFit {
        kind,
        coefficient_names,
        coefficients: beta,
        working_correlation: rho,
        residual_variance: sigma2,
    })
}

/// Per-row weights for a baseline: 1 on observed rows for GEE, the supplied
/// 1/pi weights for WGEE, and 1/(n_i pi) for CWGEE.
fn baseline_weights(
    view: &DesignView,
    ip_weights: Option<&WeightVector>,
    kind: BaselineKind,
) -> Result<Vec<f64>, EstimatorError> {
    match kind {
        BaselineKind::Gee => Ok(view
            .observed
            .iter()
            .map(|&r| if r { 1.0 } else { 0.0 })
            .collect()),
        BaselineKind::WGee | BaselineKind::CWGee => {
            let w = ip_weights.ok_or(EstimatorError::MissingDropoutWeights {
                estimator: if kind == BaselineKind::WGee { "WGEE" } else { "CWGEE" },
            })?;
            let mut values = w.values.clone();
            if kind == BaselineKind::CWGee && w.scheme == WeightScheme::InversePi {
                for row in 0..view.n_rows() {
                    values[row] /= view.cluster_sizes[view.hospital_of_row[row]] as f64;
                }
            }
            Ok(values)
        }
    }
}

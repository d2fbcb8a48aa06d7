//! Sandwich covariance for the profile estimator, with the correction for
//! estimated observation probabilities, and an optional k-means stabilization
//! of the per-hospital intercepts before the variance is evaluated.
//!
//! The independence unit for empirical moments is the patient: score
//! contributions are summed within a patient before the outer products are
//! accumulated. Stabilization replaces each hospital effect by its cluster
//! centroid inside the residuals only; the point estimates never change.

use crate::data::DesignView;
use crate::dropout::DropoutModelFit;
use crate::estimators::OmniFit;
use nalgebra::{Cholesky, DMatrix};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("bread matrix is singular")]
    SingularBread,
    #[error("dropout information matrix is singular")]
    SingularDropoutInformation,
    #[error(
        "negative variance diagonal for {coefficient} ({value:.3e}): the estimated-weights \
         correction exceeds the score variance"
    )]
    NegativeVarianceDiagonal { coefficient: String, value: f64 },
    #[error("k = {k} exceeds the number of distinct values {distinct}")]
    KTooLarge { k: usize, distinct: usize },
    #[error("silhouette requires at least 2 nonempty clusters")]
    SingleCluster,
    #[error("cluster grid is empty")]
    EmptyGrid,
    #[error("cluster grid entry {k} is below 2")]
    InvalidGrid { k: usize },
}

/// Assembled pieces of the corrected sandwich.
#[derive(Debug, Clone)]
pub struct SandwichComponents {
    /// D: mean over patients of the weighted centered Gram contribution.
    pub bread: DMatrix<f64>,
    /// V1: second moment of per-patient coefficient scores.
    pub v1: DMatrix<f64>,
    /// Cross term between coefficient scores and dropout scores (p x q);
    /// zero-sized when the correction is disabled.
    pub cross: DMatrix<f64>,
    /// V2: inverse of the per-patient-scaled dropout information (q x q).
    pub v2: DMatrix<f64>,
    /// Covariance of the coefficient estimates.
    pub covariance: DMatrix<f64>,
    /// Square roots of the covariance diagonal.
    pub ase: Vec<f64>,
    pub n_patients: usize,
    pub corrected: bool,
}

/// Which hospital effects enter the residuals of the variance evaluation.
#[derive(Debug, Clone, Copy)]
pub enum EffectSource<'a> {
    Raw,
    Stabilized(&'a EffectClusters),
}

/// Sandwich covariance D^{-1} (V1 - cross V2 cross') D^{-1}' / N_sub.
///
/// With `dropout` present the correction for estimated observation
/// probabilities is subtracted; with None the plain sandwich is returned.
pub fn sandwich_variance(
    view: &DesignView,
    fit: &OmniFit,
    weights: &crate::dropout::WeightVector,
    dropout: Option<&DropoutModelFit>,
    effects: EffectSource,
) -> Result<SandwichComponents, InferenceError> {
    let p = view.n_covariates();
    let n_patients = view.n_patients();
    let n = n_patients as f64;

    // Residuals under the requested effect source. Stabilization shifts the
    // residual of every row in hospital h by (theta_h - centroid_h).
    let residual = |row: usize| -> f64 {
        match effects {
            EffectSource::Raw => fit.residuals[row],
            EffectSource::Stabilized(clusters) => {
                let h = view.hospital_of_row[row];
                fit.residuals[row] + fit.hospital_effects[h] - clusters.stabilized[h]
            }
        }
    };

    let bread = &fit.gram / n;

    // Per-patient scores U_j = sum_k w x_centered resid.
    let mut scores = DMatrix::zeros(n_patients, p);
    for row in 0..view.n_rows() {
        let w = weights.values[row];
        if w == 0.0 {
            continue;
        }
        let wr = w * residual(row);
        let patient = view.patient_of_row[row];
        for c in 0..p {
            scores[(patient, c)] += fit.centered_x[(row, c)] * wr;
        }
    }
    let v1 = scores.transpose() * &scores / n;

    let (cross, v2, meat, corrected) = match dropout {
        Some(drop_fit) => {
            let cross = scores.transpose() * &drop_fit.patient_scores / n;
            let scaled_info = &drop_fit.information / n;
            let v2 = Cholesky::new(scaled_info)
                .ok_or(InferenceError::SingularDropoutInformation)?
                .inverse();
            let correction = &cross * &v2 * cross.transpose();
            let meat = &v1 - correction;
            (cross, v2, meat, true)
        }
        None => (
            DMatrix::zeros(p, 0),
            DMatrix::zeros(0, 0),
            v1.clone(),
            false,
        ),
    };

    let bread_inv = Cholesky::new(bread.clone())
        .ok_or(InferenceError::SingularBread)?
        .inverse();
    let covariance = &bread_inv * meat * bread_inv.transpose() / n;

    let mut ase = Vec::with_capacity(p);
    for c in 0..p {
        let var = covariance[(c, c)];
        if var <= 0.0 {
            return Err(InferenceError::NegativeVarianceDiagonal {
                coefficient: fit.coefficient_names[c].clone(),
                value: var,
            });
        }
        ase.push(var.sqrt());
    }

    Ok(SandwichComponents {
        bread,
        v1,
        cross,
        v2,
        covariance,
        ase,
        n_patients,
        corrected,
    })
}

/// One-dimensional k-means with k-means++ seeding and restarts.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub within_ss: f64,
}

const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_SWEEPS: usize = 500;

pub fn kmeans_fit(values: &[f64], k: usize, seed: u64) -> Result<KmeansFit, InferenceError> {
    use rand::Rng;
    use rand::SeedableRng;

    let n = values.len();
    let distinct = count_distinct(values);
    if k == 0 || k > distinct {
        return Err(InferenceError::KTooLarge { k, distinct });
    }

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<KmeansFit> = None;

    for _restart in 0..KMEANS_RESTARTS {
        // k-means++ initialization.
        let mut centroids = Vec::with_capacity(k);
        centroids.push(values[rng.random_range(0..n)]);
        while centroids.len() < k {
            let d2: Vec<f64> = values
                .iter()
                .map(|v| {
                    centroids
                        .iter()
                        .map(|c| (v - c) * (v - c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                // Degenerate draw (duplicate seeds); fall back to any point
                // not already a centroid. distinct >= k guarantees one exists.
                let fresh = values
                    .iter()
                    .find(|v| !centroids.contains(v))
                    .copied()
                    .expect("distinct count exceeds current centroids");
                centroids.push(fresh);
                continue;
            }
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            centroids.push(values[chosen]);
        }

        // Lloyd sweeps until assignments stop changing.
        let mut assignments = vec![usize::MAX; n];
        for _sweep in 0..KMEANS_MAX_SWEEPS {
            let mut changed = false;
            for (i, v) in values.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = (v - centroid).abs();
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assignments[i] != best_c {
                    assignments[i] = best_c;
                    changed = true;
                }
            }
            // Recompute centroids; repopulate empty clusters with the point
            // farthest from its current centroid.
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (i, v) in values.iter().enumerate() {
                sums[assignments[i]] += v;
                counts[assignments[i]] += 1;
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da = (values[a] - centroids[assignments[a]]).abs();
                            let db = (values[b] - centroids[assignments[b]]).abs();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    centroids[c] = values[far];
                    changed = true;
                } else {
                    centroids[c] = sums[c] / counts[c] as f64;
                }
            }
            if !changed {
                break;
            }
        }

        let within_ss: f64 = values
            .iter()
            .zip(&assignments)
            .map(|(v, &a)| (v - centroids[a]) * (v - centroids[a]))
            .sum();
        if best.as_ref().is_none_or(|b| within_ss < b.within_ss) {
            best = Some(KmeansFit {
                centroids,
                assignments,
                within_ss,
            });
        }
    }

    Ok(best.expect("at least one restart"))
}

fn count_distinct(values: &[f64]) -> usize {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    sorted.len()
}

/// Mean silhouette over points, absolute distance on the line; singleton
/// clusters contribute 0, as do points with no separation (a = b = 0).
pub fn silhouette_score(values: &[f64], assignments: &[usize]) -> Result<f64, InferenceError> {
    assert_eq!(values.len(), assignments.len());
    let n = values.len();
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(InferenceError::SingleCluster);
    }

    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if counts[own] <= 1 {
            continue; // singleton contributes 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += (values[i] - values[j]).abs();
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Clustered hospital effects with the centroid-replaced stabilized values.
#[derive(Debug, Clone)]
pub struct EffectClusters {
    /// 1 when every effect is identical and clustering is skipped.
    pub k_chosen: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
    /// None on the degenerate single-cluster fallback.
    pub silhouette: Option<f64>,
    /// Effect vector with each entry replaced by its cluster centroid.
    pub stabilized: Vec<f64>,
}

/// Cluster the effects over the candidate grid, keeping the k with the best
/// silhouette (ties go to the smallest k). The grid is capped at N-1 and at
/// the number of distinct values; if no candidate survives, the effects are
/// passed through unchanged.
pub fn stabilize_effects(
    effects: &[f64],
    k_grid: &[usize],
    seed: u64,
) -> Result<EffectClusters, InferenceError> {
    if k_grid.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    if let Some(&bad) = k_grid.iter().find(|&&k| k < 2) {
        return Err(InferenceError::InvalidGrid { k: bad });
    }
    let n = effects.len();
    let distinct = count_distinct(effects);
    let cap = (n.saturating_sub(1)).min(distinct);

    let mut candidates: Vec<usize> = k_grid
        .iter()
        .copied()
        .filter(|&k| k >= 2 && k <= cap)
        .collect();
    candidates.sort_unstable();
    candidates.dedup();

    if candidates.is_empty() {
        return Ok(EffectClusters {
            k_chosen: 1,
            assignments: vec![0; n],
            centroids: vec![mean(effects)],
            silhouette: None,
            stabilized: effects.to_vec(),
        });
    }

    let mut best: Option<(usize, f64, KmeansFit)> = None;
    for &k in &candidates {
        let fit = kmeans_fit(effects, k, per_k_seed(seed, k))?;
        let score = silhouette_score(effects, &fit.assignments)?;
        // Strict improvement keeps the smallest k on ties (ascending grid).
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((k, score, fit));
        }
    }
    let (k_chosen, silhouette, fit) = best.expect("nonempty candidate grid");
    let stabilized = fit
        .assignments
        .iter()
        .map(|&a| fit.centroids[a])
        .collect();
    Ok(EffectClusters {
        k_chosen,
        assignments: fit.assignments,
        centroids: fit.centroids,
        silhouette: Some(silhouette),
        stabilized,
    })
}

fn per_k_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Default stabilization rule: engage when hospitals are small on average.
pub fn stabilization_default(mean_cluster_size: f64) -> bool {
    mean_cluster_size < 15.0
}

/// Wald interval and two-sided normal p-value per coefficient.
#[derive(Debug, Clone)]
pub struct CoefficientInterval {
    pub name: String,
    pub estimate: f64,
    pub ase: f64,
    pub lower: f64,
    pub upper: f64,
    pub p_value: f64,
}

pub fn confidence_intervals(
    fit: &OmniFit,
    components: &SandwichComponents,
    level: f64,
) -> Vec<CoefficientInterval> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(0.5 + level / 2.0);
    fit.coefficient_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let estimate = fit.coefficients[c];
            let ase = components.ase[c];
            let p_value = 2.0 * (1.0 - normal.cdf((estimate / ase).abs()));
            CoefficientInterval {
                name: name.clone(),
                estimate,
                ase,
                lower: estimate - z * ase,
                upper: estimate + z * ase,
                p_value,
            }
        })
        .collect()
}

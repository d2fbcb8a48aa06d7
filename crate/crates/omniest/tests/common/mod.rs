//! Shared generators for the property and acceptance suites: small random
//! panels with monotone dropout, plus arbitrary positive weights.

use omniest::data::{build_dataset, design_view, DesignView, LongitudinalDataset, ObservationRecord};
use omniest::dropout::{WeightScheme, WeightVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub fn viewed(ds: &LongitudinalDataset, p: usize) -> DesignView {
    let names: Vec<String> = (0..p).map(|c| format!("x{}", c + 1)).collect();
    let selection: Vec<&str> = names.iter().map(String::as_str).collect();
    design_view(ds, &selection).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A random instance small enough for the dense joint-solve oracle: up to 10
/// hospitals, 50 patients, 4 months, 3 covariates. The design keeps enough
/// observed rows beyond the hospital count for full rank after centering.
pub fn random_instance(seed: u64) -> (LongitudinalDataset, usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    loop {
        let k = rng.random_range(1..=4usize);
        let n_hosp = rng.random_range(2..=10usize);
        let p = rng.random_range(1..=3usize);
        let mut records = Vec::new();
        let mut observed_rows = 0usize;
        for h in 0..n_hosp {
            let n_patients = rng.random_range(1..=5usize);
            for j in 0..n_patients {
                let months_observed = rng.random_range(1..=k);
                let effect: f64 = rng.sample(StandardNormal);
                for month in 1..=k {
                    let observed = month <= months_observed;
                    let covariates: Vec<f64> =
                        (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let outcome = observed.then(|| {
                        let noise: f64 = rng.sample(StandardNormal);
                        covariates.iter().sum::<f64>() + effect + noise
                    });
                    if observed {
                        observed_rows += 1;
                    }
                    records.push(ObservationRecord {
                        hospital_id: format!("h{h:02}"),
                        patient_id: format!("p{j:02}"),
                        month: month as u32,
                        observed,
                        outcome,
                        covariates,
                    });
                }
            }
        }
        if observed_rows < n_hosp + p + 2 {
            continue;
        }
        let names: Vec<String> = (0..p).map(|c| format!("x{}", c + 1)).collect();
        return (build_dataset(records, names, k).unwrap(), p);
    }
}

/// Positive weights on observed rows, exactly zero elsewhere.
pub fn random_weights(
    seed: u64,
    ds: &LongitudinalDataset,
    view_rows: usize,
) -> WeightVector {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5EED_F00D);
    let mut values = vec![0.0; view_rows];
    let mut row = 0;
    for hospital in &ds.hospitals {
        for patient in &hospital.patients {
            for k in 0..ds.k_months {
                if patient.observed[k] {
                    values[row] = rng.random_range(0.1..3.0);
                }
                row += 1;
            }
        }
    }
    assert_eq!(row, view_rows);
    WeightVector {
        scheme: WeightScheme::InversePi,
        values,
    }
}

//! Three-level panel data model: hospitals contain patients, patients carry a
//! fixed number of monthly slots with an observation indicator, an outcome
//! (present exactly when observed), and a covariate vector.
//!
//! Every patient keeps all K slots even after dropout so that stacked objects
//! have a fixed per-patient length; unobserved slots get weight zero downstream
//! and never enter an estimating equation. Hospitals and patients are held in
//! lexicographic id order, which makes every derived structure a pure function
//! of the record set rather than of input order.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// One (hospital, patient, month) cell in long format.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub hospital_id: String,
    pub patient_id: String,
    /// 1-based month index in 1..=K.
    pub month: u32,
    pub observed: bool,
    /// Present exactly when `observed`.
    pub outcome: Option<f64>,
    /// Aligned with the covariate name list given to `build_dataset`.
    pub covariates: Vec<f64>,
}

/// A patient's K monthly slots in month order.
#[derive(Debug, Clone)]
pub struct PatientPanel {
    pub id: String,
    /// Monotone nonincreasing after the first `false` (death is absorbing).
    pub observed: Vec<bool>,
    /// 0.0 placeholder on unobserved slots; masked by weight 0 downstream.
    pub outcomes: Vec<f64>,
    /// One row per month, each of covariate dimension p.
    pub covariates: Vec<Vec<f64>>,
}

impl PatientPanel {
    /// Number of leading observed months.
    pub fn months_observed(&self) -> usize {
        self.observed.iter().take_while(|&&r| r).count()
    }
}

#[derive(Debug, Clone)]
pub struct Hospital {
    pub id: String,
    pub patients: Vec<PatientPanel>,
}

/// Validated panel with canonical (lexicographic) hospital and patient order.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    pub hospitals: Vec<Hospital>,
    pub covariate_names: Vec<String>,
    pub k_months: usize,
    /// Slots whose covariates were synthesized by forward fill during CSV
    /// ingestion. Zero for programmatically built datasets.
    pub forward_filled_slots: usize,
}

impl LongitudinalDataset {
    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    /// Total number of patients N_sub.
    pub fn n_patients(&self) -> usize {
        self.hospitals.iter().map(|h| h.patients.len()).sum()
    }

    /// Patients per hospital, in hospital order.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.hospitals.iter().map(|h| h.patients.len()).collect()
    }

    /// Flatten back to records in canonical order.
    pub fn to_records(&self) -> Vec<ObservationRecord> {
        let mut out = Vec::new();
        for h in &self.hospitals {
            for p in &h.patients {
                for k in 0..self.k_months {
                    out.push(ObservationRecord {
                        hospital_id: h.id.clone(),
                        patient_id: p.id.clone(),
                        month: (k + 1) as u32,
                        observed: p.observed[k],
                        outcome: p.observed[k].then(|| p.outcomes[k]),
                        covariates: p.covariates[k].clone(),
                    });
                }
            }
        }
        out
    }

    /// Keep only hospitals whose id satisfies the predicate. Errors if nothing
    /// is left.
    pub fn retain_hospitals<F: Fn(&str) -> bool>(&self, keep: F) -> Result<Self, DataError> {
        let hospitals: Vec<Hospital> = self
            .hospitals
            .iter()
            .filter(|h| keep(&h.id))
            .cloned()
            .collect();
        if hospitals.is_empty() {
            return Err(DataError::NoRecords);
        }
        Ok(LongitudinalDataset {
            hospitals,
            covariate_names: self.covariate_names.clone(),
            k_months: self.k_months,
            forward_filled_slots: self.forward_filled_slots,
        })
    }
}

/// Stacked design over all patients and months, row order fixed as
/// (hospital, patient, month). The hospital incidence matrix Z is never
/// materialized; `hospital_of_row` is its only representation.
#[derive(Debug, Clone)]
pub struct DesignView {
    /// n_rows x p covariate matrix, n_rows = n_patients * k_months.
    pub x: DMatrix<f64>,
    /// Outcome with 0.0 on unobserved slots.
    pub y: DVector<f64>,
    pub observed: Vec<bool>,
    pub hospital_of_row: Vec<usize>,
    pub patient_of_row: Vec<usize>,
    /// 0-based month per row.
    pub month_of_row: Vec<usize>,
    /// Hospital index per patient.
    pub patient_hospital: Vec<usize>,
    pub hospital_ids: Vec<String>,
    pub patient_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub k_months: usize,
    pub cluster_sizes: Vec<usize>,
    pub forward_filled_slots: usize,
}

impl DesignView {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospital_ids.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    /// Contiguous row range of one patient.
    pub fn patient_rows(&self, patient: usize) -> std::ops::Range<usize> {
        patient * self.k_months..(patient + 1) * self.k_months
    }

    pub fn mean_cluster_size(&self) -> f64 {
        self.n_patients() as f64 / self.n_hospitals() as f64
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no records provided")]
    NoRecords,
    #[error("hospital {hospital} patient {patient}: month {month} outside 1..={k_months}")]
    MonthOutOfRange {
        hospital: String,
        patient: String,
        month: u32,
        k_months: usize,
    },
    #[error("hospital {hospital} patient {patient} month {month}: {got} covariates, expected {expected}")]
    CovariateArity {
        hospital: String,
        patient: String,
        month: u32,
        got: usize,
        expected: usize,
    },
    #[error("hospital {hospital} patient {patient}: duplicate record for month {month}")]
    DuplicateSlot {
        hospital: String,
        patient: String,
        month: u32,
    },
    #[error("hospital {hospital} patient {patient}: no record for month {month}")]
    MissingSlot {
        hospital: String,
        patient: String,
        month: u32,
    },
    #[error("hospital {hospital} patient {patient}: baseline month not observed")]
    MissingBaseline { hospital: String, patient: String },
    #[error("hospital {hospital} patient {patient}: observation resumes at month {month} after dropout")]
    NonMonotoneDropout {
        hospital: String,
        patient: String,
        month: u32,
    },
    #[error("hospital {hospital} patient {patient} month {month}: outcome must be present exactly when observed")]
    OutcomePresenceMismatch {
        hospital: String,
        patient: String,
        month: u32,
    },
    #[error("hospital {hospital} has no patients")]
    EmptyHospital { hospital: String },
    #[error("unknown covariate {name}")]
    UnknownCovariate { name: String },
    #[error("covariate selection is empty")]
    EmptySelection,
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("header must begin with hospital_id,patient_id,month,observed,y; found \"{found}\"")]
    BadHeader { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Group, order, and validate raw records into a dataset.
///
/// Requires exactly one record per (patient, month) slot for months 1..=K,
/// an observed baseline month, monotone dropout, and outcome presence
/// matching the observation indicator.
pub fn build_dataset(
    records: Vec<ObservationRecord>,
    covariate_names: Vec<String>,
    k_months: usize,
) -> Result<LongitudinalDataset, DataError> {
    build_dataset_with_fill_count(records, covariate_names, k_months, 0)
}

pub(crate) fn build_dataset_with_fill_count(
    records: Vec<ObservationRecord>,
    covariate_names: Vec<String>,
    k_months: usize,
    forward_filled_slots: usize,
) -> Result<LongitudinalDataset, DataError> {
    if records.is_empty() {
        return Err(DataError::NoRecords);
    }
    let p = covariate_names.len();

    // BTreeMap keys give the canonical lexicographic ordering for free.
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<ObservationRecord>>> = BTreeMap::new();
    for rec in records {
        if rec.month == 0 || rec.month as usize > k_months {
            return Err(DataError::MonthOutOfRange {
                hospital: rec.hospital_id,
                patient: rec.patient_id,
                month: rec.month,
                k_months,
            });
        }
        if rec.covariates.len() != p {
            return Err(DataError::CovariateArity {
                hospital: rec.hospital_id,
                patient: rec.patient_id,
                month: rec.month,
                got: rec.covariates.len(),
                expected: p,
            });
        }
        groups
            .entry(rec.hospital_id.clone())
            .or_default()
            .entry(rec.patient_id.clone())
            .or_default()
            .push(rec);
    }

    let mut hospitals = Vec::with_capacity(groups.len());
    for (hospital_id, patients) in groups {
        let mut panels = Vec::with_capacity(patients.len());
        for (patient_id, recs) in patients {
            panels.push(assemble_patient(&hospital_id, patient_id, recs, k_months)?);
        }
        hospitals.push(Hospital {
            id: hospital_id,
            patients: panels,
        });
    }

    Ok(LongitudinalDataset {
        hospitals,
        covariate_names,
        k_months,
        forward_filled_slots,
    })
}

fn assemble_patient(
    hospital_id: &str,
    patient_id: String,
    recs: Vec<ObservationRecord>,
    k_months: usize,
) -> Result<PatientPanel, DataError> {
    let mut slots: Vec<Option<ObservationRecord>> = vec![None; k_months];
    for rec in recs {
        let slot = &mut slots[(rec.month - 1) as usize];
        if slot.is_some() {
            return Err(DataError::DuplicateSlot {
                hospital: hospital_id.to_string(),
                patient: patient_id,
                month: rec.month,
            });
        }
        *slot = Some(rec);
    }

    let mut observed = Vec::with_capacity(k_months);
    let mut outcomes = Vec::with_capacity(k_months);
    let mut covariates = Vec::with_capacity(k_months);
    let mut dropped = false;
    for (k, slot) in slots.into_iter().enumerate() {
        let rec = slot.ok_or_else(|| DataError::MissingSlot {
            hospital: hospital_id.to_string(),
            patient: patient_id.clone(),
            month: (k + 1) as u32,
        })?;
        if k == 0 && !rec.observed {
            return Err(DataError::MissingBaseline {
                hospital: hospital_id.to_string(),
                patient: patient_id,
            });
        }
        if rec.observed && dropped {
            return Err(DataError::NonMonotoneDropout {
                hospital: hospital_id.to_string(),
                patient: patient_id,
                month: rec.month,
            });
        }
        if rec.observed != rec.outcome.is_some() {
            return Err(DataError::OutcomePresenceMismatch {
                hospital: hospital_id.to_string(),
                patient: patient_id,
                month: rec.month,
            });
        }
        if !rec.observed {
            dropped = true;
        }
        observed.push(rec.observed);
        outcomes.push(rec.outcome.unwrap_or(0.0));
        covariates.push(rec.covariates);
    }

    Ok(PatientPanel {
        id: patient_id,
        observed,
        outcomes,
        covariates,
    })
}

/// Stack the selected covariates into a dense design with canonical row order.
pub fn design_view(
    ds: &LongitudinalDataset,
    selection: &[&str],
) -> Result<DesignView, DataError> {
    if selection.is_empty() {
        return Err(DataError::EmptySelection);
    }
    let mut columns = Vec::with_capacity(selection.len());
    for name in selection {
        let idx = ds
            .covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownCovariate {
                name: name.to_string(),
            })?;
        columns.push(idx);
    }

    let n_patients = ds.n_patients();
    let n_rows = n_patients * ds.k_months;
    let p = columns.len();
    let mut x = DMatrix::zeros(n_rows, p);
    let mut y = DVector::zeros(n_rows);
    let mut observed = Vec::with_capacity(n_rows);
    let mut hospital_of_row = Vec::with_capacity(n_rows);
    let mut patient_of_row = Vec::with_capacity(n_rows);
    let mut month_of_row = Vec::with_capacity(n_rows);
    let mut patient_hospital = Vec::with_capacity(n_patients);
    let mut hospital_ids = Vec::with_capacity(ds.n_hospitals());
    let mut patient_ids = Vec::with_capacity(n_patients);

    let mut row = 0;
    for (hi, hospital) in ds.hospitals.iter().enumerate() {
        hospital_ids.push(hospital.id.clone());
        for patient in &hospital.patients {
            let pj = patient_ids.len();
            patient_ids.push(patient.id.clone());
            patient_hospital.push(hi);
            for k in 0..ds.k_months {
                for (c, &col) in columns.iter().enumerate() {
                    x[(row, c)] = patient.covariates[k][col];
                }
                y[row] = patient.outcomes[k];
                observed.push(patient.observed[k]);
                hospital_of_row.push(hi);
                patient_of_row.push(pj);
                month_of_row.push(k);
                row += 1;
            }
        }
    }

    Ok(DesignView {
        x,
        y,
        observed,
        hospital_of_row,
        patient_of_row,
        month_of_row,
        patient_hospital,
        hospital_ids,
        patient_ids,
        covariate_names: selection.iter().map(|s| s.to_string()).collect(),
        k_months: ds.k_months,
        cluster_sizes: ds.cluster_sizes(),
        forward_filled_slots: ds.forward_filled_slots,
    })
}

/// Identifiability report for the profiling step.
#[derive(Debug, Clone)]
pub struct VariationReport {
    /// Covariates constant within every hospital over observed rows. Such a
    /// column is annihilated by within-hospital centering and its coefficient
    /// cannot be identified.
    pub hospital_constant: Vec<String>,
    /// True when the within-hospital centered design loses full column rank.
    pub rank_deficient: bool,
    pub forward_filled_slots: usize,
}

/// Check which covariates survive within-hospital centering.
///
/// Uses observed rows with unit weights; weighted centering can only shrink
/// the span further, so this is a necessary condition screen, not a
/// sufficient one.
pub fn check_within_hospital_variation(view: &DesignView) -> VariationReport {
    let p = view.n_covariates();
    let n_hosp = view.n_hospitals();

    let mut sums = vec![vec![0.0; p]; n_hosp];
    let mut counts = vec![0usize; n_hosp];
    for row in 0..view.n_rows() {
        if !view.observed[row] {
            continue;
        }
        let h = view.hospital_of_row[row];
        counts[h] += 1;
        for c in 0..p {
            sums[h][c] += view.x[(row, c)];
        }
    }

    let n_obs: usize = counts.iter().sum();
    let mut centered = DMatrix::zeros(n_obs, p);
    let mut max_dev = vec![0.0f64; p];
    let mut scale = vec![0.0f64; p];
    let mut r = 0;
    for row in 0..view.n_rows() {
        if !view.observed[row] {
            continue;
        }
        let h = view.hospital_of_row[row];
        for c in 0..p {
            let v = view.x[(row, c)];
            let dev = v - sums[h][c] / counts[h] as f64;
            centered[(r, c)] = dev;
            max_dev[c] = max_dev[c].max(dev.abs());
            scale[c] = scale[c].max(v.abs());
        }
        r += 1;
    }

    let hospital_constant = (0..p)
        .filter(|&c| max_dev[c] <= 1e-9 * (1.0 + scale[c]))
        .map(|c| view.covariate_names[c].clone())
        .collect();

    let rank_deficient = if n_obs < p {
        true
    } else {
        // Eigenvalues of the p x p Gram rather than singular values of the
        // tall factor: the symmetric solver is dependable, and a 1e-12
        // relative floor on squared singular values is as fine a screen as
        // the Gram's own roundoff supports.
        let gram = centered.transpose() * &centered;
        let eig = gram.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        max_ev <= 0.0 || min_ev <= 1e-12 * max_ev
    };

    VariationReport {
        hospital_constant,
        rank_deficient,
        forward_filled_slots: view.forward_filled_slots,
    }
}

const CSV_FIXED_HEADER: [&str; 5] = ["hospital_id", "patient_id", "month", "observed", "y"];

/// Write the dataset in long format, one row per (patient, month) slot.
pub fn write_csv(ds: &LongitudinalDataset, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<&str> = CSV_FIXED_HEADER.to_vec();
    header.extend(ds.covariate_names.iter().map(|s| s.as_str()));
    writeln!(out, "{}", header.join(","))?;
    for rec in ds.to_records() {
        let y = rec.outcome.map(|v| v.to_string()).unwrap_or_default();
        let covs: Vec<String> = rec.covariates.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            rec.hospital_id,
            rec.patient_id,
            rec.month,
            rec.observed as u8,
            y,
            covs.join(",")
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Read a long-format CSV.
///
/// Slots absent from the file (typically post-death months) are synthesized
/// with observed = 0 and the patient's last provided covariates carried
/// forward; the number of such slots is reported on the dataset and in the
/// variation report. When `k_months` is None the maximum month in the file is
/// used.
pub fn read_csv(path: &Path, k_months: Option<usize>) -> Result<LongitudinalDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let fields: Vec<&str> = headers.iter().collect();
    if fields.len() < CSV_FIXED_HEADER.len()
        || fields[..CSV_FIXED_HEADER.len()] != CSV_FIXED_HEADER
    {
        return Err(DataError::BadHeader {
            found: fields.join(","),
        });
    }
    let covariate_names: Vec<String> = fields[CSV_FIXED_HEADER.len()..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let p = covariate_names.len();

    let mut records: Vec<ObservationRecord> = Vec::new();
    let mut max_month = 0u32;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|pos| pos.line()).unwrap_or(0);
        let field = |i: usize| -> &str { row.get(i).unwrap_or("") };
        let malformed = |message: String| DataError::Malformed { line, message };

        if row.len() != CSV_FIXED_HEADER.len() + p {
            return Err(malformed(format!(
                "expected {} fields, found {}",
                CSV_FIXED_HEADER.len() + p,
                row.len()
            )));
        }
        let month: u32 = field(2)
            .parse()
            .map_err(|_| malformed(format!("bad month \"{}\"", field(2))))?;
        let observed = match field(3) {
            "0" => false,
            "1" => true,
            other => return Err(malformed(format!("bad observed flag \"{other}\""))),
        };
        let outcome = if field(4).is_empty() {
            None
        } else {
            Some(
                field(4)
                    .parse::<f64>()
                    .map_err(|_| malformed(format!("bad outcome \"{}\"", field(4))))?,
            )
        };
        let mut covariates = Vec::with_capacity(p);
        for c in 0..p {
            let raw = field(CSV_FIXED_HEADER.len() + c);
            covariates.push(raw.parse::<f64>().map_err(|_| {
                malformed(format!(
                    "bad value \"{raw}\" for covariate {}",
                    covariate_names[c]
                ))
            })?);
        }
        max_month = max_month.max(month);
        records.push(ObservationRecord {
            hospital_id: field(0).to_string(),
            patient_id: field(1).to_string(),
            month,
            observed,
            outcome,
            covariates,
        });
    }

    if records.is_empty() {
        return Err(DataError::NoRecords);
    }
    let k = k_months.unwrap_or(max_month as usize);

    // Synthesize any missing trailing slots by carrying covariates forward.
    let mut by_patient: BTreeMap<(String, String), Vec<ObservationRecord>> = BTreeMap::new();
    for rec in records {
        by_patient
            .entry((rec.hospital_id.clone(), rec.patient_id.clone()))
            .or_default()
            .push(rec);
    }
    let mut filled = 0usize;
    let mut all_records = Vec::new();
    for ((hospital_id, patient_id), mut recs) in by_patient {
        recs.sort_by_key(|r| r.month);
        let present: Vec<u32> = recs.iter().map(|r| r.month).collect();
        let last_covs = recs.last().map(|r| r.covariates.clone()).unwrap_or_default();
        for month in 1..=k as u32 {
            if !present.contains(&month) {
                filled += 1;
                recs.push(ObservationRecord {
                    hospital_id: hospital_id.clone(),
                    patient_id: patient_id.clone(),
                    month,
                    observed: false,
                    outcome: None,
                    covariates: last_covs.clone(),
                });
            }
        }
        all_records.extend(recs);
    }

    build_dataset_with_fill_count(all_records, covariate_names, k, filled)
}

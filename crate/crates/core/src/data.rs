//! Long-format trial data: validation, CSV ingestion, and serialization.
//!
//! Canonical CSV columns: `id, arm, visit, target_month, month, version, y`
//! plus one column per covariate. Outcomes may be missing (empty or `NA`);
//! covariates may not.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cognitive test version administered at a visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Version {
    A,
    B,
    C,
}

impl Version {
    pub fn parse(s: &str) -> Option<Version> {
        match s.trim() {
            "A" | "a" => Some(Version::A),
            "B" | "b" => Some(Version::B),
            "C" | "c" => Some(Version::C),
            _ => None,
        }
    }

    /// Protocol schedule: versions cycle A, B, C by visit number.
    pub fn for_visit(visit_no: u32) -> Version {
        match (visit_no - 1) % 3 {
            0 => Version::A,
            1 => Version::B,
            _ => Version::C,
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Version::A => write!(f, "A"),
            Version::B => write!(f, "B"),
            Version::C => write!(f, "C"),
        }
    }
}

/// One outcome record in long format. `covariates` is aligned with the
/// owning [`TrialData`]'s `covariate_names`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: String,
    /// 0 = placebo, 1 = active.
    pub arm: u8,
    pub visit_no: u32,
    pub target_month: f64,
    pub actual_month: f64,
    pub version: Version,
    pub covariates: Vec<f64>,
    pub outcome: Option<f64>,
}

/// A subject's contiguous slice of observations.
#[derive(Debug, Clone, Copy)]
pub struct SubjectRows<'a> {
    pub subject_id: &'a str,
    pub rows: &'a [Observation],
}

/// Validated long-format trial data. Immutable after construction; safe to
/// share across concurrent fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialData {
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    /// Start index of each subject's run in `observations` (first-appearance
    /// order), terminated by `observations.len()`.
    subject_starts: Vec<usize>,
}

impl TrialData {
    /// Validates all invariants and canonicalizes ordering: subjects in
    /// first-appearance order, visits ascending within subject.
    pub fn new(mut observations: Vec<Observation>, covariate_names: Vec<String>) -> Result<TrialData> {
        if observations.is_empty() {
            return Err(Error::InvariantViolation("no observations".into()));
        }
        for (i, o) in observations.iter().enumerate() {
            if o.covariates.len() != covariate_names.len() {
                return Err(Error::InvariantViolation(format!(
                    "row {i} (subject {}) carries {} covariates, expected {}",
                    o.subject_id,
                    o.covariates.len(),
                    covariate_names.len()
                )));
            }
            if o.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "row {i} (subject {}) has a non-finite covariate",
                    o.subject_id
                )));
            }
            if !o.actual_month.is_finite() || o.actual_month < 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "row {i} (subject {}) has invalid month {}",
                    o.subject_id, o.actual_month
                )));
            }
            if o.visit_no < 1 {
                return Err(Error::InvariantViolation(format!(
                    "row {i} (subject {}) has visit_no {} < 1",
                    o.subject_id, o.visit_no
                )));
            }
            if (o.visit_no == 1) != (o.actual_month == 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "subject {}: actual_month must be 0 exactly when visit_no is 1 \
                     (visit {}, month {})",
                    o.subject_id, o.visit_no, o.actual_month
                )));
            }
            if o.arm > 1 {
                return Err(Error::InvariantViolation(format!(
                    "subject {}: arm must be 0 or 1, found {}",
                    o.subject_id, o.arm
                )));
            }
        }

        // First-appearance order of subjects, visits ascending within subject.
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        for o in &observations {
            let next = first_seen.len();
            first_seen.entry(o.subject_id.clone()).or_insert(next);
        }
        observations.sort_by(|a, b| {
            first_seen[&a.subject_id]
                .cmp(&first_seen[&b.subject_id])
                .then(a.visit_no.cmp(&b.visit_no))
        });

        let mut subject_starts = Vec::new();
        let mut i = 0;
        while i < observations.len() {
            subject_starts.push(i);
            let id = observations[i].subject_id.clone();
            let arm = observations[i].arm;
            let mut prev: Option<&Observation> = None;
            while i < observations.len() && observations[i].subject_id == id {
                let o = &observations[i];
                if o.arm != arm {
                    return Err(Error::InvariantViolation(format!(
                        "subject {id} appears in both arms"
                    )));
                }
                if let Some(p) = prev {
                    if o.visit_no == p.visit_no {
                        return Err(Error::InvariantViolation(format!(
                            "subject {id} has duplicate visit {}",
                            o.visit_no
                        )));
                    }
                    if o.actual_month <= p.actual_month {
                        return Err(Error::InvariantViolation(format!(
                            "subject {id}: actual_month not strictly increasing at visit {}",
                            o.visit_no
                        )));
                    }
                }
                prev = Some(o);
                i += 1;
            }
        }

        Ok(TrialData {
            observations,
            covariate_names,
            subject_starts,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_starts.len()
    }

    /// Subjects in first-appearance order.
    pub fn subjects(&self) -> impl Iterator<Item = SubjectRows<'_>> {
        (0..self.subject_starts.len()).map(move |k| {
            let start = self.subject_starts[k];
            let end = self
                .subject_starts
                .get(k + 1)
                .copied()
                .unwrap_or(self.observations.len());
            SubjectRows {
                subject_id: &self.observations[start].subject_id,
                rows: &self.observations[start..end],
            }
        })
    }

    /// Distinct observed months, in row order (with duplicates).
    pub fn months(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.actual_month).collect()
    }

    /// Maximum visit number in the data.
    pub fn max_visit(&self) -> u32 {
        self.observations.iter().map(|o| o.visit_no).max().unwrap_or(0)
    }

    /// Map visit number -> target month, from the first row carrying each visit.
    pub fn target_months(&self) -> Vec<(u32, f64)> {
        let mut seen: Vec<(u32, f64)> = Vec::new();
        for o in &self.observations {
            if !seen.iter().any(|&(v, _)| v == o.visit_no) {
                seen.push((o.visit_no, o.target_month));
            }
        }
        seen.sort_by_key(|&(v, _)| v);
        seen
    }

    /// Observed proportions of the three test versions.
    pub fn version_proportions(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for o in &self.observations {
            counts[o.version as usize] += 1;
        }
        let n = self.observations.len() as f64;
        [
            counts[0] as f64 / n,
            counts[1] as f64 / n,
            counts[2] as f64 / n,
        ]
    }

    /// Restrict to rows with an observed outcome. Idempotent.
    pub fn complete_cases(&self) -> Result<TrialData> {
        let kept: Vec<Observation> = self
            .observations
            .iter()
            .filter(|o| o.outcome.is_some())
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyData);
        }
        TrialData::new(kept, self.covariate_names.clone())
    }
}

/// Column-name mapping for CSV ingestion. `covariates: None` treats every
/// unmapped header column as a covariate, in header order.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub arm: String,
    pub visit: String,
    pub target_month: String,
    pub month: String,
    pub version: String,
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            arm: "arm".into(),
            visit: "visit".into(),
            target_month: "target_month".into(),
            month: "month".into(),
            version: "version".into(),
            outcome: "y".into(),
            covariates: None,
        }
    }
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::ParseError {
        row,
        column: column.into(),
        message: format!("`{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::ParseError {
            row,
            column: column.into(),
            message: format!("`{field}` is not finite"),
        });
    }
    Ok(v)
}

/// Load and validate long-format CSV. Rows with a missing outcome (empty or
/// `NA`) are retained; missing covariates are rejected.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TrialData> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))
    };
    let c_id = col(&schema.id)?;
    let c_arm = col(&schema.arm)?;
    let c_visit = col(&schema.visit)?;
    let c_target = col(&schema.target_month)?;
    let c_month = col(&schema.month)?;
    let c_version = col(&schema.version)?;
    let c_y = col(&schema.outcome)?;

    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => {
            for n in names {
                col(n)?;
            }
            names.clone()
        }
        None => {
            let mapped = [c_id, c_arm, c_visit, c_target, c_month, c_version, c_y];
            headers
                .iter()
                .enumerate()
                .filter(|(i, _)| !mapped.contains(i))
                .map(|(_, h)| h.clone())
                .collect()
        }
    };
    let cov_cols: Vec<usize> = covariate_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;

    let mut observations = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 2; // 1-based, counting the header line
        let get = |c: usize, name: &str| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::ParseError {
                row,
                column: name.into(),
                message: "short record".into(),
            })
        };
        let arm_raw = parse_f64(get(c_arm, &schema.arm)?, row, &schema.arm)?;
        if arm_raw != 0.0 && arm_raw != 1.0 {
            return Err(Error::ParseError {
                row,
                column: schema.arm.clone(),
                message: format!("arm must be 0 or 1, found {arm_raw}"),
            });
        }
        let visit_raw = get(c_visit, &schema.visit)?;
        let visit_no: u32 = visit_raw.trim().parse().map_err(|_| Error::ParseError {
            row,
            column: schema.visit.clone(),
            message: format!("`{visit_raw}` is not a visit number"),
        })?;
        let version_raw = get(c_version, &schema.version)?;
        let version = Version::parse(version_raw).ok_or_else(|| Error::ParseError {
            row,
            column: schema.version.clone(),
            message: format!("`{version_raw}` is not one of A, B, C"),
        })?;
        let y_raw = get(c_y, &schema.outcome)?.trim();
        let outcome = if y_raw.is_empty() || y_raw == "NA" {
            None
        } else {
            Some(parse_f64(y_raw, row, &schema.outcome)?)
        };
        let covariates: Vec<f64> = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| {
                let raw = get(c, name)?.trim();
                if raw.is_empty() || raw == "NA" {
                    Err(Error::ParseError {
                        row,
                        column: name.clone(),
                        message: "covariates may not be missing".into(),
                    })
                } else {
                    parse_f64(raw, row, name)
                }
            })
            .collect::<Result<_>>()?;

        observations.push(Observation {
            subject_id: get(c_id, &schema.id)?.trim().to_string(),
            arm: arm_raw as u8,
            visit_no,
            target_month: parse_f64(get(c_target, &schema.target_month)?, row, &schema.target_month)?,
            actual_month: parse_f64(get(c_month, &schema.month)?, row, &schema.month)?,
            version,
            covariates,
            outcome,
        });
    }
    TrialData::new(observations, covariate_names)
}

/// Write the canonical long-format CSV. Missing outcomes are written as `NA`.
pub fn write_csv(data: &TrialData, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "id".to_string(),
        "arm".into(),
        "visit".into(),
        "target_month".into(),
        "month".into(),
        "version".into(),
        "y".into(),
    ];
    header.extend(data.covariate_names().iter().cloned());
    writer.write_record(&header)?;
    for o in data.observations() {
        let mut rec = vec![
            o.subject_id.clone(),
            o.arm.to_string(),
            o.visit_no.to_string(),
            format_float(o.target_month),
            format_float(o.actual_month),
            o.version.to_string(),
            o.outcome.map(format_float).unwrap_or_else(|| "NA".into()),
        ];
        rec.extend(o.covariates.iter().map(|&v| format_float(v)));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Round-trip-exact float formatting.
fn format_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // f64 Display in Rust is round-trip exact.
    format!("{v}")
}

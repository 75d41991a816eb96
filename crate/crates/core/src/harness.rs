//! Monte Carlo power / Type-I-error study driver.
//!
//! Runs the five standard analysis models on each simulated replicate,
//! appends one record per (replicate, model) to a CSV file, and summarizes
//! rejection rates both over all obtained p-values and over warning-free
//! fits only.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cov::CovSpec;
use crate::error::{Error, Result};
use crate::fit::{fit_gls_ml, fit_proportional};
use crate::infer::{emm_contrast, prop_contrast, Averaging, Contrast, SeMethod};
use crate::mean::{MeanKind, MeanSpec};
use crate::padsim::{replicate_seed, simulate, GeneratorModel, PadConfig};

/// Significance threshold, two-sided.
pub const ALPHA: f64 = 0.05;

/// Month at which arm contrasts are evaluated.
pub const CONTRAST_MONTH: f64 = 54.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Pad,
    PadCovid,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::Pad => "pad",
            Scenario::PadCovid => "pad-covid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectArm {
    /// Treatment effect on: rejection rate estimates power.
    Power,
    /// No effect: rejection rate estimates Type I error.
    Type1,
}

impl EffectArm {
    pub fn label(self) -> &'static str {
        match self {
            EffectArm::Power => "power",
            EffectArm::Type1 => "type1",
        }
    }
}

/// One analysis model from the standard five-model menu.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub label: &'static str,
    pub mean: MeanSpec,
    pub cov: CovSpec,
}

/// The five analyses applied to every replicate: categorical time with
/// unstructured covariance, the df-2 spline mean under three covariance
/// structures, and the proportional-effect model. All adjust for APOE4
/// and age; the spline models also adjust for test version.
pub fn menu() -> Vec<Analysis> {
    let covs = vec!["apoe4", "age"];
    let ncs = || MeanSpec::new(MeanKind::NaturalSpline(2), covs.clone(), true);
    vec![
        Analysis {
            label: "cat-un",
            mean: MeanSpec::new(MeanKind::CategoricalTime(10), covs.clone(), false),
            cov: CovSpec::Unstructured { k: 10 },
        },
        Analysis {
            label: "ncs-un",
            mean: ncs(),
            cov: CovSpec::Unstructured { k: 10 },
        },
        Analysis {
            label: "ncs-rs",
            mean: ncs(),
            cov: CovSpec::RandomSlope,
        },
        Analysis {
            label: "ncs-car1",
            mean: ncs(),
            cov: CovSpec::Car1Exp,
        },
        Analysis {
            label: "prop",
            mean: MeanSpec::new(MeanKind::ProportionalStep(10), covs, false),
            cov: CovSpec::RandomIntercept,
        },
    ]
}

/// Study definition: scenario, effect arm, size, and seeding.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub arm: EffectArm,
    pub replicates: usize,
    pub master_seed: u64,
    pub n_subjects: usize,
    pub delta: f64,
    /// Worker threads; 0 means available parallelism minus 2 (at least 1).
    pub workers: usize,
}

impl StudyConfig {
    pub fn new(scenario: Scenario, arm: EffectArm, replicates: usize, master_seed: u64) -> Self {
        StudyConfig {
            scenario,
            arm,
            replicates,
            master_seed,
            n_subjects: 1000,
            delta: 1.4,
            workers: 0,
        }
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers > 0 {
            return self.workers;
        }
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        avail.saturating_sub(2).max(1)
    }
}

/// One line of the record file: the result (or failure) of one analysis
/// on one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordRow {
    pub replicate: usize,
    pub scenario: String,
    pub arm: String,
    pub model: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub df: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub obtained: bool,
    /// Warning labels joined by `;`, or the error message when not obtained.
    pub warnings: String,
}

/// Rejection-rate summary for one (scenario, arm, model) cell, over all
/// obtained p-values and over warning-free fits only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerSummary {
    pub scenario: String,
    pub arm: String,
    pub model: String,
    pub replicates: usize,
    pub n_obtained: usize,
    /// Percent of obtained p-values below [`ALPHA`].
    pub rejection_rate: f64,
    /// Monte Carlo standard error of the rate, in percent.
    pub mc_se: f64,
    pub n_clean: usize,
    pub rejection_rate_clean: f64,
}

fn contrast_row(
    rep: usize,
    config: &StudyConfig,
    analysis: &Analysis,
    result: std::result::Result<Contrast, String>,
) -> RecordRow {
    let base = RecordRow {
        replicate: rep,
        scenario: config.scenario.label().to_string(),
        arm: config.arm.label().to_string(),
        model: analysis.label.to_string(),
        estimate: None,
        se: None,
        df: None,
        t: None,
        p: None,
        obtained: false,
        warnings: String::new(),
    };
    match result {
        Ok(c) => {
            let obtained = c.p_value.is_finite();
            RecordRow {
                estimate: Some(c.estimate),
                se: Some(c.se),
                df: Some(c.df),
                t: Some(c.t_ratio),
                p: Some(c.p_value),
                obtained,
                warnings: c.warnings.join(";"),
                ..base
            }
        }
        Err(msg) => RecordRow {
            warnings: msg,
            ..base
        },
    }
}

/// Generate one trial and run all five analyses, never panicking out: a
/// crashed or failed fit becomes an `obtained=false` row.
pub fn run_replicate(rep: usize, config: &StudyConfig, model: &GeneratorModel) -> Vec<RecordRow> {
    let pad = PadConfig {
        n_subjects: config.n_subjects,
        covid: config.scenario == Scenario::PadCovid,
        delta: config.delta,
        seed: replicate_seed(config.master_seed, rep as u64),
        ..PadConfig::default()
    };
    let effect_on = config.arm == EffectArm::Power;
    let data = match simulate(&pad, model, effect_on) {
        Ok(d) => d,
        Err(e) => {
            return menu()
                .iter()
                .map(|a| contrast_row(rep, config, a, Err(format!("simulate: {e}"))))
                .collect();
        }
    };

    menu()
        .iter()
        .map(|analysis| {
            let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<Contrast> {
                if let MeanKind::ProportionalStep(k) = analysis.mean.kind {
                    let fit = fit_proportional(k, analysis.mean.clone(), &data)?;
                    prop_contrast(&fit)
                } else {
                    let fit = fit_gls_ml(analysis.mean.clone(), analysis.cov, &data)?;
                    emm_contrast(
                        &fit,
                        &data,
                        CONTRAST_MONTH,
                        SeMethod::Model,
                        Averaging::default(),
                    )
                }
            }));
            let outcome = match attempt {
                Ok(Ok(c)) => Ok(c),
                Ok(Err(e)) => Err(e.to_string()),
                Err(_) => Err("panic during fit".to_string()),
            };
            contrast_row(rep, config, analysis, outcome)
        })
        .collect()
}

/// Read a record file back.
pub fn read_records(path: &Path) -> Result<Vec<RecordRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

fn append_rows(path: &Path, rows: &[RecordRow], write_header: bool) -> Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(write_header)
        .from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    writer
        .into_inner()
        .map_err(|e| Error::CorruptRecords(e.to_string()))?
        .flush()?;
    Ok(())
}

/// Run (or resume) a study. Replicates already present in the record file
/// are skipped; new rows are appended in replicate order regardless of
/// worker count, so identical configurations give identical files.
pub fn run_study(config: &StudyConfig, records_path: &Path) -> Result<Vec<PowerSummary>> {
    let model = GeneratorModel::standard();
    let mut done: BTreeSet<usize> = BTreeSet::new();
    let mut have_file = false;
    if records_path.exists() {
        have_file = true;
        for row in read_records(records_path)? {
            done.insert(row.replicate);
        }
    }
    let pending: Vec<usize> = (0..config.replicates).filter(|r| !done.contains(r)).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers())
        .build()
        .map_err(|e| Error::InvariantViolation(format!("thread pool: {e}")))?;

    // Chunked so long studies checkpoint progress; within a chunk the
    // parallel map preserves replicate order.
    for chunk in pending.chunks(16) {
        let rows: Vec<Vec<RecordRow>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&rep| run_replicate(rep, config, &model))
                .collect()
        });
        let flat: Vec<RecordRow> = rows.into_iter().flatten().collect();
        append_rows(records_path, &flat, !have_file)?;
        have_file = true;
    }

    summarize(&read_records(records_path)?)
}

/// Rejection-rate summaries per (scenario, arm, model), in first-seen
/// order of the cells.
pub fn summarize(records: &[RecordRow]) -> Result<Vec<PowerSummary>> {
    if records.is_empty() {
        return Err(Error::CorruptRecords("no records".into()));
    }
    let mut order: Vec<(String, String, String)> = Vec::new();
    for r in records {
        let key = (r.scenario.clone(), r.arm.clone(), r.model.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut out = Vec::new();
    for (scenario, arm, model) in order {
        let cell: Vec<&RecordRow> = records
            .iter()
            .filter(|r| r.scenario == scenario && r.arm == arm && r.model == model)
            .collect();
        let obtained: Vec<&&RecordRow> = cell
            .iter()
            .filter(|r| r.obtained && r.p.is_some_and(f64::is_finite))
            .collect();
        let n_obtained = obtained.len();
        let n_rej = obtained.iter().filter(|r| r.p.unwrap() < ALPHA).count();
        let clean: Vec<&&&RecordRow> = obtained.iter().filter(|r| r.warnings.is_empty()).collect();
        let n_clean = clean.len();
        let n_rej_clean = clean.iter().filter(|r| r.p.unwrap() < ALPHA).count();
        let rate = |rej: usize, n: usize| {
            if n == 0 {
                f64::NAN
            } else {
                100.0 * rej as f64 / n as f64
            }
        };
        let rejection_rate = rate(n_rej, n_obtained);
        let phat = rejection_rate / 100.0;
        let mc_se = if n_obtained == 0 {
            f64::NAN
        } else {
            100.0 * (phat * (1.0 - phat) / n_obtained as f64).sqrt()
        };
        out.push(PowerSummary {
            scenario,
            arm,
            model,
            replicates: cell.len(),
            n_obtained,
            rejection_rate,
            mc_se,
            n_clean,
            rejection_rate_clean: rate(n_rej_clean, n_clean),
        });
    }
    Ok(out)
}

/// Aligned text table of summaries.
pub struct SummaryTable<'a>(pub &'a [PowerSummary]);

impl fmt::Display for SummaryTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:<6} {:<9} {:>6} {:>7} {:>8} {:>6} {:>7} {:>8}",
            "scenario", "arm", "model", "reps", "N", "rate%", "mcSE", "Nclean", "clean%"
        )?;
        for s in self.0 {
            writeln!(
                f,
                "{:<10} {:<6} {:<9} {:>6} {:>7} {:>8.2} {:>6.2} {:>7} {:>8.2}",
                s.scenario,
                s.arm,
                s.model,
                s.replicates,
                s.n_obtained,
                s.rejection_rate,
                s.mc_se,
                s.n_clean,
                s.rejection_rate_clean
            )?;
        }
        Ok(())
    }
}

/// Write summaries as CSV.
pub fn write_summary_csv(path: &Path, summaries: &[PowerSummary]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for s in summaries {
        writer.serialize(s)?;
    }
    writer.flush()?;
    Ok(())
}

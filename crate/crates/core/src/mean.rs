//! Fixed-effects mean structures: categorical time, linear time, natural
//! cubic spline, and the placebo-step design used inside the proportional
//! (nonlinear) model. All structures share the constrained-baseline
//! convention: no arm main effect, so both arms have the same mean at
//! baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, TrialData, Version};
use crate::error::{Error, Result};
use crate::ncs::SplineBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanKind {
    /// Saturated visit-by-visit means, visit 1 as reference; arm enters
    /// through visit interactions for visits 2..K.
    CategoricalTime(usize),
    /// Straight-line trend in actual month; arm enters through the slope.
    LinearTime,
    /// Natural cubic spline in actual month with the given degrees of
    /// freedom; arm enters through interactions with every basis column.
    NaturalSpline(usize),
    /// Cumulative placebo steps scaled by exp(theta * arm); the linear part
    /// built here is the placebo step design used inside the nonlinear
    /// fitter.
    ProportionalStep(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanSpec {
    pub kind: MeanKind,
    /// Baseline means equal across arms. Always true for these analyses.
    pub clda_constraint: bool,
    /// Baseline covariates entering additively, by column name.
    pub covariates: Vec<String>,
    /// Include indicator columns for test versions B and C.
    pub version_effect: bool,
}

impl MeanSpec {
    pub fn new(kind: MeanKind, covariates: Vec<&str>, version_effect: bool) -> MeanSpec {
        MeanSpec {
            kind,
            clda_constraint: true,
            covariates: covariates.into_iter().map(String::from).collect(),
            version_effect,
        }
    }
}

/// A mean spec bound to a dataset: frozen spline basis, resolved covariate
/// columns, and the coefficient layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanModel {
    pub spec: MeanSpec,
    pub basis: Option<SplineBasis>,
    /// Indices of the spec's covariates within the data's covariate vector.
    cov_idx: Vec<usize>,
    pub coefficient_names: Vec<String>,
    /// Scheduled visit count for the visit-indexed kinds, 0 otherwise.
    k: usize,
    /// Target month for each scheduled visit (index 0 = visit 1), used to
    /// map a requested time back to a visit category.
    target_months: Vec<f64>,
    /// Proportion of observations at versions (A, B, C), for averaged
    /// predictions.
    pub version_proportions: [f64; 3],
}

impl MeanModel {
    /// Resolve the spec against the data: freeze knots, resolve covariates,
    /// lay out coefficients.
    pub fn bind(spec: MeanSpec, data: &TrialData) -> Result<MeanModel> {
        let mut cov_idx = Vec::with_capacity(spec.covariates.len());
        for name in &spec.covariates {
            cov_idx.push(
                data.covariate_index(name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))?,
            );
        }

        let (basis, k) = match spec.kind {
            MeanKind::CategoricalTime(k) | MeanKind::ProportionalStep(k) => {
                let max = data.max_visit() as usize;
                if max > k {
                    return Err(Error::IncompatibleSpec(format!(
                        "visit {max} exceeds K = {k}"
                    )));
                }
                (None, k)
            }
            MeanKind::LinearTime => (None, 0),
            MeanKind::NaturalSpline(df) => {
                let months: Vec<f64> = data.observations().iter().map(|o| o.actual_month).collect();
                (Some(SplineBasis::from_times(&months, df)?), 0)
            }
        };

        let mut names = vec!["intercept".to_string()];
        match spec.kind {
            MeanKind::CategoricalTime(k) => {
                names.extend((2..=k).map(|v| format!("visit{v}")));
                names.extend((2..=k).map(|v| format!("arm:visit{v}")));
            }
            MeanKind::LinearTime => {
                names.push("t".to_string());
                names.push("arm:t".to_string());
            }
            MeanKind::NaturalSpline(_) => {
                let m = basis.as_ref().unwrap().m();
                names.extend((1..=m).map(|j| format!("ns{j}")));
                names.extend((1..=m).map(|j| format!("arm:ns{j}")));
            }
            MeanKind::ProportionalStep(k) => {
                names.extend((2..=k).map(|v| format!("step{v}")));
            }
        }
        names.extend(spec.covariates.iter().cloned());
        if spec.version_effect {
            names.push("versionB".to_string());
            names.push("versionC".to_string());
        }

        let observed = data.target_months();
        let n_slots = observed
            .iter()
            .map(|&(v, _)| v as usize)
            .max()
            .unwrap_or(0)
            .max(k);
        // scheduled visits the data never reached keep a NaN placeholder
        let mut target_months = vec![f64::NAN; n_slots];
        for (v, t) in observed {
            target_months[v as usize - 1] = t;
        }

        Ok(MeanModel {
            spec,
            basis,
            cov_idx,
            coefficient_names: names,
            k,
            target_months,
            version_proportions: data.version_proportions(),
        })
    }

    pub fn n_coefs(&self) -> usize {
        self.coefficient_names.len()
    }

    /// Columns holding the arm effect (interaction block). Empty for the
    /// proportional placebo-step design, where arm enters nonlinearly.
    pub fn arm_cols(&self) -> std::ops::Range<usize> {
        match self.spec.kind {
            MeanKind::CategoricalTime(k) => k..(2 * k - 1),
            MeanKind::LinearTime => 2..3,
            MeanKind::NaturalSpline(_) => {
                let m = self.basis.as_ref().unwrap().m();
                (1 + m)..(1 + 2 * m)
            }
            MeanKind::ProportionalStep(_) => 0..0,
        }
    }

    /// Time-profile block values at month `t`: the per-column factors that
    /// multiply the arm interaction coefficients, in `arm_cols` order.
    /// Errors with [`Error::UnscheduledTime`] when a visit-indexed kind is
    /// asked for a time that is not a scheduled target month.
    pub fn time_block(&self, t: f64) -> Result<Vec<f64>> {
        match self.spec.kind {
            MeanKind::CategoricalTime(k) => {
                let visit = self.visit_for_time(t)?;
                Ok((2..=k).map(|v| if v as u32 == visit { 1.0 } else { 0.0 }).collect())
            }
            MeanKind::LinearTime => Ok(vec![t]),
            MeanKind::NaturalSpline(_) => {
                Ok(self.basis.as_ref().unwrap().eval(t).iter().copied().collect())
            }
            MeanKind::ProportionalStep(_) => Ok(vec![]),
        }
    }

    fn visit_for_time(&self, t: f64) -> Result<u32> {
        self.target_months
            .iter()
            .position(|&m| (m - t).abs() < 1e-9)
            .map(|i| (i + 1) as u32)
            .ok_or(Error::UnscheduledTime(t))
    }

    /// Core row builder; `spec_covs` are covariate values in spec order.
    fn row(
        &self,
        arm: u8,
        visit_no: u32,
        month: f64,
        spec_covs: &[f64],
        version: Version,
    ) -> Result<DVector<f64>> {
        let arm = arm as f64;
        let mut row = Vec::with_capacity(self.n_coefs());
        row.push(1.0);
        match self.spec.kind {
            MeanKind::CategoricalTime(k) => {
                if visit_no as usize > k {
                    return Err(Error::VisitOutOfRange { visit: visit_no, k });
                }
                for v in 2..=k {
                    row.push(if v as u32 == visit_no { 1.0 } else { 0.0 });
                }
                for v in 2..=k {
                    row.push(if v as u32 == visit_no { arm } else { 0.0 });
                }
            }
            MeanKind::LinearTime => {
                row.push(month);
                row.push(arm * month);
            }
            MeanKind::NaturalSpline(_) => {
                let b = self.basis.as_ref().unwrap().eval(month);
                row.extend(b.iter());
                row.extend(b.iter().map(|x| arm * x));
            }
            MeanKind::ProportionalStep(k) => {
                if visit_no as usize > k {
                    return Err(Error::VisitOutOfRange { visit: visit_no, k });
                }
                for v in 2..=k {
                    row.push(if visit_no >= v as u32 { 1.0 } else { 0.0 });
                }
            }
        }
        row.extend_from_slice(spec_covs);
        if self.spec.version_effect {
            row.push(if version == Version::B { 1.0 } else { 0.0 });
            row.push(if version == Version::C { 1.0 } else { 0.0 });
        }
        Ok(DVector::from_vec(row))
    }

    /// Fixed-effects row for one observation.
    pub fn design_row(&self, obs: &Observation) -> Result<DVector<f64>> {
        let spec_covs: Vec<f64> = self.cov_idx.iter().map(|&i| obs.covariates[i]).collect();
        self.row(obs.arm, obs.visit_no, obs.actual_month, &spec_covs, obs.version)
    }

    /// Full design matrix, rows in observation order.
    pub fn design_matrix(&self, data: &TrialData) -> Result<DMatrix<f64>> {
        let obs = data.observations();
        let mut x = DMatrix::zeros(obs.len(), self.n_coefs());
        for (i, o) in obs.iter().enumerate() {
            x.set_row(i, &self.design_row(o)?.transpose());
        }
        Ok(x)
    }

    /// Model mean at arm/time/covariates/version, for a coefficient vector
    /// aligned to `coefficient_names`.
    pub fn predict_mean(
        &self,
        beta: &DVector<f64>,
        arm: u8,
        t: f64,
        covariates: &[f64],
        version: Version,
    ) -> Result<f64> {
        assert_eq!(beta.len(), self.n_coefs());
        assert_eq!(covariates.len(), self.cov_idx.len());
        let visit_no = match self.spec.kind {
            MeanKind::CategoricalTime(_) | MeanKind::ProportionalStep(_) => self.visit_for_time(t)?,
            _ => 1,
        };
        let row = self.row(arm, visit_no, t, covariates, version)?;
        Ok(row.dot(beta))
    }
}

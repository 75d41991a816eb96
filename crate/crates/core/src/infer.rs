//! Arm contrasts at target times, Satterthwaite degrees of freedom, and
//! cluster-robust standard errors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cov::CovParams;
use crate::data::TrialData;
use crate::error::{Error, Result};
use crate::fit::{Engine, FitResult, WARN_SINGULAR_HESSIAN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeMethod {
    Model,
    Sandwich,
}

/// Averaging policy for reference-grid factors (test version). The contrast
/// is an arm difference and no factor interacts with arm, so the policy does
/// not change the estimate; it is kept for API completeness and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Averaging {
    #[default]
    EqualWeights,
    ObservedProportions,
}

/// An active-minus-placebo contrast with its inferential statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contrast {
    pub estimate: f64,
    pub se: f64,
    pub df: f64,
    pub t_ratio: f64,
    pub p_value: f64,
    pub se_method: SeMethod,
    pub warnings: Vec<String>,
}

fn t_test(estimate: f64, se: f64, df: f64) -> (f64, f64) {
    if se <= 0.0 || !df.is_finite() || df <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let t = estimate / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (t, p)
}

/// Contrast vector for the arm difference at `at_time`, with the arm
/// difference at time zero subtracted so the baseline constraint holds
/// exactly for every basis.
pub fn contrast_vector(fit: &FitResult, at_time: f64) -> Result<DVector<f64>> {
    let model = &fit.model;
    let mut c = DVector::zeros(model.n_coefs());
    let cols = model.arm_cols();
    if cols.is_empty() {
        return Err(Error::IncompatibleSpec(
            "the proportional model has no linear arm contrast".into(),
        ));
    }
    let at_t = model.time_block(at_time)?;
    let at_zero = model.time_block(0.0)?;
    for (j, col) in cols.enumerate() {
        c[col] = at_t[j] - at_zero[j];
    }
    Ok(c)
}

/// Estimated-marginal-mean arm contrast at `at_time`. Continuous covariates
/// and version indicators cancel in the arm difference; `averaging` records
/// the reference-grid policy.
pub fn emm_contrast(
    fit: &FitResult,
    data: &TrialData,
    at_time: f64,
    se_method: SeMethod,
    _averaging: Averaging,
) -> Result<Contrast> {
    if fit.vcov_beta.nrows() != fit.beta.len() {
        return Err(Error::MissingVcov);
    }
    let c = contrast_vector(fit, at_time)?;
    let estimate = c.dot(&fit.beta);
    let vcov = match se_method {
        SeMethod::Model => fit.vcov_beta.clone(),
        SeMethod::Sandwich => sandwich_vcov(fit, data)?,
    };
    let se = (c.transpose() * &vcov * &c)[(0, 0)].max(0.0).sqrt();
    let (df, mut warnings) = satterthwaite_df(fit, data, &c)?;
    let (t_ratio, p_value) = t_test(estimate, se, df);
    warnings.extend(fit.warnings.iter().cloned());
    Ok(Contrast {
        estimate,
        se,
        df,
        t_ratio,
        p_value,
        se_method,
        warnings,
    })
}

/// Satterthwaite degrees of freedom for the contrast `c`:
/// df = 2 g^2 / (grad_g' Cov(theta) grad_g) with g(theta) = c' Vbeta(theta) c,
/// the gradient by central differences in the unconstrained coordinates, and
/// Cov(theta) the inverse expected information. Returns the fallback
/// df = n_obs - n_fixed with a warning when the information is singular.
pub fn satterthwaite_df(
    fit: &FitResult,
    data: &TrialData,
    c: &DVector<f64>,
) -> Result<(f64, Vec<String>)> {
    let data = data.complete_cases()?;
    let engine = Engine::new(&fit.model, &data, fit.cov_params.spec)?;
    let fallback = (fit.n_obs as f64 - fit.beta.len() as f64).max(1.0);

    let g_at = |params: &CovParams| -> Option<f64> {
        let v = engine.vcov_beta(params).ok()?;
        Some((c.transpose() * v * c)[(0, 0)])
    };
    let g0 = match g_at(&fit.cov_params) {
        Some(v) if v > 0.0 => v,
        _ => return Ok((fallback, vec![WARN_SINGULAR_HESSIAN.to_string()])),
    };

    let q = fit.cov_params.spec.n_params();
    let mut grad = DVector::zeros(q);
    for j in 0..q {
        let h = 1e-5 * fit.cov_params.raw[j].abs().max(1.0);
        let mut up = fit.cov_params.clone();
        up.raw[j] += h;
        let mut dn = fit.cov_params.clone();
        dn.raw[j] -= h;
        match (g_at(&up), g_at(&dn)) {
            (Some(gu), Some(gd)) => grad[j] = (gu - gd) / (2.0 * h),
            _ => return Ok((fallback, vec![WARN_SINGULAR_HESSIAN.to_string()])),
        }
    }

    let info = engine.expected_information(&fit.cov_params)?;
    // A variance component estimated at its zero boundary leaves the
    // information matrix with a near-null direction along which the
    // finite-difference gradient is pure rounding noise; inverting through
    // that direction produces arbitrary df. Solve through the
    // well-conditioned eigenspace only, and fall back when nothing is left.
    let eig = info.symmetric_eigen();
    let max_eig = eig.eigenvalues.amax();
    if !(max_eig > 0.0) {
        return Ok((fallback, vec![WARN_SINGULAR_HESSIAN.to_string()]));
    }
    let tol = 1e-8 * max_eig;
    let rot = eig.eigenvectors.transpose() * &grad;
    let mut denom = 0.0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            denom += rot[j] * rot[j] / lambda;
        }
    }
    if !(denom > 0.0) {
        return Ok((fallback, vec![WARN_SINGULAR_HESSIAN.to_string()]));
    }
    let df = 2.0 * g0 * g0 / denom;
    if !df.is_finite() || df <= 0.0 {
        return Ok((fallback, vec![WARN_SINGULAR_HESSIAN.to_string()]));
    }
    Ok((df, Vec::new()))
}

/// Cluster-robust (CR1) coefficient covariance B^-1 M B^-1 * g/(g-1) with
/// clusters = subjects.
pub fn sandwich_vcov(fit: &FitResult, data: &TrialData) -> Result<DMatrix<f64>> {
    let data = data.complete_cases()?;
    let g = data.n_subjects();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let p = fit.beta.len();
    let mut bread = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for subj in data.subjects() {
        let visits: Vec<(u32, f64)> = subj
            .rows
            .iter()
            .map(|o| (o.visit_no, o.actual_month))
            .collect();
        let sigma = fit.cov_params.subject_cov(&visits)?;
        let inv = sigma
            .cholesky()
            .ok_or(Error::SingularHessian)?
            .inverse();
        let n = visits.len();
        let mut x = DMatrix::zeros(n, p);
        let mut r = DVector::zeros(n);
        for (i, o) in subj.rows.iter().enumerate() {
            let row = fit.model.design_row(o)?;
            r[i] = o.outcome.ok_or_else(|| {
                Error::InvariantViolation("sandwich requires complete cases".into())
            })? - row.dot(&fit.beta);
            x.set_row(i, &row.transpose());
        }
        let xtv = x.transpose() * &inv;
        bread += &xtv * &x;
        let s = &xtv * &r;
        meat += &s * s.transpose();
    }
    let bread_inv = bread
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("sandwich bread not positive definite".into()))?
        .inverse();
    let correction = g as f64 / (g as f64 - 1.0);
    Ok(&bread_inv * meat * &bread_inv * correction)
}

/// Wald statistic for the proportional model's treatment parameter, with
/// df = n_obs - n_fixed.
pub fn prop_contrast(fit: &FitResult) -> Result<Contrast> {
    let eff = fit
        .prop_effect
        .as_ref()
        .ok_or_else(|| Error::IncompatibleSpec("not a proportional fit".into()))?;
    let n_fixed = fit.beta.len() + 1;
    let df = (fit.n_obs as f64 - n_fixed as f64).max(1.0);
    let (t_ratio, p_value) = t_test(eff.theta, eff.se, df);
    Ok(Contrast {
        estimate: eff.theta,
        se: eff.se,
        df,
        t_ratio,
        p_value,
        se_method: SeMethod::Model,
        warnings: fit.warnings.clone(),
    })
}

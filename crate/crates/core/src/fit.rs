//! Maximum-likelihood fitting: profile likelihood over covariance parameters
//! with the mean coefficients solved by generalized least squares at each
//! candidate, and the conditionally linear optimization for the proportional
//! treatment-effect model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::cov::{self, CovParams, CovSpec, CovValues};
use crate::data::TrialData;
use crate::error::{Error, Result};
use crate::mean::{MeanKind, MeanModel, MeanSpec};
use crate::optim::{self, OptimOptions};

pub const WARN_NONCONVERGENCE: &str = "NonConvergence";
pub const WARN_SINGULAR_HESSIAN: &str = "SingularHessian";
pub const WARN_BOUNDARY: &str = "BoundaryEstimate";

/// Wald summary for the proportional model's treatment parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropEffect {
    pub theta: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub coefficient_names: Vec<String>,
    pub cov_params: CovParams,
    pub cov_values: CovValues,
    pub loglik: f64,
    pub aic: f64,
    pub vcov_beta: DMatrix<f64>,
    pub n_obs: usize,
    pub n_subjects: usize,
    /// Total free parameters: mean coefficients + covariance parameters
    /// (+1 for the treatment parameter in the proportional model).
    pub n_params: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub model: MeanModel,
    /// Present only for proportional fits.
    pub prop_effect: Option<PropEffect>,
}

impl FitResult {
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.n_params as f64
    }
}

/// One subject's design block, with its covariance-sharing pattern id.
struct SubjectBlock {
    x: DMatrix<f64>,
    y: DVector<f64>,
    pattern: usize,
}

/// Profile-likelihood engine over a fixed design. Subjects whose covariance
/// matrix is necessarily identical (same visit pattern) share one Cholesky
/// factorization per evaluation.
pub(crate) struct Engine {
    blocks: Vec<SubjectBlock>,
    /// Visit pattern for each pattern id.
    patterns: Vec<Vec<(u32, f64)>>,
    pub p: usize,
    pub n_obs: usize,
}

/// Result of profiling the mean out of the likelihood at one covariance
/// parameter value.
pub(crate) struct Profile {
    pub loglik: f64,
    pub beta: DVector<f64>,
    /// Cholesky of the GLS information X' Sigma^-1 X.
    pub info_chol: Cholesky<f64, Dyn>,
}

impl Engine {
    pub fn new(model: &MeanModel, data: &TrialData, cov: CovSpec) -> Result<Engine> {
        // two subjects share a covariance factorization when their patterns
        // agree in every feature the kind actually reads
        let pattern_key = |visits: &[(u32, f64)]| -> Vec<u64> {
            match cov {
                CovSpec::RandomIntercept => vec![visits.len() as u64],
                CovSpec::Unstructured { .. } | CovSpec::HetAr1 { .. } => {
                    visits.iter().map(|&(v, _)| v as u64).collect()
                }
                CovSpec::Car1ConstProp | CovSpec::Car1Exp | CovSpec::RandomSlope => visits
                    .iter()
                    .map(|&(_, t)| t.to_bits())
                    .collect(),
            }
        };
        let mut keys: Vec<Vec<u64>> = Vec::new();
        let mut patterns: Vec<Vec<(u32, f64)>> = Vec::new();
        let mut blocks = Vec::new();
        let mut n_obs = 0;
        for subj in data.subjects() {
            let visits: Vec<(u32, f64)> =
                subj.rows.iter().map(|o| (o.visit_no, o.actual_month)).collect();
            let key = pattern_key(&visits);
            let pattern = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    patterns.push(visits.clone());
                    patterns.len() - 1
                }
            };
            let ni = subj.rows.len();
            n_obs += ni;
            let mut x = DMatrix::zeros(ni, model.n_coefs());
            let mut y = DVector::zeros(ni);
            for (r, o) in subj.rows.iter().enumerate() {
                x.set_row(r, &model.design_row(o)?.transpose());
                y[r] = o.outcome.ok_or_else(|| {
                    Error::InvariantViolation("fitting requires complete cases".into())
                })?;
            }
            blocks.push(SubjectBlock { x, y, pattern });
        }
        if blocks.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(Engine {
            blocks,
            patterns,
            p: model.n_coefs(),
            n_obs,
        })
    }

    fn pattern_chols(&self, params: &CovParams) -> Result<Vec<(Cholesky<f64, Dyn>, f64)>> {
        self.patterns
            .iter()
            .map(|visits| {
                let sigma = params.subject_cov(visits)?;
                let chol = sigma.cholesky().ok_or(Error::SingularHessian)?;
                let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok((chol, logdet))
            })
            .collect()
    }

    /// Profiled log-likelihood and GLS coefficients at one covariance value.
    pub fn profile(&self, params: &CovParams) -> Result<Profile> {
        let chols = self.pattern_chols(params)?;
        let mut m = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        let mut yy = 0.0;
        let mut logdet = 0.0;
        for blk in &self.blocks {
            let (chol, ld) = &chols[blk.pattern];
            let l = chol.l_dirty();
            let z = l
                .solve_lower_triangular(&blk.x)
                .ok_or(Error::SingularHessian)?;
            let zy = l
                .solve_lower_triangular(&blk.y)
                .ok_or(Error::SingularHessian)?;
            m.gemm_tr(1.0, &z, &z, 1.0);
            b.gemv_tr(1.0, &z, &zy, 1.0);
            yy += zy.norm_squared();
            logdet += ld;
        }
        let info_chol = m.clone().cholesky().ok_or_else(|| Error::SingularDesign("GLS information not positive definite".into()))?;
        let beta = info_chol.solve(&b);
        let quad = yy - b.dot(&beta);
        let loglik = -0.5
            * (logdet + quad + self.n_obs as f64 * (2.0 * std::f64::consts::PI).ln());
        Ok(Profile {
            loglik,
            beta,
            info_chol,
        })
    }

    /// Profiled log-likelihood and its gradient in the raw covariance
    /// coordinates. The envelope theorem removes the beta-derivative terms,
    /// so only the covariance partials enter.
    pub fn loglik_grad(&self, params: &CovParams) -> (f64, DVector<f64>) {
        let q = params.spec.n_params();
        let fail = (f64::NEG_INFINITY, DVector::zeros(q));
        let profile = match self.profile(params) {
            Ok(p) => p,
            Err(e) => {
                if std::env::var("SPLINETRIAL_DEBUG").is_ok() {
                    eprintln!("profile failed at {:?}: {e}", params.raw.as_slice());
                }
                return fail;
            }
        };
        let Ok(chols) = self.pattern_chols(params) else {
            return fail;
        };
        // per-pattern: Sigma^-1, derivative matrices, and accumulated
        // u u' over member subjects with u = Sigma^-1 (y - X beta)
        let mut grad = DVector::zeros(q);
        let mut per_pattern: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>, usize)> =
            Vec::with_capacity(self.patterns.len());
        for (pid, visits) in self.patterns.iter().enumerate() {
            let ni = visits.len();
            let inv = chols[pid].0.inverse();
            let Ok(derivs) = params.subject_cov_derivs(visits) else {
                return fail;
            };
            per_pattern.push((inv, derivs, DMatrix::zeros(ni, ni), 0));
        }
        for blk in &self.blocks {
            let r = &blk.y - &blk.x * &profile.beta;
            let entry = &mut per_pattern[blk.pattern];
            let u = &entry.0 * r;
            entry.2.ger(1.0, &u, &u, 1.0);
            entry.3 += 1;
        }
        for (inv, derivs, uu, count) in &per_pattern {
            if *count == 0 {
                continue;
            }
            for k in 0..q {
                let d = &derivs[k];
                // tr(A D) = sum(A .* D) for symmetric A, D
                let tr_inv_d = inv.component_mul(d).sum();
                let tr_uu_d = uu.component_mul(d).sum();
                grad[k] += -0.5 * (*count as f64 * tr_inv_d - tr_uu_d);
            }
        }
        (profile.loglik, grad)
    }

    /// Expected information of the covariance parameters in raw coordinates:
    /// I_jk = 1/2 sum_i tr(Sigma_i^-1 dSigma_j Sigma_i^-1 dSigma_k).
    pub fn expected_information(&self, params: &CovParams) -> Result<DMatrix<f64>> {
        let q = params.spec.n_params();
        let chols = self.pattern_chols(params)?;
        let mut counts = vec![0usize; self.patterns.len()];
        for blk in &self.blocks {
            counts[blk.pattern] += 1;
        }
        let mut info = DMatrix::zeros(q, q);
        for (pid, visits) in self.patterns.iter().enumerate() {
            if counts[pid] == 0 {
                continue;
            }
            let inv = chols[pid].0.inverse();
            let derivs = params.subject_cov_derivs(visits)?;
            let w: Vec<DMatrix<f64>> = derivs.iter().map(|d| &inv * d).collect();
            for j in 0..q {
                for k in j..q {
                    // tr(W_j W_k) = sum(W_j .* W_k^T)
                    let tr = w[j].component_mul(&w[k].transpose()).sum();
                    let v = 0.5 * counts[pid] as f64 * tr;
                    info[(j, k)] += v;
                    if j != k {
                        info[(k, j)] += v;
                    }
                }
            }
        }
        Ok(info)
    }

    /// Coefficient covariance (X' Sigma^-1 X)^-1 at the given parameters.
    pub fn vcov_beta(&self, params: &CovParams) -> Result<DMatrix<f64>> {
        Ok(self.profile(params)?.info_chol.inverse())
    }
}

/// Empirical pairwise residual covariance across visits, eigenvalue-clipped
/// to positive definiteness. Used as a warm start for unstructured fits.
fn empirical_start(k: usize, data: &TrialData) -> Option<CovParams> {
    let mut means = vec![(0.0, 0usize); k];
    for o in data.observations() {
        let v = o.visit_no as usize - 1;
        if v >= k {
            return None;
        }
        means[v].0 += o.outcome?;
        means[v].1 += 1;
    }
    let means: Vec<f64> = means
        .iter()
        .map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut acc = DMatrix::<f64>::zeros(k, k);
    let mut cnt = DMatrix::<f64>::zeros(k, k);
    for subj in data.subjects() {
        for a in subj.rows {
            for b in subj.rows {
                let (i, j) = (a.visit_no as usize - 1, b.visit_no as usize - 1);
                let ri = a.outcome? - means[i];
                let rj = b.outcome? - means[j];
                acc[(i, j)] += ri * rj;
                cnt[(i, j)] += 1.0;
            }
        }
    }
    let mut sigma = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if cnt[(i, j)] < 2.0 {
                return None;
            }
            sigma[(i, j)] = acc[(i, j)] / (cnt[(i, j)] - 1.0);
        }
    }
    // clip eigenvalues away from zero to guarantee a Cholesky
    let eig = sigma.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    if !(max_ev > 0.0) {
        return None;
    }
    let floor = 1e-4 * max_ev;
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|e: f64| e.max(floor)));
    let sigma: DMatrix<f64> = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    CovParams::from_values(&CovValues::Unstructured { sigma }).ok()
}

/// Fit a linear mean structure by maximum likelihood, profiling the mean
/// coefficients out of the covariance-parameter optimization.
pub fn fit_gls_ml(mean: MeanSpec, cov: CovSpec, data: &TrialData) -> Result<FitResult> {
    if matches!(mean.kind, MeanKind::ProportionalStep(_)) {
        return Err(Error::IncompatibleSpec(
            "proportional mean requires fit_proportional".into(),
        ));
    }
    let data = data.complete_cases()?;
    let model = MeanModel::bind(mean, &data)?;
    let engine = Engine::new(&model, &data, cov)?;

    let mut start = cov::init_params(cov, &data)?;
    if let CovSpec::Unstructured { k } = cov {
        if let Some(emp) = empirical_start(k, &data) {
            start = emp;
        }
    }

    let spec = cov;
    let res = optim::maximize(
        |raw: &DVector<f64>| engine.loglik_grad(&CovParams::new(spec, raw.clone())),
        start.raw.clone(),
        OptimOptions::default(),
    );
    if std::env::var("SPLINETRIAL_DEBUG").is_ok() {
        eprintln!(
            "gls optim {:?}: iters={} converged={} x={:?} grad={:?} value={}",
            cov, res.iters, res.converged, res.x.as_slice(), res.grad.as_slice(), res.value
        );
    }
    let params = CovParams::new(cov, res.x.clone());
    let profile = engine.profile(&params)?;
    let mut warnings = Vec::new();
    if !res.converged {
        warnings.push(WARN_NONCONVERGENCE.to_string());
    }
    if res.at_bound {
        warnings.push(WARN_BOUNDARY.to_string());
    }
    let vcov_beta = profile
        .info_chol
        .inverse();
    let n_params = model.n_coefs() + cov.n_params();
    let mut fit = FitResult {
        beta: profile.beta,
        coefficient_names: model.coefficient_names.clone(),
        cov_values: params.values(),
        cov_params: params,
        loglik: profile.loglik,
        aic: 0.0,
        vcov_beta,
        n_obs: engine.n_obs,
        n_subjects: data.n_subjects(),
        n_params,
        converged: res.converged,
        warnings,
        model,
        prop_effect: None,
    };
    fit.aic = fit.aic();
    Ok(fit)
}

/// Fit the proportional treatment-effect model: cumulative placebo steps
/// scaled by exp(theta) in the active arm, compound-symmetry covariance.
/// Non-convergence is an error here — the model yields no usable statistic.
pub fn fit_proportional(k: usize, mean: MeanSpec, data: &TrialData) -> Result<FitResult> {
    if !matches!(mean.kind, MeanKind::ProportionalStep(mk) if mk == k) {
        return Err(Error::IncompatibleSpec(
            "fit_proportional requires a ProportionalStep mean of matching K".into(),
        ));
    }
    let data = data.complete_cases()?;
    let model = MeanModel::bind(mean, &data)?;
    // engine over the placebo-step design; active step columns get scaled
    // by exp(theta) per evaluation
    let base = Engine::new(&model, &data, CovSpec::RandomIntercept)?;
    let arms: Vec<u8> = data.subjects().map(|s| s.rows[0].arm).collect();
    let step_cols = 1..k; // columns step2..stepK in the placebo design

    let scaled_engine = |theta: f64| -> Engine {
        let f = theta.exp();
        let blocks = base
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                let mut x = blk.x.clone();
                if arms[i] == 1 {
                    for c in step_cols.clone() {
                        for r in 0..x.nrows() {
                            x[(r, c)] *= f;
                        }
                    }
                }
                SubjectBlock {
                    x,
                    y: blk.y.clone(),
                    pattern: blk.pattern,
                }
            })
            .collect();
        Engine {
            blocks,
            patterns: base.patterns.clone(),
            p: base.p,
            n_obs: base.n_obs,
        }
    };

    // outer parameters: (theta, log sd_intercept, log sd_residual)
    let objective = |v: &DVector<f64>| -> f64 {
        let params = CovParams::new(CovSpec::RandomIntercept, DVector::from_vec(vec![v[1], v[2]]));
        match scaled_engine(v[0]).profile(&params) {
            Ok(p) => p.loglik,
            Err(_) => f64::NEG_INFINITY,
        }
    };

    // least-squares pre-fit for theta: profile the linear part by OLS on a
    // coarse grid and refine from the best point
    let ri0 = cov::init_params(CovSpec::RandomIntercept, &data)?;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..41 {
        let theta = -2.0 + 0.1 * i as f64;
        let v = DVector::from_vec(vec![theta, ri0.raw[0], ri0.raw[1]]);
        let l = objective(&v);
        if l > best.1 {
            best = (theta, l);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return Err(Error::NonConvergence("proportional model failed to converge".into()));
    }

    let x0 = DVector::from_vec(vec![best.0, ri0.raw[0], ri0.raw[1]]);
    let h = 1e-5;
    let res = optim::maximize(
        |v: &DVector<f64>| {
            let f0 = objective(v);
            let mut g = DVector::zeros(3);
            if f0.is_finite() {
                for j in 0..3 {
                    let mut up = v.clone();
                    up[j] += h;
                    let mut dn = v.clone();
                    dn[j] -= h;
                    g[j] = (objective(&up) - objective(&dn)) / (2.0 * h);
                }
            }
            (f0, g)
        },
        x0,
        OptimOptions {
            max_iters: 50,
            rel_tol: 1e-10,
            grad_tol: 1e-3,
            value_conv: true,
            ..OptimOptions::default()
        },
    );
    if std::env::var("SPLINETRIAL_DEBUG").is_ok() {
        eprintln!(
            "prop optim: iters={} converged={} x={:?} grad={:?} value={}",
            res.iters, res.converged, res.x.as_slice(), res.grad.as_slice(), res.value
        );
    }
    if !res.converged {
        return Err(Error::NonConvergence("proportional model failed to converge".into()));
    }
    let theta = res.x[0];
    let params = CovParams::new(
        CovSpec::RandomIntercept,
        DVector::from_vec(vec![res.x[1], res.x[2]]),
    );
    let engine = scaled_engine(theta);
    let profile = engine.profile(&params)?;

    // joint observed information over (theta, log sds) by central
    // differences; SE of theta from the inverse
    let hh = 1e-4;
    let mut hess = DMatrix::zeros(3, 3);
    for i in 0..3 {
        for j in i..3 {
            let mut pp = res.x.clone();
            pp[i] += hh;
            pp[j] += hh;
            let mut pm = res.x.clone();
            pm[i] += hh;
            pm[j] -= hh;
            let mut mp = res.x.clone();
            mp[i] -= hh;
            mp[j] += hh;
            let mut mm = res.x.clone();
            mm[i] -= hh;
            mm[j] -= hh;
            let v = (objective(&pp) - objective(&pm) - objective(&mp) + objective(&mm))
                / (4.0 * hh * hh);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let info = -hess;
    let se = match info.clone().cholesky() {
        Some(ch) => ch.inverse()[(0, 0)].sqrt(),
        None => {
            // variance directions can go flat at a boundary (e.g. the random
            // intercept collapsing); fall back to the theta curvature alone
            if info[(0, 0)] > 0.0 {
                (1.0 / info[(0, 0)]).sqrt()
            } else {
                return Err(Error::SingularHessian);
            }
        }
    };

    let mut warnings = Vec::new();
    if res.at_bound {
        warnings.push(WARN_BOUNDARY.to_string());
    }
    let n_params = model.n_coefs() + 1 + 2;
    let mut fit = FitResult {
        beta: profile.beta,
        coefficient_names: model.coefficient_names.clone(),
        cov_values: params.values(),
        cov_params: params,
        loglik: profile.loglik,
        aic: 0.0,
        vcov_beta: profile.info_chol.inverse(),
        n_obs: engine.n_obs,
        n_subjects: data.n_subjects(),
        n_params,
        converged: true,
        warnings,
        model,
        prop_effect: Some(PropEffect { theta, se }),
    };
    fit.aic = fit.aic();
    Ok(fit)
}

//! The six within-subject variance-covariance structures, each mapping an
//! unconstrained parameter vector to a per-subject covariance matrix.
//!
//! Unconstrained coordinates: log for standard deviations and scale
//! parameters, log-Cholesky for the unstructured and random-slope blocks,
//! tanh(z/2) onto (-1, 1) for correlations (logistic onto (0, 1) for the
//! continuous-time decay rate), delta unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrialData;
use crate::error::{Error, Result};

/// Scale between the unconstrained coordinate and the exponential-variance
/// rate `delta` of `Car1Exp`. `delta` multiplies months (up to ~60), so an
/// unscaled coordinate would make that direction's curvature dwarf the
/// others and stall the line search; one raw unit = 2% variance growth per
/// month keeps the coordinates comparably scaled.
pub const DELTA_SCALE: f64 = 0.02;

/// Which covariance structure, with the number of scheduled visits K for the
/// categorical kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovSpec {
    /// Full per-visit covariance (log-Cholesky), K(K+1)/2 parameters.
    Unstructured { k: usize },
    /// Heterogeneous SDs with AR(1) correlation by visit index, K+1 parameters.
    HetAr1 { k: usize },
    /// Continuous-time AR(1) with Var = a^2 + b^2 t^2; parameters (rho, a, b).
    Car1ConstProp,
    /// Continuous-time AR(1) with Var = sigma^2 exp(2 delta t); (rho, sigma, delta).
    Car1Exp,
    /// Compound symmetry: random intercept + iid residual; (sd_alpha, sd).
    RandomIntercept,
    /// Random intercept and slope in t plus iid residual; 4 parameters.
    RandomSlope,
}

impl CovSpec {
    pub fn n_params(&self) -> usize {
        match self {
            CovSpec::Unstructured { k } => k * (k + 1) / 2,
            CovSpec::HetAr1 { k } => k + 1,
            CovSpec::Car1ConstProp | CovSpec::Car1Exp => 3,
            CovSpec::RandomIntercept => 2,
            CovSpec::RandomSlope => 4,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CovSpec::Unstructured { .. } => "un",
            CovSpec::HetAr1 { .. } => "har1",
            CovSpec::Car1ConstProp => "car1cp",
            CovSpec::Car1Exp => "car1exp",
            CovSpec::RandomIntercept => "ri",
            CovSpec::RandomSlope => "rs",
        }
    }
}

/// Unconstrained optimizer coordinates for a covariance structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovParams {
    pub spec: CovSpec,
    pub raw: DVector<f64>,
}

/// Constrained (natural-scale) parameter values, for reporting and JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CovValues {
    Unstructured { sigma: DMatrix<f64> },
    HetAr1 { sds: Vec<f64>, rho: f64 },
    Car1ConstProp { rho: f64, a: f64, b: f64 },
    Car1Exp { rho: f64, sigma: f64, delta: f64 },
    RandomIntercept { sd_intercept: f64, sd_residual: f64 },
    RandomSlope { sd_intercept: f64, sd_slope: f64, corr: f64, sd_residual: f64 },
}

fn corr_from_raw(z: f64) -> f64 {
    (z / 2.0).tanh()
}

fn raw_from_corr(r: f64) -> f64 {
    ((1.0 + r) / (1.0 - r)).ln()
}

fn decay_from_raw(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn raw_from_decay(r: f64) -> f64 {
    (r / (1.0 - r)).ln()
}

/// Lower-triangular index for row-major packed storage, i >= j.
fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Build L from a packed log-Cholesky vector (diagonal entries exponentiated).
fn chol_from_raw(raw: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = raw[tri_index(i, j)];
            l[(i, j)] = if i == j { v.exp() } else { v };
        }
    }
    l
}

fn raw_from_chol(l: &DMatrix<f64>) -> Vec<f64> {
    let k = l.nrows();
    let mut raw = vec![0.0; k * (k + 1) / 2];
    for i in 0..k {
        for j in 0..=i {
            raw[tri_index(i, j)] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
        }
    }
    raw
}

impl CovParams {
    pub fn new(spec: CovSpec, raw: DVector<f64>) -> CovParams {
        assert_eq!(raw.len(), spec.n_params());
        CovParams { spec, raw }
    }

    /// Natural-scale values. Total on finite raw vectors.
    pub fn values(&self) -> CovValues {
        let raw = self.raw.as_slice();
        match self.spec {
            CovSpec::Unstructured { k } => {
                let l = chol_from_raw(raw, k);
                CovValues::Unstructured { sigma: &l * l.transpose() }
            }
            CovSpec::HetAr1 { k } => CovValues::HetAr1 {
                sds: (0..k).map(|j| raw[j].exp()).collect(),
                rho: corr_from_raw(raw[k]),
            },
            CovSpec::Car1ConstProp => CovValues::Car1ConstProp {
                rho: decay_from_raw(raw[0]),
                a: raw[1].exp(),
                b: raw[2].exp(),
            },
            CovSpec::Car1Exp => CovValues::Car1Exp {
                rho: decay_from_raw(raw[0]),
                sigma: raw[1].exp(),
                delta: DELTA_SCALE * raw[2],
            },
            CovSpec::RandomIntercept => CovValues::RandomIntercept {
                sd_intercept: raw[0].exp(),
                sd_residual: raw[1].exp(),
            },
            CovSpec::RandomSlope => {
                let l = chol_from_raw(&raw[..3], 2);
                let g = &l * l.transpose();
                let sd_i = g[(0, 0)].sqrt();
                let sd_s = g[(1, 1)].sqrt();
                CovValues::RandomSlope {
                    sd_intercept: sd_i,
                    sd_slope: sd_s,
                    corr: g[(0, 1)] / (sd_i * sd_s),
                    sd_residual: raw[3].exp(),
                }
            }
        }
    }

    /// Inverse of [`values`](Self::values).
    pub fn from_values(values: &CovValues) -> Result<CovParams> {
        let (spec, raw) = match values {
            CovValues::Unstructured { sigma } => {
                let k = sigma.nrows();
                let chol = sigma
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvariantViolation("sigma not PD".into()))?;
                (CovSpec::Unstructured { k }, raw_from_chol(&chol.l()))
            }
            CovValues::HetAr1 { sds, rho } => {
                let mut raw: Vec<f64> = sds.iter().map(|s| s.ln()).collect();
                raw.push(raw_from_corr(*rho));
                (CovSpec::HetAr1 { k: sds.len() }, raw)
            }
            CovValues::Car1ConstProp { rho, a, b } => (
                CovSpec::Car1ConstProp,
                vec![raw_from_decay(*rho), a.ln(), b.ln()],
            ),
            CovValues::Car1Exp { rho, sigma, delta } => (
                CovSpec::Car1Exp,
                vec![raw_from_decay(*rho), sigma.ln(), *delta / DELTA_SCALE],
            ),
            CovValues::RandomIntercept { sd_intercept, sd_residual } => (
                CovSpec::RandomIntercept,
                vec![sd_intercept.ln(), sd_residual.ln()],
            ),
            CovValues::RandomSlope { sd_intercept, sd_slope, corr, sd_residual } => {
                let g = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        sd_intercept * sd_intercept,
                        corr * sd_intercept * sd_slope,
                        corr * sd_intercept * sd_slope,
                        sd_slope * sd_slope,
                    ],
                );
                let chol = g
                    .cholesky()
                    .ok_or_else(|| Error::InvariantViolation("G not PD".into()))?;
                let mut raw = raw_from_chol(&chol.l());
                raw.push(sd_residual.ln());
                (CovSpec::RandomSlope, raw)
            }
        };
        Ok(CovParams::new(spec, DVector::from_vec(raw)))
    }

    fn check_visits(&self, visits: &[(u32, f64)]) -> Result<()> {
        if visits.is_empty() {
            return Err(Error::IncompatibleSpec("empty visit list".into()));
        }
        match self.spec {
            CovSpec::Unstructured { k } | CovSpec::HetAr1 { k } => {
                for &(v, _) in visits {
                    if v as usize > k || v < 1 {
                        return Err(Error::VisitOutOfRange { visit: v, k });
                    }
                }
            }
            CovSpec::Car1ConstProp | CovSpec::Car1Exp => {
                for &(_, t) in visits {
                    if t < 0.0 {
                        return Err(Error::IncompatibleSpec(format!(
                            "continuous-time covariance requires months >= 0, found {t}"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Covariance matrix for a subject observed at `visits` (visit number,
    /// actual month), symmetric positive definite for any finite raw vector.
    pub fn subject_cov(&self, visits: &[(u32, f64)]) -> Result<DMatrix<f64>> {
        self.check_visits(visits)?;
        let n = visits.len();
        let raw = self.raw.as_slice();
        let mut out = DMatrix::zeros(n, n);
        match self.spec {
            CovSpec::Unstructured { k } => {
                let l = chol_from_raw(raw, k);
                let sigma = &l * l.transpose();
                for a in 0..n {
                    for b in 0..n {
                        out[(a, b)] =
                            sigma[(visits[a].0 as usize - 1, visits[b].0 as usize - 1)];
                    }
                }
            }
            CovSpec::HetAr1 { k } => {
                let rho = corr_from_raw(raw[k]);
                for a in 0..n {
                    for b in 0..n {
                        let (ja, jb) = (visits[a].0 as i64, visits[b].0 as i64);
                        let lag = (ja - jb).unsigned_abs() as i32;
                        out[(a, b)] = raw[visits[a].0 as usize - 1].exp()
                            * raw[visits[b].0 as usize - 1].exp()
                            * rho.powi(lag);
                    }
                }
            }
            CovSpec::Car1ConstProp => {
                let rho = decay_from_raw(raw[0]);
                let (a2, b2) = ((2.0 * raw[1]).exp(), (2.0 * raw[2]).exp());
                for i in 0..n {
                    for j in 0..n {
                        let (ti, tj) = (visits[i].1, visits[j].1);
                        out[(i, j)] = (a2 + b2 * ti * ti).sqrt()
                            * (a2 + b2 * tj * tj).sqrt()
                            * rho.powf((ti - tj).abs());
                    }
                }
            }
            CovSpec::Car1Exp => {
                let rho = decay_from_raw(raw[0]);
                let sigma2 = (2.0 * raw[1]).exp();
                let delta = DELTA_SCALE * raw[2];
                for i in 0..n {
                    for j in 0..n {
                        let (ti, tj) = (visits[i].1, visits[j].1);
                        out[(i, j)] = sigma2
                            * (delta * (ti + tj)).exp()
                            * rho.powf((ti - tj).abs());
                    }
                }
            }
            CovSpec::RandomIntercept => {
                let va = (2.0 * raw[0]).exp();
                let ve = (2.0 * raw[1]).exp();
                for i in 0..n {
                    for j in 0..n {
                        out[(i, j)] = va + if i == j { ve } else { 0.0 };
                    }
                }
            }
            CovSpec::RandomSlope => {
                let l = chol_from_raw(&raw[..3], 2);
                let g = &l * l.transpose();
                let ve = (2.0 * raw[3]).exp();
                for i in 0..n {
                    for j in 0..n {
                        let (ti, tj) = (visits[i].1, visits[j].1);
                        out[(i, j)] = g[(0, 0)]
                            + g[(0, 1)] * (ti + tj)
                            + g[(1, 1)] * ti * tj
                            + if i == j { ve } else { 0.0 };
                    }
                }
            }
        }
        Ok(out)
    }

    /// Partial derivatives of the subject covariance with respect to each raw
    /// coordinate, in parameter order.
    pub fn subject_cov_derivs(&self, visits: &[(u32, f64)]) -> Result<Vec<DMatrix<f64>>> {
        self.check_visits(visits)?;
        let n = visits.len();
        let raw = self.raw.as_slice();
        let q = self.spec.n_params();
        let mut out: Vec<DMatrix<f64>> = (0..q).map(|_| DMatrix::zeros(n, n)).collect();
        match self.spec {
            CovSpec::Unstructured { k } => {
                let l = chol_from_raw(raw, k);
                // dSigma/draw_{a,b} = s (e_a l_b^T + l_b e_a^T), s = L_aa on the diagonal
                for a in 0..k {
                    for b in 0..=a {
                        let p = tri_index(a, b);
                        let s = if a == b { l[(a, a)] } else { 1.0 };
                        let d = &mut out[p];
                        for i in 0..n {
                            for j in 0..n {
                                let (vi, vj) = (visits[i].0 as usize - 1, visits[j].0 as usize - 1);
                                let mut v = 0.0;
                                if vi == a {
                                    v += l[(vj, b)];
                                }
                                if vj == a {
                                    v += l[(vi, b)];
                                }
                                d[(i, j)] = s * v;
                            }
                        }
                    }
                }
            }
            CovSpec::HetAr1 { k } => {
                let sigma = self.subject_cov(visits)?;
                let rho = corr_from_raw(raw[k]);
                let drho = (1.0 - rho * rho) / 2.0;
                for i in 0..n {
                    for j in 0..n {
                        let (vi, vj) = (visits[i].0 as usize - 1, visits[j].0 as usize - 1);
                        let lag = (vi as i64 - vj as i64).unsigned_abs() as i32;
                        for p in 0..k {
                            let mult = (vi == p) as u8 + (vj == p) as u8;
                            if mult > 0 {
                                out[p][(i, j)] = sigma[(i, j)] * mult as f64;
                            }
                        }
                        if lag > 0 {
                            let sd2 = raw[vi].exp() * raw[vj].exp();
                            out[k][(i, j)] = sd2 * lag as f64 * rho.powi(lag - 1) * drho;
                        }
                    }
                }
            }
            CovSpec::Car1ConstProp => {
                let rho = decay_from_raw(raw[0]);
                let (a2, b2) = ((2.0 * raw[1]).exp(), (2.0 * raw[2]).exp());
                for i in 0..n {
                    for j in 0..n {
                        let (ti, tj) = (visits[i].1, visits[j].1);
                        let (vi2, vj2) = (a2 + b2 * ti * ti, a2 + b2 * tj * tj);
                        let (sdi, sdj) = (vi2.sqrt(), vj2.sqrt());
                        let dt = (ti - tj).abs();
                        let c = rho.powf(dt);
                        let s = sdi * sdj * c;
                        // d rho/dz = rho (1-rho)
                        out[0][(i, j)] = if dt > 0.0 { s * dt * (1.0 - rho) } else { 0.0 };
                        out[1][(i, j)] = s * a2 * (1.0 / vi2 + 1.0 / vj2);
                        out[2][(i, j)] =
                            s * b2 * (ti * ti / vi2 + tj * tj / vj2);
                    }
                }
            }
            CovSpec::Car1Exp => {
                let sigma = self.subject_cov(visits)?;
                let rho = decay_from_raw(raw[0]);
                for i in 0..n {
                    for j in 0..n {
                        let (ti, tj) = (visits[i].1, visits[j].1);
                        let dt = (ti - tj).abs();
                        out[0][(i, j)] = if dt > 0.0 {
                            sigma[(i, j)] * dt * (1.0 - rho)
                        } else {
                            0.0
                        };
                        out[1][(i, j)] = 2.0 * sigma[(i, j)];
                        out[2][(i, j)] = DELTA_SCALE * (ti + tj) * sigma[(i, j)];
                    }
                }
            }
            CovSpec::RandomIntercept => {
                let va = (2.0 * raw[0]).exp();
                let ve = (2.0 * raw[1]).exp();
                for i in 0..n {
                    for j in 0..n {
                        out[0][(i, j)] = 2.0 * va;
                        if i == j {
                            out[1][(i, j)] = 2.0 * ve;
                        }
                    }
                }
            }
            CovSpec::RandomSlope => {
                let l = chol_from_raw(&raw[..3], 2);
                let ve = (2.0 * raw[3]).exp();
                // dG for each of the three log-Cholesky coordinates
                for (p, (a, b)) in [(0usize, 0usize), (1, 0), (1, 1)].into_iter().enumerate() {
                    let s = if a == b { l[(a, a)] } else { 1.0 };
                    let mut dg = DMatrix::zeros(2, 2);
                    for r in 0..2 {
                        for c in 0..2 {
                            let mut v = 0.0;
                            if r == a {
                                v += l[(c, b)];
                            }
                            if c == a {
                                v += l[(r, b)];
                            }
                            dg[(r, c)] = s * v;
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            let (ti, tj) = (visits[i].1, visits[j].1);
                            out[p][(i, j)] = dg[(0, 0)]
                                + dg[(0, 1)] * tj
                                + dg[(1, 0)] * ti
                                + dg[(1, 1)] * ti * tj;
                        }
                    }
                }
                for i in 0..n {
                    out[3][(i, i)] = 2.0 * ve;
                }
            }
        }
        Ok(out)
    }
}

/// Moment-based starting values: per-visit (or pooled) residual variances
/// from a per-visit-mean pre-fit; correlations start at 0.3; delta at 0.
pub fn init_params(spec: CovSpec, data: &TrialData) -> Result<CovParams> {
    if data.n_obs() < 2 {
        return Err(Error::IncompatibleSpec(
            "need at least 2 observations to initialize".into(),
        ));
    }
    let stats = ResidualStats::from_data(data)?;
    let pooled = stats.pooled_var.max(1e-8);

    let raw = match spec {
        CovSpec::Unstructured { k } => {
            let mut sigma = DMatrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    let (vi, vj) = (stats.visit_var(i + 1), stats.visit_var(j + 1));
                    sigma[(i, j)] = if i == j {
                        vi
                    } else {
                        0.3 * (vi * vj).sqrt()
                    };
                }
            }
            let chol = sigma.cholesky().ok_or(Error::SingularHessian)?;
            raw_from_chol(&chol.l())
        }
        CovSpec::HetAr1 { k } => {
            let mut raw: Vec<f64> = (1..=k).map(|v| 0.5 * stats.visit_var(v).ln()).collect();
            raw.push(raw_from_corr(0.3));
            raw
        }
        CovSpec::Car1ConstProp => {
            let a2 = stats.visit_var(1).max(0.05 * pooled);
            let growth = (stats.max_visit_var - a2).max(0.05 * pooled);
            let b2 = growth / stats.t_max.max(1.0).powi(2);
            vec![
                raw_from_decay(stats.rho_per_month(0.3)),
                0.5 * a2.ln(),
                0.5 * b2.ln(),
            ]
        }
        CovSpec::Car1Exp => vec![
            raw_from_decay(stats.rho_per_month(0.3)),
            0.5 * stats.visit_var(1).max(0.05 * pooled).ln(),
            0.0,
        ],
        CovSpec::RandomIntercept => vec![0.5 * (0.3 * pooled).ln(), 0.5 * (0.7 * pooled).ln()],
        CovSpec::RandomSlope => {
            let g = DMatrix::from_row_slice(
                2,
                2,
                &[
                    0.3 * pooled,
                    0.0,
                    0.0,
                    0.3 * pooled / stats.t_max.max(1.0).powi(2),
                ],
            );
            let mut raw = raw_from_chol(&g.cholesky().unwrap().l());
            raw.push(0.5 * (0.7 * pooled).ln());
            raw
        }
    };
    Ok(CovParams::new(spec, DVector::from_vec(raw)))
}

/// Per-visit residual moments from a per-visit-mean pre-fit.
pub(crate) struct ResidualStats {
    visit_vars: Vec<(u32, f64)>,
    pub pooled_var: f64,
    pub max_visit_var: f64,
    pub t_max: f64,
    mean_gap: f64,
}

impl ResidualStats {
    pub fn from_data(data: &TrialData) -> Result<ResidualStats> {
        let cc = data.complete_cases()?;
        let mut by_visit: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
        for o in cc.observations() {
            by_visit.entry(o.visit_no).or_default().push(o.outcome.unwrap());
        }
        let mut residuals = Vec::new();
        let mut visit_vars = Vec::new();
        for (&v, ys) in &by_visit {
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let mut var = 0.0;
            for &y in ys {
                residuals.push(y - mean);
                var += (y - mean) * (y - mean);
            }
            if ys.len() > 1 {
                visit_vars.push((v, var / (ys.len() - 1) as f64));
            }
        }
        let n = residuals.len();
        let pooled_var = if n > 1 {
            residuals.iter().map(|r| r * r).sum::<f64>() / (n - 1) as f64
        } else {
            1.0
        };
        let t_max = cc
            .observations()
            .iter()
            .map(|o| o.actual_month)
            .fold(0.0, f64::max);
        let mut gaps = Vec::new();
        for subj in cc.subjects() {
            for w in subj.rows.windows(2) {
                gaps.push(w[1].actual_month - w[0].actual_month);
            }
        }
        let mean_gap = if gaps.is_empty() {
            6.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        };
        let max_visit_var = visit_vars
            .iter()
            .map(|&(_, v)| v)
            .fold(pooled_var, f64::max);
        Ok(ResidualStats {
            visit_vars,
            pooled_var,
            max_visit_var,
            t_max,
            mean_gap,
        })
    }

    pub fn visit_var(&self, visit: usize) -> f64 {
        self.visit_vars
            .iter()
            .find(|&&(v, _)| v as usize == visit)
            .map(|&(_, var)| var)
            .unwrap_or(self.pooled_var)
            .max(1e-8)
    }

    /// Per-month decay that reaches `target` correlation at the mean gap.
    pub fn rho_per_month(&self, target: f64) -> f64 {
        target.powf(1.0 / self.mean_gap.max(0.1)).clamp(1e-4, 1.0 - 1e-4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, Version};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Paper-derived AR1-like correlation band and per-visit scales.
    pub fn toeplitz_c() -> DMatrix<f64> {
        let band = [1.0, 0.791, 0.625, 0.494, 0.391, 0.309, 0.244, 0.193, 0.153, 0.121];
        DMatrix::from_fn(10, 10, |i, j| band[(i as i64 - j as i64).unsigned_abs() as usize])
    }

    const V: [f64; 10] = [2.934, 3.68, 3.597, 3.465, 3.361, 3.791, 4.008, 4.395, 4.886, 7.042];

    fn all_visits() -> Vec<(u32, f64)> {
        (1..=10).map(|v| (v, (v - 1) as f64 * 6.0)).collect()
    }

    #[test]
    fn unstructured_reproduces_scaled_correlation_matrix() {
        // diag(sqrt(v)) C diag(sqrt(v)) pushed through log-Cholesky and back
        let c = toeplitz_c();
        let target = DMatrix::from_fn(10, 10, |i, j| V[i].sqrt() * c[(i, j)] * V[j].sqrt());
        let params = CovParams::from_values(&CovValues::Unstructured { sigma: target.clone() }).unwrap();
        let got = params.subject_cov(&all_visits()).unwrap();
        assert_abs_diff_eq!((got - &target).amax(), 0.0, epsilon = 1e-10);
        // spot-check the lag structure
        let got = params.subject_cov(&all_visits()).unwrap();
        assert_abs_diff_eq!(got[(0, 1)], 0.791 * (V[0] * V[1]).sqrt(), epsilon = 1e-10);
        assert_abs_diff_eq!(got[(0, 2)], 0.625 * (V[0] * V[2]).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn car1exp_diagonal_at_time_zero() {
        let params = CovParams::from_values(&CovValues::Car1Exp {
            rho: 0.7,
            sigma: 1.3,
            delta: 0.2,
        })
        .unwrap();
        let m = params.subject_cov(&[(1, 0.0)]).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 1.3 * 1.3, epsilon = 1e-12);
    }

    #[test]
    fn random_intercept_compound_symmetry() {
        let params = CovParams::from_values(&CovValues::RandomIntercept {
            sd_intercept: 1.0,
            sd_residual: 1.0,
        })
        .unwrap();
        let m = params
            .subject_cov(&[(1, 0.0), (2, 6.0), (3, 12.0)])
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 2.0 } else { 1.0 };
                assert_abs_diff_eq!(m[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn visit_out_of_range() {
        let params = init_test_params(CovSpec::Unstructured { k: 3 });
        let err = params.subject_cov(&[(4, 18.0)]).unwrap_err();
        assert!(matches!(err, Error::VisitOutOfRange { visit: 4, k: 3 }));
    }

    #[test]
    fn single_observation_subject_all_kinds() {
        for spec in all_specs() {
            let params = init_test_params(spec);
            let m = params.subject_cov(&[(1, 0.0)]).unwrap();
            assert_eq!(m.nrows(), 1);
            assert!(m[(0, 0)] > 0.0);
        }
    }

    fn all_specs() -> Vec<CovSpec> {
        vec![
            CovSpec::Unstructured { k: 4 },
            CovSpec::HetAr1 { k: 4 },
            CovSpec::Car1ConstProp,
            CovSpec::Car1Exp,
            CovSpec::RandomIntercept,
            CovSpec::RandomSlope,
        ]
    }

    fn init_test_params(spec: CovSpec) -> CovParams {
        let q = spec.n_params();
        CovParams::new(spec, DVector::from_iterator(q, (0..q).map(|i| 0.1 * i as f64 - 0.2)))
    }

    #[test]
    fn restriction_consistency() {
        let full: Vec<(u32, f64)> = vec![(1, 0.0), (2, 5.7), (3, 12.4), (4, 17.9)];
        let sub_idx = [0usize, 2, 3];
        for spec in all_specs() {
            let params = init_test_params(spec);
            let big = params.subject_cov(&full).unwrap();
            let sub: Vec<(u32, f64)> = sub_idx.iter().map(|&i| full[i]).collect();
            let small = params.subject_cov(&sub).unwrap();
            for (a, &ia) in sub_idx.iter().enumerate() {
                for (b, &ib) in sub_idx.iter().enumerate() {
                    assert_abs_diff_eq!(small[(a, b)], big[(ia, ib)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn car1_depends_only_on_months() {
        for spec in [CovSpec::Car1ConstProp, CovSpec::Car1Exp] {
            let params = init_test_params(spec);
            let a = params
                .subject_cov(&[(1, 0.0), (2, 6.3), (3, 11.8)])
                .unwrap();
            let b = params
                .subject_cov(&[(7, 0.0), (2, 6.3), (9, 11.8)])
                .unwrap();
            assert_abs_diff_eq!((a - b).amax(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hetar1_equals_car1exp_with_zero_delta() {
        // equal per-visit SDs, equally spaced months, matched per-step rho
        let sd = 1.7;
        let rho_step: f64 = 0.6;
        let gap = 6.0;
        let het = CovParams::from_values(&CovValues::HetAr1 {
            sds: vec![sd; 5],
            rho: rho_step,
        })
        .unwrap();
        let car = CovParams::from_values(&CovValues::Car1Exp {
            rho: rho_step.powf(1.0 / gap),
            sigma: sd,
            delta: 0.0,
        })
        .unwrap();
        let visits: Vec<(u32, f64)> = (1..=5).map(|v| (v, (v - 1) as f64 * gap)).collect();
        let a = het.subject_cov(&visits).unwrap();
        let b = car.subject_cov(&visits).unwrap();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn derivs_match_finite_differences() {
        let visits: Vec<(u32, f64)> = vec![(1, 0.0), (2, 5.8), (4, 18.2)];
        for spec in all_specs() {
            let params = init_test_params(spec);
            let derivs = params.subject_cov_derivs(&visits).unwrap();
            let h = 1e-6;
            for p in 0..spec.n_params() {
                let mut up = params.clone();
                up.raw[p] += h;
                let mut dn = params.clone();
                dn.raw[p] -= h;
                let fd = (up.subject_cov(&visits).unwrap() - dn.subject_cov(&visits).unwrap())
                    / (2.0 * h);
                let gap = (&derivs[p] - fd).amax();
                assert!(gap < 1e-6, "{spec:?} param {p}: gap {gap}");
            }
        }
    }

    fn iid_data(var: f64) -> TrialData {
        // 40 subjects x 3 visits with deterministic mean-zero residuals of
        // empirical variance `var` around a per-visit mean
        let mut rows = Vec::new();
        let pattern = [-1.0, 1.0, -1.0, 1.0];
        for s in 0..40 {
            for v in 1..=3u32 {
                rows.push(Observation {
                    subject_id: format!("s{s}"),
                    arm: (s % 2) as u8,
                    visit_no: v,
                    target_month: (v - 1) as f64 * 6.0,
                    actual_month: (v - 1) as f64 * 6.0,
                    version: Version::for_visit(v),
                    covariates: vec![],
                    outcome: Some(5.0 + pattern[s % 4] * var.sqrt()),
                });
            }
        }
        TrialData::new(rows, vec![]).unwrap()
    }

    #[test]
    fn init_random_intercept_splits_empirical_variance() {
        let data = iid_data(4.0);
        let params = init_params(CovSpec::RandomIntercept, &data).unwrap();
        if let CovValues::RandomIntercept { sd_intercept, sd_residual } = params.values() {
            let total = sd_intercept * sd_intercept + sd_residual * sd_residual;
            // empirical variance 4 * n/(n-1)
            assert!((total - 4.0).abs() < 0.1, "total {total}");
        } else {
            panic!("wrong kind");
        }
    }

    #[test]
    fn init_unstructured_diag_is_per_visit_variance() {
        let data = iid_data(4.0);
        let params = init_params(CovSpec::Unstructured { k: 3 }, &data).unwrap();
        if let CovValues::Unstructured { sigma } = params.values() {
            // per-visit sample variance of the +-2 pattern
            let expect = 4.0 * 40.0 / 39.0;
            for i in 0..3 {
                assert_abs_diff_eq!(sigma[(i, i)], expect, epsilon = 1e-8);
            }
        } else {
            panic!("wrong kind");
        }
    }

    #[test]
    fn init_is_pd_for_every_spec() {
        let data = iid_data(2.5);
        for spec in all_specs().into_iter().map(|s| match s {
            CovSpec::Unstructured { .. } => CovSpec::Unstructured { k: 3 },
            CovSpec::HetAr1 { .. } => CovSpec::HetAr1 { k: 3 },
            other => other,
        }) {
            let params = init_params(spec, &data).unwrap();
            let visits: Vec<(u32, f64)> = (1..=3).map(|v| (v, (v - 1) as f64 * 6.0)).collect();
            let m = params.subject_cov(&visits).unwrap();
            assert!(m.cholesky().is_some(), "{spec:?} init not PD");
        }
    }

    #[test]
    fn transform_round_trip_exact_on_realistic_values() {
        let c = toeplitz_c();
        let sigma = DMatrix::from_fn(10, 10, |i, j| V[i].sqrt() * c[(i, j)] * V[j].sqrt());
        let cases = vec![
            CovValues::Unstructured { sigma },
            CovValues::HetAr1 { sds: V.iter().map(|v| v.sqrt()).collect(), rho: 0.79 },
            CovValues::Car1ConstProp { rho: 0.96, a: 1.7, b: 0.05 },
            CovValues::Car1Exp { rho: 0.96, sigma: 1.7, delta: 0.008 },
            CovValues::RandomIntercept { sd_intercept: 1.2, sd_residual: 0.9 },
            CovValues::RandomSlope {
                sd_intercept: 1.2,
                sd_slope: 0.04,
                corr: 0.3,
                sd_residual: 0.9,
            },
        ];
        for v in cases {
            let params = CovParams::from_values(&v).unwrap();
            let back = CovParams::from_values(&params.values()).unwrap();
            for i in 0..params.raw.len() {
                assert_abs_diff_eq!(back.raw[i], params.raw[i], epsilon = 1e-12);
            }
        }
    }

    /// The delta coordinate of Car1Exp lives on a per-month exponent scale;
    /// keep it physical so the checks are not drowned in rounding from
    /// variances spanning dozens of decades.
    fn scaled_raw(spec: CovSpec, raw: &[f64]) -> DVector<f64> {
        let mut v = raw[..spec.n_params()].to_vec();
        if spec == CovSpec::Car1Exp {
            v[2] *= 0.05;
        }
        DVector::from_vec(v)
    }

    proptest! {
        #[test]
        fn transform_round_trip(raw in proptest::collection::vec(-2.5f64..2.5, 10)) {
            for spec in all_specs() {
                let params = CovParams::new(spec, scaled_raw(spec, &raw));
                let back = CovParams::from_values(&params.values()).unwrap();
                for i in 0..params.raw.len() {
                    prop_assert!((back.raw[i] - params.raw[i]).abs() < 1e-8,
                        "{spec:?} coord {i}: {} vs {}", back.raw[i], params.raw[i]);
                }
            }
        }

        #[test]
        fn transform_is_always_pd(raw in proptest::collection::vec(-2.0f64..2.0, 10)) {
            let visits: Vec<(u32, f64)> = (1..=4).map(|v| (v, (v - 1) as f64 * 6.1)).collect();
            for spec in all_specs() {
                let params = CovParams::new(spec, scaled_raw(spec, &raw));
                let m = params.subject_cov(&visits).unwrap();
                let eig = m.symmetric_eigenvalues();
                prop_assert!(eig.iter().all(|&e| e > 0.0), "{spec:?}: eigenvalues {eig:?}");
            }
        }
    }
}

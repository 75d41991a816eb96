//! Shared test oracles, independent of the library's implementation paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use splinetrial::data::TrialData;
use splinetrial::fit::FitResult;

/// Truncated-power natural cubic spline basis (Hastie-style d_k construction).
/// Returns the design `[1, t, N_1(t), ..., N_{K-2}(t)]` over `points`, where
/// the knot set is boundary plus interior knots.
pub fn truncated_power_design(points: &[f64], boundary: (f64, f64), interior: &[f64]) -> DMatrix<f64> {
    let mut knots = vec![boundary.0];
    knots.extend_from_slice(interior);
    knots.push(boundary.1);
    let k = knots.len();
    let pos3 = |x: f64| if x > 0.0 { x * x * x } else { 0.0 };
    let d = |j: usize, t: f64| (pos3(t - knots[j]) - pos3(t - knots[k - 1])) / (knots[k - 1] - knots[j]);
    let ncols = k; // 1, t, and K-2 curvature terms
    let mut out = DMatrix::zeros(points.len(), ncols);
    for (i, &t) in points.iter().enumerate() {
        out[(i, 0)] = 1.0;
        out[(i, 1)] = t;
        for j in 0..k - 2 {
            out[(i, 2 + j)] = d(j, t) - d(k - 2, t);
        }
    }
    out
}

/// Orthogonal projection matrix onto the column space of `a`.
pub fn projection_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let q = qr.q();
    &q * q.transpose()
}

/// Max absolute difference between the projections onto two column spaces.
pub fn projection_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = projection_matrix(a);
    let pb = projection_matrix(b);
    (pa - pb).amax()
}

/// Direct per-subject Gaussian log-density at the fitted parameters.
pub fn direct_loglik(fit: &FitResult, data: &TrialData) -> f64 {
    let mut total = 0.0;
    for subj in data.subjects() {
        let visits: Vec<(u32, f64)> = subj
            .rows
            .iter()
            .map(|o| (o.visit_no, o.actual_month))
            .collect();
        let sigma = fit.cov_params.subject_cov(&visits).unwrap();
        let n = visits.len();
        let mut r = DVector::zeros(n);
        for (i, o) in subj.rows.iter().enumerate() {
            let row = fit.model.design_row(o).unwrap();
            r[i] = o.outcome.unwrap() - row.dot(&fit.beta);
        }
        let det = sigma.determinant();
        let inv = sigma.try_inverse().unwrap();
        let quad = (r.transpose() * &inv * &r)[(0, 0)];
        total += -0.5 * (det.ln() + quad + n as f64 * (2.0 * std::f64::consts::PI).ln());
    }
    total
}

/// Direct density at perturbed covariance parameters with the mean re-solved
/// by GLS (profile value), via explicit per-subject algebra.
pub fn direct_loglik_at(fit: &FitResult, data: &TrialData) -> f64 {
    let p = fit.beta.len();
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut blocks = Vec::new();
    for subj in data.subjects() {
        let visits: Vec<(u32, f64)> = subj
            .rows
            .iter()
            .map(|o| (o.visit_no, o.actual_month))
            .collect();
        let sigma = fit.cov_params.subject_cov(&visits).unwrap();
        let inv = sigma.clone().try_inverse().unwrap();
        let n = visits.len();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        for (i, o) in subj.rows.iter().enumerate() {
            x.set_row(i, &fit.model.design_row(o).unwrap().transpose());
            y[i] = o.outcome.unwrap();
        }
        m += x.transpose() * &inv * &x;
        b += x.transpose() * &inv * &y;
        blocks.push((x, y, sigma, inv));
    }
    let beta = m.try_inverse().unwrap() * b;
    let mut total = 0.0;
    for (x, y, sigma, inv) in blocks {
        let r = y - x * &beta;
        let quad = (r.transpose() * &inv * &r)[(0, 0)];
        total += -0.5
            * (sigma.determinant().ln()
                + quad
                + r.len() as f64 * (2.0 * std::f64::consts::PI).ln());
    }
    total
}

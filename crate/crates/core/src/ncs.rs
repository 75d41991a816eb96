//! Natural cubic spline bases with knots at quantiles of observed times.
//!
//! The basis is built from order-4 B-splines on the interior knots (boundary
//! knots repeated to multiplicity 4), with the two natural constraints
//! (zero second derivative at each boundary) imposed by projecting onto the
//! trailing columns of the Q factor of the constraint matrix, and the
//! intercept column dropped. Evaluation beyond the boundary continues each
//! basis function linearly with the slope attained at the boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frozen natural cubic spline basis: boundary, interior knots, and the
/// constraint projection. `m = interior.len() + 1` basis functions
/// (intercept excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct SplineBasis {
    boundary: (f64, f64),
    interior: Vec<f64>,
    /// Augmented knot vector: boundary knots at multiplicity 4.
    aug: Vec<f64>,
    /// (k+3) x (k+1) projection from the intercept-dropped B-spline columns
    /// onto the natural-constraint null space.
    proj: DMatrix<f64>,
}

/// Serialized form: boundary and knots fully determine the basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSpec {
    pub boundary: (f64, f64),
    pub interior_knots: Vec<f64>,
}

impl From<SplineBasis> for BasisSpec {
    fn from(b: SplineBasis) -> BasisSpec {
        BasisSpec {
            boundary: b.boundary,
            interior_knots: b.interior,
        }
    }
}

impl TryFrom<BasisSpec> for SplineBasis {
    type Error = Error;
    fn try_from(s: BasisSpec) -> Result<SplineBasis> {
        SplineBasis::with_knots(s.boundary, s.interior_knots)
    }
}

/// Interpolated quantile of a sorted sample (the common "type 7" rule).
fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
    }
}

impl SplineBasis {
    /// Basis with boundary at the range of `times` and `df - 1` interior
    /// knots at quantiles 1/df, ..., (df-1)/df of the time sample
    /// (duplicates kept). `m = df`.
    pub fn from_times(times: &[f64], df: usize) -> Result<SplineBasis> {
        if df < 1 {
            return Err(Error::DegenerateTimes("df must be >= 1".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::DegenerateTimes("non-finite time".into()));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut distinct = 1usize;
        for w in sorted.windows(2) {
            if w[1] > w[0] {
                distinct += 1;
            }
        }
        if sorted.is_empty() || distinct < df + 1 {
            return Err(Error::DegenerateTimes(format!(
                "need at least {} distinct times for df={}, found {}",
                df + 1,
                df,
                distinct
            )));
        }
        let boundary = (sorted[0], sorted[sorted.len() - 1]);
        let interior: Vec<f64> = (1..df)
            .map(|i| quantile_type7(&sorted, i as f64 / df as f64))
            .collect();
        for &k in &interior {
            if k <= boundary.0 || k >= boundary.1 {
                return Err(Error::DegenerateTimes(format!(
                    "quantile knot {k} falls on the boundary"
                )));
            }
        }
        Self::with_knots(boundary, interior)
    }

    /// Basis with explicitly given boundary and interior knots.
    pub fn with_knots(boundary: (f64, f64), interior: Vec<f64>) -> Result<SplineBasis> {
        let (b0, b1) = boundary;
        if !b0.is_finite() || !b1.is_finite() || b0 >= b1 {
            return Err(Error::KnotOrdering(format!(
                "boundary ({b0}, {b1}) is not an ordered pair"
            )));
        }
        for w in interior.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::KnotOrdering(format!(
                    "interior knots not sorted/distinct at {}",
                    w[1]
                )));
            }
        }
        if let (Some(&first), Some(&last)) = (interior.first(), interior.last()) {
            if first <= b0 || last >= b1 {
                return Err(Error::KnotOrdering(format!(
                    "interior knots [{first}, {last}] must lie strictly inside ({b0}, {b1})"
                )));
            }
        }
        let mut aug = vec![b0; 4];
        aug.extend_from_slice(&interior);
        aug.extend_from_slice(&[b1; 4]);

        let n_b = interior.len() + 4;
        // Natural constraints: second derivative of the full B-spline basis
        // at each boundary, intercept column dropped.
        let d2_lo = bspline_row(&aug, b0, 2);
        let d2_hi = bspline_row(&aug, b1, 2);
        let mut constraint = DMatrix::zeros(n_b - 1, 2);
        for i in 1..n_b {
            constraint[(i - 1, 0)] = d2_lo[i];
            constraint[(i - 1, 1)] = d2_hi[i];
        }
        let proj = constraint_null_basis(&constraint);

        Ok(SplineBasis {
            boundary,
            interior,
            aug,
            proj,
        })
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    /// Basis dimension (intercept excluded).
    pub fn m(&self) -> usize {
        self.interior.len() + 1
    }

    fn project(&self, full: &[f64]) -> DVector<f64> {
        let n_b = full.len();
        let mut out = DVector::zeros(self.m());
        for j in 0..self.m() {
            let mut acc = 0.0;
            for i in 1..n_b {
                acc += full[i] * self.proj[(i - 1, j)];
            }
            out[j] = acc;
        }
        out
    }

    /// Evaluate (b_1(t), ..., b_m(t)). Linear continuation beyond the boundary.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (b0, b1) = self.boundary;
        if t < b0 {
            let v = self.project(&bspline_row(&self.aug, b0, 0));
            let d = self.project(&bspline_row(&self.aug, b0, 1));
            v + d * (t - b0)
        } else if t > b1 {
            let v = self.project(&bspline_row(&self.aug, b1, 0));
            let d = self.project(&bspline_row(&self.aug, b1, 1));
            v + d * (t - b1)
        } else {
            self.project(&bspline_row(&self.aug, t, 0))
        }
    }

    /// First derivative of each basis function.
    pub fn eval_deriv(&self, t: f64) -> DVector<f64> {
        let (b0, b1) = self.boundary;
        let at = t.clamp(b0, b1);
        self.project(&bspline_row(&self.aug, at, 1))
    }

    /// Exact second derivative; zero for t <= t_min and t >= t_max.
    pub fn eval_deriv2(&self, t: f64) -> DVector<f64> {
        let (b0, b1) = self.boundary;
        if t <= b0 || t >= b1 {
            return DVector::zeros(self.m());
        }
        self.project(&bspline_row(&self.aug, t, 2))
    }
}

/// All order-4 B-spline basis function values (or derivatives of the given
/// order, up to 2) at `t`, which must lie within the augmented knot range.
fn bspline_row(aug: &[f64], t: f64, deriv: usize) -> Vec<f64> {
    let n_knots = aug.len();
    let n1 = n_knots - 1; // order-1 count
    debug_assert!(t >= aug[0] && t <= aug[n_knots - 1]);

    // Order-1 indicators; right-closed on the final nonempty interval.
    let mut b1 = vec![0.0; n1];
    let t_max = aug[n_knots - 1];
    if t >= t_max {
        for i in (0..n1).rev() {
            if aug[i] < aug[i + 1] {
                b1[i] = 1.0;
                break;
            }
        }
    } else {
        for i in 0..n1 {
            if aug[i] <= t && t < aug[i + 1] {
                b1[i] = 1.0;
                break;
            }
        }
    }

    let raise = |lower: &[f64], m: usize| -> Vec<f64> {
        // B_{i,m} from B_{.,m-1}
        let count = n_knots - m;
        let mut out = vec![0.0; count];
        for i in 0..count {
            let d1 = aug[i + m - 1] - aug[i];
            let d2 = aug[i + m] - aug[i + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += (t - aug[i]) / d1 * lower[i];
            }
            if d2 > 0.0 {
                v += (aug[i + m] - t) / d2 * lower[i + 1];
            }
            out[i] = v;
        }
        out
    };
    let diff = |lower: &[f64], m: usize| -> Vec<f64> {
        // d/dt B_{i,m} = (m-1) (B_{i,m-1}/(k_{i+m-1}-k_i) - B_{i+1,m-1}/(k_{i+m}-k_{i+1}))
        let count = n_knots - m;
        let mut out = vec![0.0; count];
        for i in 0..count {
            let d1 = aug[i + m - 1] - aug[i];
            let d2 = aug[i + m] - aug[i + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += lower[i] / d1;
            }
            if d2 > 0.0 {
                v -= lower[i + 1] / d2;
            }
            out[i] = (m as f64 - 1.0) * v;
        }
        out
    };

    let b2 = raise(&b1, 2);
    let b3 = raise(&b2, 3);
    match deriv {
        0 => raise(&b3, 4),
        1 => diff(&b3, 4),
        2 => {
            let b3d = diff(&b2, 3);
            diff(&b3d, 4)
        }
        _ => panic!("derivative order {deriv} not supported"),
    }
}

/// Orthonormal basis for the null space of the two natural constraints:
/// the trailing columns of Q from a Householder QR of the constraint matrix
/// (LINPACK sign convention: reflector v = x + sign(x_1)||x|| e_1).
fn constraint_null_basis(constraint: &DMatrix<f64>) -> DMatrix<f64> {
    let n = constraint.nrows();
    let mut work = constraint.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(2);
    for col in 0..2 {
        let mut v = DVector::zeros(n);
        for i in col..n {
            v[i] = work[(i, col)];
        }
        let norm = v.norm();
        if norm == 0.0 {
            reflectors.push(DVector::zeros(n));
            continue;
        }
        let alpha = if v[col] != 0.0 { norm.copysign(v[col]) } else { norm };
        v[col] += alpha;
        let vtv = v.dot(&v);
        // apply to remaining columns of work
        for c in col..2 {
            let mut dot = 0.0;
            for i in col..n {
                dot += v[i] * work[(i, c)];
            }
            let s = 2.0 * dot / vtv;
            for i in col..n {
                work[(i, c)] -= s * v[i];
            }
        }
        reflectors.push(v);
    }
    // Q = H1 H2; keep columns 2..n
    let mut out = DMatrix::zeros(n, n - 2);
    for (j, col) in (2..n).enumerate() {
        let mut q = DVector::zeros(n);
        q[col] = 1.0;
        for v in reflectors.iter().rev() {
            let vtv = v.dot(v);
            if vtv == 0.0 {
                continue;
            }
            let s = 2.0 * v.dot(&q) / vtv;
            q -= v * s;
        }
        out.set_column(j, &q);
    }
    out
}

//! The spanned function space is the contract: the implementation's basis and
//! an independent truncated-power natural-spline construction must produce
//! identical projection matrices over any sample.

mod common;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use splinetrial::SplineBasis;

fn ns_design(basis: &SplineBasis, points: &[f64]) -> DMatrix<f64> {
    let m = basis.m();
    let mut out = DMatrix::zeros(points.len(), m + 1);
    for (i, &t) in points.iter().enumerate() {
        out[(i, 0)] = 1.0;
        let row = basis.eval(t);
        for j in 0..m {
            out[(i, 1 + j)] = row[j];
        }
    }
    out
}

#[test]
fn spans_truncated_power_space_on_random_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20 {
        let n_interior = rng.gen_range(1..=3);
        let lo = rng.gen_range(-5.0..5.0);
        let hi = lo + rng.gen_range(10.0..60.0);
        let mut interior: Vec<f64> = (0..n_interior)
            .map(|_| rng.gen_range(lo + 1.0..hi - 1.0))
            .collect();
        interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
        interior.dedup_by(|a, b| (*a - *b).abs() < 1.0);

        let basis = SplineBasis::with_knots((lo, hi), interior.clone()).unwrap();
        let n = 40;
        let mut points: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        points.push(lo);
        points.push(hi);

        let a = ns_design(&basis, &points);
        let b = common::truncated_power_design(&points, (lo, hi), &interior);
        let gap = common::projection_gap(&a, &b);
        assert!(
            gap < 1e-8,
            "trial {trial}: projection gap {gap} for knots {interior:?} on ({lo}, {hi})"
        );
    }
}

#[test]
fn affine_recombination_gives_identical_fitted_values() {
    // fitting y ~ 1 + basis(t) against any nonsingular recombination of the
    // same space must reproduce the same fitted values
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let basis = SplineBasis::with_knots((0.0, 54.0), vec![18.0, 36.0]).unwrap();
    let points: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..54.0)).collect();
    let y = nalgebra::DVector::from_iterator(60, points.iter().map(|&t| (t * 0.21).sin() + 0.01 * t));

    let a = ns_design(&basis, &points);
    // recombine: columns mixed by a random nonsingular matrix (constant kept)
    let m = basis.m() + 1;
    let mut mix = DMatrix::<f64>::zeros(m, m);
    loop {
        for v in mix.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        if mix.clone().lu().is_invertible() {
            break;
        }
    }
    let b = &a * &mix;

    let fitted = |x: &DMatrix<f64>| {
        let p = common::projection_matrix(x);
        &p * &y
    };
    let diff = (fitted(&a) - fitted(&b)).amax();
    assert!(diff < 1e-8, "fitted values differ by {diff}");
}

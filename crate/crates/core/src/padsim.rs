//! Simulated preclinical-AD trial generator.
//!
//! Produces long-format trials with a spline-shaped placebo trajectory,
//! subject covariates, a ten-visit schedule with month jitter and optional
//! pandemic-style visit delays, informative-free dropout, correlated
//! within-subject residuals, and a delayed-onset treatment effect that is
//! linear in visit number.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, WeightedIndex};

use crate::data::{Observation, TrialData, Version};
use crate::error::Result;
use crate::ncs::SplineBasis;

/// Number of scheduled visits.
pub const N_VISITS: u32 = 10;

/// Months between scheduled visits.
pub const VISIT_SPACING: f64 = 6.0;

/// Trial design knobs. Defaults give the standard scenario; set `covid`
/// for the delayed-visit variant.
#[derive(Debug, Clone)]
pub struct PadConfig {
    pub n_subjects: usize,
    /// SD of the per-visit month jitter (visit 1 is always at month 0).
    pub jitter_sd: f64,
    /// Apply per-subject visit delays from a truncated normal, starting at
    /// a uniformly drawn visit in 5..=10.
    pub covid: bool,
    /// Treatment effect at the final visit, in outcome units.
    pub delta: f64,
    /// Last visit with zero effect; the effect then grows linearly in
    /// visit number, reaching `delta` at the final visit.
    pub effect_onset_visit: u32,
    pub seed: u64,
}

impl Default for PadConfig {
    fn default() -> Self {
        PadConfig {
            n_subjects: 1000,
            jitter_sd: 0.8,
            covid: false,
            delta: 1.4,
            effect_onset_visit: 4,
            seed: 0,
        }
    }
}

/// Education offsets (years, centered) and their sampling weights.
const EDU_VALUES: [f64; 15] = [
    -10.4, -9.4, -8.4, -7.4, -6.4, -5.4, -4.4, -3.4, -2.4, -1.4, -0.4, 0.6, 1.6, 2.6, 3.6,
];
const EDU_WEIGHTS: [f64; 15] = [
    0.001, 0.001, 0.003, 0.001, 0.004, 0.001, 0.072, 0.036, 0.108, 0.042, 0.247, 0.039, 0.234,
    0.052, 0.159,
];

/// Dropout distribution: probability that a subject's last visit is
/// visit 1..=9 (each 0.033) or visit 10 (0.703).
const LAST_VISIT_WEIGHTS: [f64; 10] = [
    0.033, 0.033, 0.033, 0.033, 0.033, 0.033, 0.033, 0.033, 0.033, 0.703,
];

/// The generating mean and covariance model: a natural cubic spline
/// placebo trajectory over years plus covariate and test-version effects,
/// with a banded-correlation residual covariance across the ten visits.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub basis: SplineBasis,
    pub intercept: f64,
    pub spline_coefs: [f64; 4],
    pub apoe4_coef: f64,
    pub edu_coef: f64,
    pub age_coef: f64,
    pub version_b: f64,
    pub version_c: f64,
    /// Per-visit residual standard deviations.
    pub sds: [f64; 10],
    /// Lower Cholesky factor of the 10x10 residual covariance.
    chol: DMatrix<f64>,
}

/// First row of the symmetric banded residual correlation matrix; entry j
/// is the correlation at lag j.
const CORR_ROW: [f64; 10] = [1.0, 0.791, 0.625, 0.494, 0.391, 0.309, 0.244, 0.193, 0.153, 0.121];

const SDS: [f64; 10] = [2.934, 3.68, 3.597, 3.465, 3.361, 3.791, 4.008, 4.395, 4.886, 7.042];

impl GeneratorModel {
    /// The cohort-calibrated generator used throughout the power study.
    pub fn standard() -> GeneratorModel {
        let basis = SplineBasis::with_knots(
            (0.0, 8.476386),
            vec![0.4736482, 1.9657769, 4.0082136],
        )
        .expect("valid generator knots");
        let n = 10;
        let mut sigma = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let lag = i.abs_diff(j);
                sigma[(i, j)] = SDS[i] * SDS[j] * CORR_ROW[lag];
            }
        }
        let chol = sigma
            .cholesky()
            .expect("generator covariance is PD")
            .l();
        GeneratorModel {
            basis,
            intercept: 0.2800923,
            spline_coefs: [0.04380665, -0.4601309, -2.232262, -3.509172],
            apoe4_coef: -0.172294862,
            edu_coef: 0.247813736,
            age_coef: -0.125623763,
            version_b: 0.126458100,
            version_c: 0.266977394,
            sds: SDS,
            chol,
        }
    }

    /// Mean outcome (placebo arm, no residual) at `month` for a subject
    /// with the given covariates taking the given test version.
    pub fn fixed_part(
        &self,
        month: f64,
        apoe4: f64,
        edu: f64,
        age: f64,
        version: Version,
    ) -> f64 {
        let yrs = month / 12.0;
        let b = self.basis.eval(yrs);
        let mut y = self.intercept;
        for k in 0..4 {
            y += self.spline_coefs[k] * b[k];
        }
        y += self.apoe4_coef * apoe4 + self.edu_coef * edu + self.age_coef * age;
        y += match version {
            Version::A => 0.0,
            Version::B => self.version_b,
            Version::C => self.version_c,
        };
        y
    }

    /// One correlated residual draw across all ten visits.
    fn residual_draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let std = Normal::new(0.0, 1.0).unwrap();
        let z = DVector::from_fn(10, |_, _| std.sample(rng));
        &self.chol * z
    }
}

/// Per-subject design quantities drawn once per trial.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: usize,
    /// 0 = placebo, 1 = active.
    pub arm: u8,
    pub age: f64,
    pub edu: f64,
    pub apoe4: f64,
    pub covid_delay: f64,
    pub covid_start_visit: u32,
    pub last_visit: u32,
}

/// One scheduled (pre-dropout-filtered) visit row.
#[derive(Debug, Clone)]
pub struct VisitRow {
    pub subject: usize,
    pub visit_no: u32,
    pub target_month: f64,
    pub actual_month: f64,
    pub version: Version,
}

/// Truncated-normal draw by rejection from the parent normal.
fn truncated_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let parent = Normal::new(mean, sd).unwrap();
    loop {
        let x = parent.sample(rng);
        if x >= lo && x <= hi {
            return x;
        }
    }
}

/// Draw the per-subject table: covariates, arm, pandemic-delay
/// parameters, and last completed visit.
pub fn gen_subjects<R: Rng>(config: &PadConfig, rng: &mut R) -> Vec<Subject> {
    let age_dist = Normal::new(0.0, 6.0).unwrap();
    let edu_dist = WeightedIndex::new(EDU_WEIGHTS).unwrap();
    let apoe4_dist = Bernoulli::new(0.3).unwrap();
    let arm_dist = Bernoulli::new(0.5).unwrap();
    let last_dist = WeightedIndex::new(LAST_VISIT_WEIGHTS).unwrap();
    (0..config.n_subjects)
        .map(|id| {
            let age = age_dist.sample(rng);
            let edu = EDU_VALUES[edu_dist.sample(rng)];
            let apoe4 = if apoe4_dist.sample(rng) { 1.0 } else { 0.0 };
            let arm = u8::from(arm_dist.sample(rng));
            let covid_delay = truncated_normal(rng, 6.0, 3.0, 4.0, 12.0);
            let covid_start_visit = rng.gen_range(5..=N_VISITS);
            let last_visit = last_dist.sample(rng) as u32 + 1;
            Subject {
                id,
                arm,
                age,
                edu,
                apoe4,
                covid_delay,
                covid_start_visit,
                last_visit,
            }
        })
        .collect()
}

/// Build the observed visit schedule: visit 1 at month 0 exactly, later
/// visits jittered around the 6-month grid, pandemic delays applied
/// uniformly from each subject's start visit onward, and visits after the
/// subject's last visit dropped.
pub fn gen_visits<R: Rng>(
    subjects: &[Subject],
    config: &PadConfig,
    rng: &mut R,
) -> Vec<VisitRow> {
    let jitter = Normal::new(0.0, config.jitter_sd.max(0.0)).unwrap();
    let mut rows = Vec::new();
    for subj in subjects {
        for v in 1..=N_VISITS {
            // Draw every jitter so the stream does not depend on dropout.
            let j = if v == 1 { 0.0 } else { jitter.sample(rng) };
            if v > subj.last_visit {
                continue;
            }
            let target = (v - 1) as f64 * VISIT_SPACING;
            let mut month = target + j;
            if config.covid && v >= subj.covid_start_visit {
                month += subj.covid_delay;
            }
            rows.push(VisitRow {
                subject: subj.id,
                visit_no: v,
                target_month: target,
                actual_month: month,
                version: Version::for_visit(v),
            });
        }
    }
    rows
}

/// Treatment effect at a given visit number: zero through the onset
/// visit, then linear in visit number up to `delta` at the final visit.
pub fn effect_at_visit(config: &PadConfig, visit_no: u32) -> f64 {
    if visit_no <= config.effect_onset_visit {
        0.0
    } else {
        let span = (N_VISITS - config.effect_onset_visit) as f64;
        config.delta * (visit_no - config.effect_onset_visit) as f64 / span
    }
}

/// Assemble outcomes: fixed part + the observed subvector of a full
/// ten-visit correlated residual draw + (if `effect_on`) the treatment
/// effect for active-arm subjects.
pub fn gen_outcomes<R: Rng>(
    subjects: &[Subject],
    schedule: &[VisitRow],
    model: &GeneratorModel,
    config: &PadConfig,
    rng: &mut R,
    effect_on: bool,
) -> Result<TrialData> {
    let resids: Vec<DVector<f64>> = subjects.iter().map(|_| model.residual_draw(rng)).collect();
    let mut rows = Vec::with_capacity(schedule.len());
    for vr in schedule {
        let subj = &subjects[vr.subject];
        let mut y = model.fixed_part(vr.actual_month, subj.apoe4, subj.edu, subj.age, vr.version)
            + resids[vr.subject][(vr.visit_no - 1) as usize];
        if effect_on && subj.arm == 1 {
            y += effect_at_visit(config, vr.visit_no);
        }
        rows.push(Observation {
            subject_id: format!("s{:04}", subj.id),
            arm: subj.arm,
            visit_no: vr.visit_no,
            target_month: vr.target_month,
            actual_month: vr.actual_month,
            version: vr.version,
            covariates: vec![subj.apoe4, subj.age, subj.edu],
            outcome: Some(y),
        });
    }
    TrialData::new(
        rows,
        vec!["apoe4".into(), "age".into(), "edu".into()],
    )
}

/// Generate one complete trial from `config.seed`.
pub fn simulate(config: &PadConfig, model: &GeneratorModel, effect_on: bool) -> Result<TrialData> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let subjects = gen_subjects(config, &mut rng);
    let schedule = gen_visits(&subjects, config, &mut rng);
    gen_outcomes(&subjects, &schedule, model, config, &mut rng, effect_on)
}

/// Derive a per-replicate seed from a master seed (splitmix64 finalizer
/// over the pair), so replicates are independent and order-free.
pub fn replicate_seed(master: u64, replicate: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(replicate.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, seed: u64) -> PadConfig {
        PadConfig {
            n_subjects: n,
            seed,
            ..PadConfig::default()
        }
    }

    #[test]
    fn dropout_fraction_matches_design() {
        let config = cfg(100_000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let subjects = gen_subjects(&config, &mut rng);
        let dropped = subjects.iter().filter(|s| s.last_visit < 10).count();
        let frac = dropped as f64 / subjects.len() as f64;
        assert!((frac - 0.297).abs() < 0.005, "dropout fraction {frac}");
    }

    #[test]
    fn apoe4_prevalence() {
        let config = cfg(100_000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let subjects = gen_subjects(&config, &mut rng);
        let mean = subjects.iter().map(|s| s.apoe4).sum::<f64>() / subjects.len() as f64;
        assert!((mean - 0.30).abs() < 0.005, "APOE4 mean {mean}");
    }

    #[test]
    fn same_seed_same_trial() {
        let model = GeneratorModel::standard();
        let config = cfg(200, 7);
        let a = simulate(&config, &model, true).unwrap();
        let b = simulate(&config, &model, true).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn first_visit_at_month_zero() {
        let model = GeneratorModel::standard();
        let mut config = cfg(500, 3);
        config.covid = true;
        let data = simulate(&config, &model, false).unwrap();
        for obs in data.observations() {
            if obs.visit_no == 1 {
                assert_eq!(obs.actual_month, 0.0);
            }
        }
    }

    #[test]
    fn covid_delay_shifts_from_start_visit() {
        let mut config = cfg(1, 0);
        config.covid = true;
        config.jitter_sd = 0.0;
        let subjects = vec![Subject {
            id: 0,
            arm: 0,
            age: 0.0,
            edu: 0.0,
            apoe4: 0.0,
            covid_delay: 6.0,
            covid_start_visit: 5,
            last_visit: 10,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = gen_visits(&subjects, &config, &mut rng);
        let by_visit: Vec<f64> = sched.iter().map(|r| r.actual_month).collect();
        // visits 1-4 on schedule, visits 5-10 shifted by exactly 6 months
        assert_eq!(&by_visit[..4], &[0.0, 6.0, 12.0, 18.0]);
        assert_eq!(&by_visit[4..], &[30.0, 36.0, 42.0, 48.0, 54.0, 60.0]);
        // delays never reorder visits
        for w in by_visit.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn effect_schedule() {
        let config = PadConfig::default();
        for v in 1..=4 {
            assert_eq!(effect_at_visit(&config, v), 0.0);
        }
        assert!((effect_at_visit(&config, 10) - 1.4).abs() < 1e-15);
        assert!((effect_at_visit(&config, 7) - 1.4 * 3.0 / 6.0).abs() < 1e-15);

        // the same numbers must appear in generated outcomes: run the
        // identical stream with the effect on and off and difference them
        let model = GeneratorModel::standard();
        let config = cfg(50, 11);
        let on = simulate(&config, &model, true).unwrap();
        let off = simulate(&config, &model, false).unwrap();
        for (a, b) in on.observations().iter().zip(off.observations()) {
            let diff = a.outcome.unwrap() - b.outcome.unwrap();
            let expect = if a.arm == 1 {
                effect_at_visit(&config, a.visit_no)
            } else {
                0.0
            };
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_moments_match_generator() {
        let model = GeneratorModel::standard();
        let mut config = cfg(100_000, 5);
        config.jitter_sd = 0.0; // keep visits on-grid so visits align
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut subjects = gen_subjects(&config, &mut rng);
        for s in &mut subjects {
            s.last_visit = 10; // full panels for the moment check
        }
        let schedule = gen_visits(&subjects, &config, &mut rng);
        let data =
            gen_outcomes(&subjects, &schedule, &model, &config, &mut rng, false).unwrap();

        // recover residuals by subtracting the known fixed part
        let n = subjects.len();
        let mut resid = vec![vec![0.0f64; 10]; n];
        for obs in data.observations() {
            let s: usize = obs.subject_id[1..].parse().unwrap();
            let subj = &subjects[s];
            let f = model.fixed_part(obs.actual_month, subj.apoe4, subj.edu, subj.age, obs.version);
            resid[s][(obs.visit_no - 1) as usize] = obs.outcome.unwrap() - f;
        }
        for v in 0..10 {
            let mean = resid.iter().map(|r| r[v]).sum::<f64>() / n as f64;
            let var = resid.iter().map(|r| (r[v] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            assert!(
                (sd - model.sds[v]).abs() / model.sds[v] < 0.03,
                "visit {} sd {} expected {}",
                v + 1,
                sd,
                model.sds[v]
            );
        }
        // lag-1 correlation pooled over adjacent visit pairs
        let mut num = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for v in 0..9 {
            let m1 = resid.iter().map(|r| r[v]).sum::<f64>() / n as f64;
            let m2 = resid.iter().map(|r| r[v + 1]).sum::<f64>() / n as f64;
            for r in &resid {
                num += (r[v] - m1) * (r[v + 1] - m2);
                d1 += (r[v] - m1).powi(2);
                d2 += (r[v + 1] - m2).powi(2);
            }
        }
        let lag1 = num / (d1 * d2).sqrt();
        assert!((lag1 - 0.791).abs() < 0.01, "lag-1 corr {lag1}");
    }

    #[test]
    fn arms_identical_in_law_without_effect() {
        let model = GeneratorModel::standard();
        let config = cfg(10_000, 13);
        let data = simulate(&config, &model, false).unwrap();
        // two-sample KS on final-visit outcomes by arm
        let mut a: Vec<f64> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        for obs in data.observations() {
            if obs.visit_no == 10 {
                if obs.arm == 0 {
                    a.push(obs.outcome.unwrap());
                } else {
                    b.push(obs.outcome.unwrap());
                }
            }
        }
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        let lambda = d * (na * nb / (na + nb)).sqrt();
        // asymptotic Kolmogorov tail
        let p: f64 = 2.0
            * (1..=100)
                .map(|k| {
                    (-1.0f64).powi(k as i32 - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp()
                })
                .sum::<f64>();
        assert!(p > 0.001, "KS p-value {p} (D={d})");
    }

    #[test]
    fn replicate_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for master in [0u64, 20211128] {
            for rep in 0..1000 {
                assert!(seen.insert(replicate_seed(master, rep)));
            }
        }
    }
}

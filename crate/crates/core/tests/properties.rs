//! Posterior, simulation and test-statistic properties.

mod common;

use std::collections::BTreeMap;

use common::fake_fit;
use lirt_core::exec::Serial;
use lirt_core::inference::lrt;
use lirt_core::measurement::{category_probs, ItemParams};
use lirt_core::parameters::NaturalParams;
use lirt_core::posterior::{individual_trajectory, marginal_trajectory, subject_random_effects, TrajectoryRequest};
use lirt_core::simulate::{prediala_design, simulate_dataset, CovariateGenerator, SimDesign, VisitSchedule};
use lirt_core::timebasis::{DesignSpec, Term, TimeBasis};
use lirt_core::{ItemDef, LongDataset, ModelSpec, Observation};

fn prediala_fit() -> lirt_core::FitResult {
    let d = prediala_design(10, 1);
    fake_fit(&d.spec, &d.truth, 1e-3)
}

fn reference() -> BTreeMap<String, f64> {
    [("group".to_string(), 0.0)].into()
}

#[test]
fn reference_profile_starts_at_zero() {
    let fit = prediala_fit();
    let mut req = TrajectoryRequest::new(vec![0.0], reference());
    req.n_draws = 0;
    let s = marginal_trajectory(&fit, &req, &Serial).unwrap();
    assert_eq!(s.estimate[0], 0.0);
}

#[test]
fn doubling_beta_doubles_prediction() {
    let fit = prediala_fit();
    let mut doubled = fit.clone();
    let nf = fit.spec.n_fixed();
    for b in &mut doubled.theta[..nf] {
        *b *= 2.0;
    }
    let covs: BTreeMap<String, f64> = [("group".to_string(), 1.0)].into();
    let mut req = TrajectoryRequest::new(vec![3.0, 10.0, 25.0, 50.0], covs);
    req.n_draws = 0;
    let a = marginal_trajectory(&fit, &req, &Serial).unwrap();
    let b = marginal_trajectory(&doubled, &req, &Serial).unwrap();
    for (x, y) in a.estimate.iter().zip(&b.estimate) {
        assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
    }
}

#[test]
fn bands_are_pointwise_under_grid_reordering() {
    let fit = prediala_fit();
    let grid = vec![1.0, 8.0, 20.0, 40.0];
    let rev: Vec<f64> = grid.iter().rev().copied().collect();
    let a = marginal_trajectory(&fit, &TrajectoryRequest::new(grid, reference()), &Serial).unwrap();
    let b = marginal_trajectory(&fit, &TrajectoryRequest::new(rev, reference()), &Serial).unwrap();
    for i in 0..4 {
        assert_eq!(a.estimate[i], b.estimate[3 - i]);
        assert_eq!(a.lower[i], b.lower[3 - i]);
        assert_eq!(a.upper[i], b.upper[3 - i]);
        assert!(a.lower[i] <= a.estimate[i] && a.estimate[i] <= a.upper[i]);
    }
}

#[test]
fn zero_variance_gives_zero_width() {
    let mut fit = prediala_fit();
    let n = fit.theta.len();
    fit.vcov = vec![vec![0.0; n]; n];
    let s = marginal_trajectory(&fit, &TrajectoryRequest::new(vec![5.0, 30.0], reference()), &Serial).unwrap();
    assert_eq!(s.lower, s.estimate);
    assert_eq!(s.upper, s.estimate);
}

#[test]
fn marginal_trajectory_is_lipschitz_in_time() {
    let fit = prediala_fit();
    let h = 0.01;
    let grid: Vec<f64> = (0..=6000).map(|i| i as f64 * h).collect();
    let mut req = TrajectoryRequest::new(grid, reference());
    req.n_draws = 0;
    let s = marginal_trajectory(&fit, &req, &Serial).unwrap();
    // |N_1'| = 1/w and |N_{j+2}'| <= 3 / ((1 - k_j) w) + 3 / ((1 - k_m) w)
    let w = 60.0;
    let knots = [0.0, 7.0 / 60.0, 15.0 / 60.0];
    let slopes = [1.0 / w, (3.0 / (1.0 - knots[0]) + 3.0 / (1.0 - knots[2])) / w, (3.0 / (1.0 - knots[1]) + 3.0 / (1.0 - knots[2])) / w];
    let beta = &fit.natural.beta;
    let bound: f64 = (0..3).map(|j| beta[j].abs() * slopes[j]).sum();
    for pair in s.estimate.windows(2) {
        assert!((pair[1] - pair[0]).abs() <= bound * h * (1.0 + 1e-9));
    }
}

fn binary_spec() -> ModelSpec {
    ModelSpec {
        items: vec![ItemDef::new("a", 2), ItemDef::new("b", 2)],
        basis: TimeBasis::Identity,
        design: DesignSpec {
            fixed: vec![Term::time(1)],
            random: vec![Term::intercept()],
            contrasts: vec![],
        },
    }
}

fn binary_fit() -> lirt_core::FitResult {
    let items = vec![ItemParams::new(1.0, vec![0.0]).unwrap(), ItemParams::new(1.0, vec![0.0]).unwrap()];
    let nat = NaturalParams::from_covariance(vec![0.0], vec![1.0], items, vec![vec![], vec![]]).unwrap();
    fake_fit(&binary_spec(), &nat, 1e-3)
}

#[test]
fn symmetric_evidence_gives_marginal_trajectory() {
    let fit = binary_fit();
    let obs = vec![Observation::new("s", "a", 1.0, 0), Observation::new("s", "b", 1.0, 1)];
    let ds = LongDataset::new(binary_spec().items, obs).unwrap();
    let eb = subject_random_effects(&fit, &ds, "s").unwrap();
    assert!(eb.b[0].abs() < 1e-10);
    let mut req = TrajectoryRequest::new(vec![0.0, 1.0, 2.0], BTreeMap::new());
    req.n_draws = 0;
    let ind = individual_trajectory(&fit, &ds, "s", &req, &Serial).unwrap();
    let marg = marginal_trajectory(&fit, &req, &Serial).unwrap();
    for (a, b) in ind.estimate.iter().zip(&marg.estimate) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn more_high_responses_raise_the_individual_curve() {
    let fit = binary_fit();
    let base = vec![Observation::new("s", "a", 0.0, 1), Observation::new("s", "b", 1.0, 0)];
    let mut more = base.clone();
    more.push(Observation::new("s", "a", 2.0, 1));
    more.push(Observation::new("s", "b", 2.0, 1));
    let items = binary_spec().items;
    let low = LongDataset::new(items.clone(), base).unwrap();
    let high = LongDataset::new(items, more).unwrap();
    let mut req = TrajectoryRequest::new(vec![0.0, 1.0, 2.0, 3.0], BTreeMap::new());
    req.n_draws = 0;
    let a = individual_trajectory(&fit, &low, "s", &req, &Serial).unwrap();
    let b = individual_trajectory(&fit, &high, "s", &req, &Serial).unwrap();
    for (x, y) in a.estimate.iter().zip(&b.estimate) {
        assert!(y > x);
    }
}

#[test]
fn posterior_mode_ignores_other_subjects() {
    let fit = binary_fit();
    let obs = vec![Observation::new("s", "a", 0.0, 1), Observation::new("s", "b", 1.0, 1)];
    let mut crowd = obs.clone();
    for i in 0..5 {
        crowd.push(Observation::new(format!("o{i}"), "a", 0.5, i % 2));
    }
    let items = binary_spec().items;
    let alone = LongDataset::new(items.clone(), obs).unwrap();
    let with = LongDataset::new(items, crowd).unwrap();
    let a = subject_random_effects(&fit, &alone, "s").unwrap();
    let b = subject_random_effects(&fit, &with, "s").unwrap();
    assert_eq!(a.b, b.b);
}

#[test]
fn individual_band_contains_estimate() {
    let fit = binary_fit();
    let obs = vec![Observation::new("s", "a", 0.0, 1), Observation::new("s", "b", 1.0, 0)];
    let ds = LongDataset::new(binary_spec().items, obs).unwrap();
    let mut req = TrajectoryRequest::new(vec![0.0, 2.0], BTreeMap::new());
    req.n_draws = 200;
    let s = individual_trajectory(&fit, &ds, "s", &req, &Serial).unwrap();
    for i in 0..2 {
        assert!(s.lower[i] <= s.estimate[i] && s.estimate[i] <= s.upper[i]);
        assert!(s.upper[i] > s.lower[i]);
    }
}

fn degenerate_design(n_subjects: usize) -> SimDesign {
    let spec = ModelSpec {
        items: vec![ItemDef::new("q", 4)],
        basis: TimeBasis::Identity,
        design: DesignSpec {
            fixed: vec![Term::time(1)],
            random: vec![Term::intercept()],
            contrasts: vec![],
        },
    };
    let item = ItemParams::new(1.0, vec![-1.0, 0.0, 1.0]).unwrap();
    let truth = NaturalParams {
        beta: vec![0.0],
        covariance: vec![0.0],
        chol: vec![0.0],
        items: vec![item],
        gammas: vec![vec![]],
    };
    SimDesign {
        n_subjects,
        schedule: VisitSchedule {
            entry_mean: 1.0,
            entry_min: 0.0,
            entry_max: 1.0,
            min_visits: 10,
            max_visits: 10,
            spacing: 1.0,
            jitter: 0.0,
            item_missing_prob: 0.0,
        },
        covariates: vec![],
        spec,
        truth,
        seed: 8,
    }
}

#[test]
fn category_frequencies_match_ccc() {
    let design = degenerate_design(10_000);
    let (ds, truth) = simulate_dataset(&design).unwrap();
    assert!(truth.theta.is_none());
    let n = ds.observations().len() as f64;
    assert_eq!(n, 1e5);
    let probs = category_probs(&design.truth.items[0], 0.0);
    for (l, p) in probs.iter().enumerate() {
        let count = ds.observations().iter().filter(|o| o.response == l).count() as f64;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((count / n - p).abs() < 3.0 * se, "level {l}: {} vs {p}", count / n);
    }
}

#[test]
fn latent_intercept_variance_is_one() {
    let mut design = prediala_design(20_000, 4);
    design.schedule.min_visits = 1;
    design.schedule.max_visits = 1;
    let (_, truth) = simulate_dataset(&design).unwrap();
    let b0: Vec<f64> = truth.random_effects.values().map(|b| b[0]).collect();
    let n = b0.len() as f64;
    let mean = b0.iter().sum::<f64>() / n;
    let var = b0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // SE of a sample variance of N(0, 1) is sqrt(2 / (n - 1))
    assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt(), "{var}");
}

#[test]
fn simulation_is_bit_reproducible() {
    let d = prediala_design(50, 9);
    let (a, ta) = simulate_dataset(&d).unwrap();
    let (b, tb) = simulate_dataset(&d).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn simulated_covariates_follow_generators() {
    let mut d = prediala_design(4000, 2);
    d.covariates.push(CovariateGenerator::Normal {
        name: "age".into(),
        mean: 50.0,
        sd: 10.0,
    });
    let (ds, _) = simulate_dataset(&d).unwrap();
    let ages: Vec<f64> = ds.subject_ids().iter().map(|s| ds.subject_covariate(s, "age").unwrap()).collect();
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    assert!((mean - 50.0).abs() < 3.0 * 10.0 / (ages.len() as f64).sqrt());
}

#[test]
fn lrt_of_a_model_against_itself() {
    let fit = prediala_fit();
    let t = lrt(&fit, &fit).unwrap();
    assert_eq!(t.statistic, 0.0);
    assert_eq!(t.df, 0);
    assert_eq!(t.p_value, 1.0);
}

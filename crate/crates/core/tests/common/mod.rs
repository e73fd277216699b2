//! Independent oracles and small designs shared by integration tests.
#![allow(dead_code)]

use lirt_core::likelihood::SubjectData;
use lirt_core::measurement::ItemParams;
use lirt_core::parameters::NaturalParams;
use lirt_core::simulate::{CovariateGenerator, SimDesign, VisitSchedule};
use lirt_core::timebasis::{DesignSpec, Term, TimeBasis};
use lirt_core::{ItemDef, ModelSpec};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Gauss–Hermite rule for `E[f(Z)]`, `Z ~ N(0, 1)`, via Golub–Welsch.
/// Returns `(points, weights)` with weights summing to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i] * std::f64::consts::SQRT_2, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// Category probability computed directly from the normal CDF.
pub fn oracle_category_prob(item: &ItemParams, level: usize, lambda: f64) -> f64 {
    let n = std_normal();
    let s = 1.0 / item.sigma.abs();
    let upper = if level + 1 == item.n_levels() {
        1.0
    } else {
        n.cdf(s * (item.thresholds[level] - lambda))
    };
    let lower = if level == 0 {
        0.0
    } else {
        n.cdf(s * (item.thresholds[level - 1] - lambda))
    };
    upper - lower
}

/// Lower Cholesky factor `L` with `L Lᵀ = B`.
pub fn lower_factor(nat: &NaturalParams) -> DMatrix<f64> {
    let p = (nat.covariance.len() as f64).sqrt() as usize;
    let b = DMatrix::from_row_slice(p, p, &nat.covariance);
    match b.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            // singular B: symmetric square root
            let e = SymmetricEigen::new(b);
            let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
            &e.eigenvectors * d * e.eigenvectors.transpose()
        }
    }
}

/// Tensor-product Gauss–Hermite integral over `p ≤ 3` random effects.
pub fn tensor_integral(p: usize, n: usize, l: &DMatrix<f64>, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let total = n.pow(p as u32);
    let mut acc = 0.0;
    let mut u = vec![0.0; p];
    let mut b = vec![0.0; p];
    for idx in 0..total {
        let mut rem = idx;
        let mut weight = 1.0;
        for d in 0..p {
            let i = rem % n;
            rem /= n;
            u[d] = x[i];
            weight *= w[i];
        }
        for r in 0..p {
            b[r] = (0..=r).map(|c| l[(r, c)] * u[c]).sum();
        }
        acc += weight * f(&b);
    }
    acc
}

/// Marginal log-likelihood of one subject by dense Gauss–Hermite.
pub fn gh_subject_loglik(subj: &SubjectData, nat: &NaturalParams, n: usize) -> f64 {
    let p = (nat.covariance.len() as f64).sqrt() as usize;
    let l = lower_factor(nat);
    let mut f = |b: &[f64]| -> f64 {
        let mut prod = 1.0;
        for v in &subj.visits {
            let mean: f64 = v.x.iter().zip(&nat.beta).map(|(a, c)| a * c).sum::<f64>()
                + v.z.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
            for &(k, level) in &v.responses {
                let shift: f64 = nat.gammas[k].iter().zip(&v.x_dif).map(|(g, x)| g * x).sum();
                prod *= oracle_category_prob(&nat.items[k], level, mean + shift);
            }
        }
        prod
    };
    tensor_integral(p, n, &l, &mut f).ln()
}

fn random_thresholds(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n);
    let mut cur = rng.gen_range(-1.5..-0.3);
    for _ in 0..n {
        t.push(cur);
        cur += rng.gen_range(0.4..1.2);
    }
    t
}

/// A random small model: identity time basis, a binary group covariate,
/// random intercept (plus slope when `p = 2`), four-level items and
/// optional group contrasts.
pub fn random_instance(seed: u64) -> SimDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.gen_range(1..=2);
    let k = rng.gen_range(1..=3);
    let contrasts = k >= 2 && rng.gen_bool(0.5);
    let items: Vec<ItemDef> = (0..k).map(|i| ItemDef::new(format!("q{}", i + 1), 4)).collect();
    let mut random = vec![Term::intercept()];
    if p == 2 {
        random.push(Term::time(1));
    }
    let spec = ModelSpec {
        items,
        basis: TimeBasis::Identity,
        design: DesignSpec {
            fixed: vec![Term::time(1), Term::covariate("group")],
            random,
            contrasts: if contrasts { vec![Term::covariate("group")] } else { vec![] },
        },
    };
    let beta = vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.8..0.8)];
    let cov = if p == 1 {
        vec![1.0]
    } else {
        let v: f64 = rng.gen_range(0.05..0.3);
        let c = rng.gen_range(-0.5..0.5) * v.sqrt();
        vec![1.0, c, c, v]
    };
    let item_params: Vec<ItemParams> = (0..k)
        .map(|_| {
            let sigma = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            ItemParams::new(sigma, random_thresholds(&mut rng, 3)).unwrap()
        })
        .collect();
    let mut gammas = vec![Vec::new(); k];
    if contrasts {
        let mut sum = 0.0;
        for g in gammas.iter_mut().take(k - 1) {
            let v = rng.gen_range(-0.5..0.5);
            sum += v;
            g.push(v);
        }
        gammas[k - 1].push(-sum);
    }
    let truth = NaturalParams::from_covariance(beta, cov, item_params, gammas).unwrap();
    SimDesign {
        n_subjects: 15,
        schedule: VisitSchedule {
            entry_mean: 1.0,
            entry_min: 0.0,
            entry_max: 2.0,
            min_visits: 1,
            max_visits: 3,
            spacing: 1.0,
            jitter: 0.2,
            item_missing_prob: 0.1,
        },
        covariates: vec![CovariateGenerator::Bernoulli {
            name: "group".into(),
            p: 0.5,
        }],
        spec,
        truth,
        seed: seed ^ 0xa5a5,
    }
}

pub struct TinyOptions {
    pub n_subjects: usize,
    pub n_items: usize,
    /// Per-item group contrasts, one entry per item; empty for none.
    pub gammas: Vec<f64>,
    /// Adds a standard-normal covariate `noise` with no effect.
    pub noise: bool,
    pub seed: u64,
}

/// Small random-intercept design used for repeated-fit studies.
pub fn tiny_design(o: &TinyOptions) -> SimDesign {
    let items: Vec<ItemDef> = (0..o.n_items).map(|i| ItemDef::new(format!("q{}", i + 1), 4)).collect();
    let spec = ModelSpec {
        items,
        basis: TimeBasis::Identity,
        design: DesignSpec {
            fixed: vec![Term::time(1), Term::covariate("group")],
            random: vec![Term::intercept()],
            contrasts: if o.gammas.is_empty() { vec![] } else { vec![Term::covariate("group")] },
        },
    };
    let base = [
        (1.0, vec![-0.8, 0.1, 1.0]),
        (0.8, vec![-0.3, 0.5, 1.4]),
        (1.2, vec![-1.2, -0.2, 0.7]),
        (0.9, vec![-0.6, 0.3, 1.1]),
    ];
    let item_params = (0..o.n_items)
        .map(|k| {
            let (s, t) = &base[k % base.len()];
            ItemParams::new(*s, t.clone()).unwrap()
        })
        .collect();
    let gammas = if o.gammas.is_empty() {
        vec![Vec::new(); o.n_items]
    } else {
        o.gammas.iter().map(|g| vec![*g]).collect()
    };
    let truth = NaturalParams::from_covariance(vec![0.3, 0.5], vec![1.0], item_params, gammas).unwrap();
    let mut covariates = vec![CovariateGenerator::Bernoulli {
        name: "group".into(),
        p: 0.5,
    }];
    if o.noise {
        covariates.push(CovariateGenerator::Normal {
            name: "noise".into(),
            mean: 0.0,
            sd: 1.0,
        });
    }
    SimDesign {
        n_subjects: o.n_subjects,
        schedule: VisitSchedule {
            entry_mean: 0.5,
            entry_min: 0.0,
            entry_max: 1.0,
            min_visits: 2,
            max_visits: 3,
            spacing: 1.0,
            jitter: 0.2,
            item_missing_prob: 0.0,
        },
        covariates,
        spec,
        truth,
        seed: o.seed,
    }
}

/// A fit result at given natural parameters with a diagonal covariance.
pub fn fake_fit(spec: &ModelSpec, nat: &NaturalParams, var: f64) -> lirt_core::FitResult {
    use lirt_core::optimizer::{ConvergenceCheck, FitOptions, Termination};
    let layout = spec.layout();
    let theta = lirt_core::parameters::pack(nat, &layout).unwrap();
    let n = theta.len();
    lirt_core::FitResult {
        layout_version: lirt_core::parameters::LAYOUT_VERSION,
        spec: spec.clone(),
        options: FitOptions::default(),
        parameter_names: layout.names().to_vec(),
        natural: lirt_core::parameters::unpack(&theta, &layout).unwrap(),
        theta,
        vcov: (0..n).map(|i| (0..n).map(|j| if i == j { var } else { 0.0 }).collect()).collect(),
        se_available: vec![true; n],
        non_pd_hessian: false,
        loglik: 0.0,
        gradient: vec![0.0; n],
        n_iter: 0,
        termination: Termination::Converged,
        convergence: ConvergenceCheck {
            param: 0.0,
            function: 0.0,
            rdm: Some(0.0),
            param_ok: true,
            function_ok: true,
            rdm_ok: true,
        },
        converged: true,
        n_subjects: 0,
        n_responses: 0,
        tables: Default::default(),
        trace: vec![],
    }
}

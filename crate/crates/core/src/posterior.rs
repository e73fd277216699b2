//! Post-fit predictions: latent and item trajectories with Monte-Carlo
//! percentile bands, and empirical-Bayes (posterior mode) random effects.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LongDataset;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fitting::FitResult;
use crate::likelihood::{prepare_subjects, SubjectData};
use crate::measurement::item_expectation;
use crate::model::ModelSpec;
use crate::normal;
use crate::parameters::{unpack, NaturalParams};
use crate::qmc::QmcNodes;
use crate::timebasis::CovariateSource;

pub const DEFAULT_DRAWS: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;
const MODE_MAX_ITER: usize = 100;

/// Standard normal variate from a uniform on the open unit interval.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
    normal::quantile(u)
}

/// Sample quantile, linear interpolation between order statistics (type 7).
pub fn percentile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws of `θ ~ N(θ̂, V)`; draw `d` uses its own generator stream, so any
/// subset can be regenerated independently of the others.
pub struct ParameterDraws {
    center: Vec<f64>,
    root: DMatrix<f64>,
    seed: u64,
}

impl ParameterDraws {
    pub fn new(center: &[f64], v: &DMatrix<f64>, seed: u64) -> Self {
        let n = center.len();
        let eig = crate::optimizer::symmetrize(v).symmetric_eigen();
        let mut root = DMatrix::zeros(n, n);
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > 0.0 {
                let col = eig.eigenvectors.column(k) * libm::sqrt(ev);
                root.set_column(k, &col);
            }
        }
        ParameterDraws {
            center: center.to_vec(),
            root,
            seed,
        }
    }

    pub fn draw(&self, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(d as u64);
        let n = self.center.len();
        let z = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
        let x = &self.root * z;
        self.center.iter().zip(x.iter()).map(|(c, e)| c + e).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRequest {
    pub grid: Vec<f64>,
    /// Time-independent covariate profile.
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

impl TrajectoryRequest {
    pub fn new(grid: Vec<f64>, covariates: BTreeMap<String, f64>) -> Self {
        TrajectoryRequest {
            grid,
            covariates,
            n_draws: DEFAULT_DRAWS,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("trajectory grid must be finite".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Invalid(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub n_draws: usize,
}

fn band(grid: &[f64], estimate: Vec<f64>, draws: &[Vec<f64>], level: f64) -> PosteriorSummary {
    let alpha = 0.5 * (1.0 - level);
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for (g, est) in estimate.iter().enumerate() {
        if draws.is_empty() {
            lower.push(*est);
            upper.push(*est);
            continue;
        }
        let mut col: Vec<f64> = draws.iter().map(|d| d[g]).collect();
        col.sort_by(f64::total_cmp);
        // the point estimate lies inside the band by construction
        lower.push(percentile(&col, alpha).min(*est));
        upper.push(percentile(&col, 1.0 - alpha).max(*est));
    }
    PosteriorSummary {
        grid: grid.to_vec(),
        estimate,
        lower,
        upper,
        level,
        n_draws: draws.len(),
    }
}

fn latent_mean(spec: &ModelSpec, beta: &[f64], covs: &dyn CovariateSource, t: f64) -> Result<f64> {
    let row = spec.design.design_rows(&spec.basis, covs, t)?;
    Ok(row.x.iter().zip(beta).map(|(x, b)| x * b).sum())
}

/// Population-level latent trajectory `x(t)ᵀβ̂` with a percentile band.
pub fn marginal_trajectory<E: Executor>(fit: &FitResult, req: &TrajectoryRequest, exec: &E) -> Result<PosteriorSummary> {
    req.validate()?;
    let spec = &fit.spec;
    let nf = spec.n_fixed();
    let beta = &fit.theta[..nf];
    let rows: Vec<Vec<f64>> = req
        .grid
        .iter()
        .map(|&t| spec.design.design_rows(&spec.basis, &req.covariates, t).map(|r| r.x))
        .collect::<Result<_>>()?;
    let estimate: Vec<f64> = rows.iter().map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let draws_src = ParameterDraws::new(&fit.theta, &fit.vcov_matrix(), req.seed);
    let draws = exec.map(req.n_draws, |d| {
        let theta = draws_src.draw(d);
        rows.iter()
            .map(|x| x.iter().zip(&theta[..nf]).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>()
    });
    Ok(band(&req.grid, estimate, &draws, req.level))
}

fn expected_item_score(
    spec: &ModelSpec,
    nat: &NaturalParams,
    item: usize,
    covs: &dyn CovariateSource,
    t: f64,
    nodes: &QmcNodes,
) -> Result<f64> {
    let row = spec.design.design_rows(&spec.basis, covs, t)?;
    let mean: f64 = row.x.iter().zip(&nat.beta).map(|(x, b)| x * b).sum::<f64>() + nat.contrast_shift(item, &row.x_dif);
    let p = nat.p();
    let mut b = vec![0.0; p];
    let mut acc = 0.0;
    for q in 0..nodes.len() {
        nat.correlate(nodes.node(q), &mut b);
        let lam = mean + row.z.iter().zip(&b).map(|(z, v)| z * v).sum::<f64>();
        acc += item_expectation(&nat.items[item], lam);
    }
    Ok(acc / nodes.len() as f64)
}

/// Expected score of one item over time, integrating the random effects.
/// Each band draw re-evaluates the integral under the drawn parameters.
pub fn item_trajectory<E: Executor>(
    fit: &FitResult,
    item_id: &str,
    req: &TrajectoryRequest,
    n_qmc: usize,
    exec: &E,
) -> Result<PosteriorSummary> {
    req.validate()?;
    let spec = &fit.spec;
    let k = spec
        .item_index(item_id)
        .ok_or_else(|| Error::Spec(format!("item {item_id} is not in the model")))?;
    let nodes = QmcNodes::new(spec.n_random(), n_qmc, fit.options.seed)?;
    let layout = fit.layout();
    let estimate: Vec<f64> = req
        .grid
        .iter()
        .map(|&t| expected_item_score(spec, &fit.natural, k, &req.covariates, t, &nodes))
        .collect::<Result<_>>()?;
    let draws_src = ParameterDraws::new(&fit.theta, &fit.vcov_matrix(), req.seed);
    let draws = exec.map(req.n_draws, |d| -> Result<Vec<f64>> {
        let nat = unpack(&draws_src.draw(d), &layout)?;
        req.grid
            .iter()
            .map(|&t| expected_item_score(spec, &nat, k, &req.covariates, t, &nodes))
            .collect()
    });
    let draws: Vec<Vec<f64>> = draws.into_iter().collect::<Result<_>>()?;
    Ok(band(&req.grid, estimate, &draws, req.level))
}

/// Expected item score at fixed natural parameters, integrating `b ~ N(0, B)`.
pub fn expected_item_score_at(
    spec: &ModelSpec,
    params: &NaturalParams,
    item: usize,
    covariates: &dyn CovariateSource,
    t: f64,
    nodes: &QmcNodes,
) -> Result<f64> {
    expected_item_score(spec, params, item, covariates, t, nodes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbEstimate {
    /// Posterior mode of `b_i`.
    pub b: Vec<f64>,
    /// Same mode in standardized coordinates, `b = Cᵀu`.
    pub u: Vec<f64>,
    pub iterations: usize,
}

/// Log posterior in `u`, its gradient and Hessian.
fn log_posterior(subj: &SubjectData, nat: &NaturalParams, u: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = u.len();
    let mut b = vec![0.0; p];
    nat.correlate(u, &mut b);
    let mut value = -0.5 * u.iter().map(|x| x * x).sum::<f64>();
    let mut grad = -DVector::from_column_slice(u);
    let mut hess = -DMatrix::<f64>::identity(p, p);
    for visit in &subj.visits {
        let mean: f64 = visit.x.iter().zip(&nat.beta).map(|(x, b)| x * b).sum();
        let lam = mean + visit.z.iter().zip(&b).map(|(z, v)| z * v).sum::<f64>();
        // dΛ/du = C z
        let dz = DVector::from_fn(p, |r, _| (r..p).map(|s| nat.chol[r * p + s] * visit.z[s]).sum::<f64>());
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for &(k, l) in &visit.responses {
            let item = &nat.items[k];
            let s = item.discrimination();
            let shift = nat.contrast_shift(k, &visit.x_dif);
            let a = s * (item.threshold(l) - lam - shift);
            let bb = s * (item.threshold(l + 1) - lam - shift);
            let lp = normal::ln_interval_prob(a, bb);
            value += lp;
            let ra = libm::exp(normal::ln_pdf(a) - lp);
            let rb = libm::exp(normal::ln_pdf(bb) - lp);
            let ta = if a.is_finite() { a * ra } else { 0.0 };
            let tb = if bb.is_finite() { bb * rb } else { 0.0 };
            d1 += -s * (rb - ra);
            d2 += s * s * (ta - tb) - s * s * (rb - ra) * (rb - ra);
        }
        grad += &dz * d1;
        hess += &dz * dz.transpose() * d2;
    }
    (value, grad, hess)
}

/// Posterior mode of the random effects of one subject by damped Newton
/// iterations with backtracking.
pub fn eb_random_effects(subj: &SubjectData, params: &NaturalParams) -> Result<EbEstimate> {
    let p = params.p();
    let mut u = vec![0.0; p];
    if subj.n_responses() == 0 {
        return Ok(EbEstimate {
            b: vec![0.0; p],
            u,
            iterations: 0,
        });
    }
    let (mut value, mut grad, mut hess) = log_posterior(subj, params, &u);
    for iter in 1..=MODE_MAX_ITER {
        let neg = -&hess;
        let step = match neg.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let (cv, cg, ch) = log_posterior(subj, params, &cand);
            if cv.is_finite() && cv >= value {
                let done = step.norm() * t < 1e-10 || (cv - value) < 1e-14 * (1.0 + value.abs());
                u = cand;
                value = cv;
                grad = cg;
                hess = ch;
                moved = true;
                if done || grad.norm() < 1e-9 {
                    let mut b = vec![0.0; p];
                    params.correlate(&u, &mut b);
                    return Ok(EbEstimate { b, u, iterations: iter });
                }
                break;
            }
            t *= 0.5;
        }
        if !moved {
            if grad.norm() < 1e-6 {
                let mut b = vec![0.0; p];
                params.correlate(&u, &mut b);
                return Ok(EbEstimate { b, u, iterations: iter });
            }
            break;
        }
    }
    Err(Error::PosteriorMode {
        subject: subj.id.clone(),
    })
}

/// Covariate values of a subject at time `t`: subject-level values, then
/// row-level values from the latest observation at or before `t` (the first
/// one if `t` precedes every observation).
pub struct SubjectCovariates<'a> {
    ds: &'a LongDataset,
    subject: &'a str,
    t: f64,
}

impl CovariateSource for SubjectCovariates<'_> {
    fn covariate(&self, name: &str) -> Option<f64> {
        if let Some(idx) = self.ds.row_covariate_names().iter().position(|n| n == name) {
            let mut rows: Vec<_> = self.ds.subject_observations(self.subject).collect();
            rows.sort_by(|a, b| a.time.total_cmp(&b.time));
            let pick = rows.iter().rev().find(|o| o.time <= self.t).or(rows.first())?;
            let v = pick.covariates[idx];
            return (!v.is_nan()).then_some(v);
        }
        self.ds.subject_covariate(self.subject, name)
    }
}

fn find_subject(ds: &LongDataset, spec: &ModelSpec, subject_id: &str) -> Result<SubjectData> {
    prepare_subjects(ds, spec)?
        .into_iter()
        .find(|s| s.id == subject_id)
        .ok_or_else(|| Error::Invalid(format!("subject {subject_id} has no observations")))
}

/// Empirical-Bayes random effects of a subject under a fitted model.
pub fn subject_random_effects(fit: &FitResult, ds: &LongDataset, subject_id: &str) -> Result<EbEstimate> {
    let subj = find_subject(ds, &fit.spec, subject_id)?;
    eb_random_effects(&subj, &fit.natural)
}

/// `X_i(t)ᵀβ̂ + Z_i(t)ᵀb̂_i`, with a band from parameter draws in which the
/// posterior mode is recomputed for every draw.
pub fn individual_trajectory<E: Executor>(
    fit: &FitResult,
    ds: &LongDataset,
    subject_id: &str,
    req: &TrajectoryRequest,
    exec: &E,
) -> Result<PosteriorSummary> {
    req.validate()?;
    let spec = &fit.spec;
    let subj = find_subject(ds, spec, subject_id)?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = req
        .grid
        .iter()
        .map(|&t| {
            let covs = SubjectCovariates { ds, subject: subject_id, t };
            spec.design.design_rows(&spec.basis, &covs, t).map(|r| (r.x, r.z))
        })
        .collect::<Result<_>>()?;
    let curve = |nat: &NaturalParams, b: &[f64]| -> Vec<f64> {
        rows.iter()
            .map(|(x, z)| {
                x.iter().zip(&nat.beta).map(|(a, c)| a * c).sum::<f64>() + z.iter().zip(b).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    };
    let eb = eb_random_effects(&subj, &fit.natural)?;
    let estimate = curve(&fit.natural, &eb.b);
    let layout = fit.layout();
    let draws_src = ParameterDraws::new(&fit.theta, &fit.vcov_matrix(), req.seed);
    let draws = exec.map(req.n_draws, |d| -> Result<Vec<f64>> {
        let nat = unpack(&draws_src.draw(d), &layout)?;
        let eb = eb_random_effects(&subj, &nat)?;
        Ok(curve(&nat, &eb.b))
    });
    let draws: Vec<Vec<f64>> = draws.into_iter().collect::<Result<_>>()?;
    Ok(band(&req.grid, estimate, &draws, req.level))
}

/// Assumptions for [`population_latent_interval`]: each simulated member
/// draws a covariate profile and a time uniformly from the given lists and
/// random effects from `N(0, B̂)`; parameter uncertainty enters through one
/// parameter draw per member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationDesign {
    pub profiles: Vec<BTreeMap<String, f64>>,
    pub times: Vec<f64>,
    pub n_members: usize,
    pub level: f64,
    pub seed: u64,
}

/// Percentile interval of the latent level across a hypothetical population.
pub fn population_latent_interval(fit: &FitResult, design: &PopulationDesign) -> Result<(f64, f64)> {
    if design.profiles.is_empty() || design.times.is_empty() || design.n_members == 0 {
        return Err(Error::Invalid("population design needs profiles, times and members".into()));
    }
    let spec = &fit.spec;
    let layout = fit.layout();
    let draws_src = ParameterDraws::new(&fit.theta, &fit.vcov_matrix(), design.seed);
    let p = spec.n_random();
    let mut values = Vec::with_capacity(design.n_members);
    for m in 0..design.n_members {
        let nat = unpack(&draws_src.draw(m), &layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(design.seed ^ 0x5bd1_e995);
        rng.set_stream(m as u64);
        let profile = &design.profiles[(rng.next_u64() % design.profiles.len() as u64) as usize];
        let t = design.times[(rng.next_u64() % design.times.len() as u64) as usize];
        let u: Vec<f64> = (0..p).map(|_| standard_normal(&mut rng)).collect();
        let mut b = vec![0.0; p];
        nat.correlate(&u, &mut b);
        let row = spec.design.design_rows(&spec.basis, profile, t)?;
        let lam = latent_mean(spec, &nat.beta, profile, t)? + row.z.iter().zip(&b).map(|(z, v)| z * v).sum::<f64>();
        values.push(lam);
    }
    values.sort_by(f64::total_cmp);
    let alpha = 0.5 * (1.0 - design.level);
    Ok((percentile(&values, alpha), percentile(&values, 1.0 - alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Visit;
    use crate::measurement::ItemParams;

    fn params(eta: f64) -> NaturalParams {
        NaturalParams::from_covariance(vec![0.0], vec![1.0], vec![ItemParams::new(1.0, vec![eta]).unwrap()], vec![vec![]])
            .unwrap()
    }

    fn subject(levels: &[usize]) -> SubjectData {
        SubjectData {
            id: "s".into(),
            visits: vec![Visit {
                time: 0.0,
                x: vec![0.0],
                z: vec![1.0],
                x_dif: vec![],
                responses: levels.iter().map(|&l| (0, l)).collect(),
            }],
        }
    }

    #[test]
    fn no_observations_gives_prior_mode() {
        let e = eb_random_effects(&SubjectData { id: "x".into(), visits: vec![] }, &params(0.0)).unwrap();
        assert_eq!(e.b, vec![0.0]);
    }

    #[test]
    fn mode_matches_grid_search() {
        let nat = params(0.0);
        for (level, sign) in [(1usize, 1.0), (0, -1.0)] {
            let e = eb_random_effects(&subject(&[level]), &nat).unwrap();
            assert_eq!(e.b[0].signum(), sign);
            // log Φ(±b) - b²/2 on a fine grid
            let mut best = (f64::NEG_INFINITY, 0.0);
            for i in 0..=400_000 {
                let b = -2.0 + i as f64 * 1e-5;
                let v = normal::ln_cdf(sign * b) - 0.5 * b * b;
                if v > best.0 {
                    best = (v, b);
                }
            }
            assert!((e.b[0] - best.1).abs() < 1e-4);
        }
    }

    #[test]
    fn percentile_type7() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&x, 0.0), 1.0);
        assert_eq!(percentile(&x, 1.0), 4.0);
        assert!((percentile(&x, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_draws_are_the_center() {
        let d = ParameterDraws::new(&[1.0, 2.0], &DMatrix::zeros(2, 2), 3);
        assert_eq!(d.draw(5), vec![1.0, 2.0]);
    }
}

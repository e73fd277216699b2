//! Synthetic long-format data from a fully specified model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemDef, LongDataset, Observation};
use crate::error::{Error, Result};
use crate::measurement::ItemParams;
use crate::model::ModelSpec;
use crate::parameters::{pack, Layout, NaturalParams};
use crate::posterior::standard_normal;
use crate::timebasis::{DesignSpec, Term, TimeBasis};

#[inline]
fn uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Time-independent covariate generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateGenerator {
    Bernoulli { name: String, p: f64 },
    Normal { name: String, mean: f64, sd: f64 },
}

impl CovariateGenerator {
    pub fn name(&self) -> &str {
        match self {
            CovariateGenerator::Bernoulli { name, .. } | CovariateGenerator::Normal { name, .. } => name,
        }
    }

    fn draw(&self, rng: &mut impl RngCore) -> f64 {
        match self {
            CovariateGenerator::Bernoulli { p, .. } => {
                if uniform(rng) < *p {
                    1.0
                } else {
                    0.0
                }
            }
            CovariateGenerator::Normal { mean, sd, .. } => mean + sd * standard_normal(rng),
        }
    }
}

/// Entry delay plus a visit schedule with uniform jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitSchedule {
    /// Mean of the exponential entry delay before truncation.
    pub entry_mean: f64,
    /// Entry delays are drawn from the exponential truncated to `[entry_min, entry_max]`.
    pub entry_min: f64,
    pub entry_max: f64,
    pub min_visits: usize,
    pub max_visits: usize,
    pub spacing: f64,
    /// Each later visit is shifted by a uniform draw on `[-jitter, jitter]`.
    pub jitter: f64,
    /// Probability that a single item response is missing at a visit.
    #[serde(default)]
    pub item_missing_prob: f64,
}

impl VisitSchedule {
    fn validate(&self) -> Result<()> {
        let ok = self.entry_mean > 0.0
            && self.entry_min >= 0.0
            && self.entry_max > self.entry_min
            && self.min_visits >= 1
            && self.max_visits >= self.min_visits
            && self.spacing > 0.0
            && self.jitter >= 0.0
            && self.jitter < 0.5 * self.spacing
            && (0.0..1.0).contains(&self.item_missing_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("inconsistent visit schedule".into()))
        }
    }

    fn times(&self, rng: &mut impl RngCore) -> Vec<f64> {
        // inverse CDF of the truncated exponential
        let lo = 1.0 - libm::exp(-self.entry_min / self.entry_mean);
        let hi = 1.0 - libm::exp(-self.entry_max / self.entry_mean);
        let u = lo + (hi - lo) * uniform(rng);
        let entry = -self.entry_mean * libm::log1p(-u);
        let span = (self.max_visits - self.min_visits + 1) as u64;
        let n = self.min_visits + (rng.next_u64() % span) as usize;
        let mut out = Vec::with_capacity(n);
        out.push(entry);
        for j in 1..n {
            let shift = self.jitter * (2.0 * uniform(rng) - 1.0);
            out.push(entry + j as f64 * self.spacing + shift);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub schedule: VisitSchedule,
    #[serde(default)]
    pub covariates: Vec<CovariateGenerator>,
    pub spec: ModelSpec,
    pub truth: NaturalParams,
    pub seed: u64,
}

/// What generated a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: ModelSpec,
    pub natural: NaturalParams,
    /// Packed truth; `None` when the generating values lie outside the
    /// estimation parameter space (`B_11 != 1`).
    pub theta: Option<Vec<f64>>,
    pub parameter_names: Vec<String>,
    pub seed: u64,
    /// Random effects per subject, in subject order.
    pub random_effects: BTreeMap<String, Vec<f64>>,
}

pub fn subject_label(i: usize) -> String {
    format!("S{:05}", i + 1)
}

/// Draws a dataset. Subject `i` uses generator stream `i` of the design seed,
/// so subjects are independent of each other and of `n_subjects`.
pub fn simulate_dataset(design: &SimDesign) -> Result<(LongDataset, TruthRecord)> {
    design.spec.validate()?;
    design.schedule.validate()?;
    let spec = &design.spec;
    let layout = spec.layout();
    let truth = &design.truth;
    let p = spec.n_random();
    let theta = generating_theta(truth, &layout, p)?;
    let names: Vec<String> = design.covariates.iter().map(|c| String::from(c.name())).collect();

    let mut observations = Vec::new();
    let mut table = BTreeMap::new();
    let mut effects = BTreeMap::new();
    for i in 0..design.n_subjects {
        let id = subject_label(i);
        let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
        rng.set_stream(i as u64);
        let covs: Vec<f64> = design.covariates.iter().map(|g| g.draw(&mut rng)).collect();
        let profile: BTreeMap<String, f64> = names.iter().cloned().zip(covs.iter().copied()).collect();
        let times = design.schedule.times(&mut rng);
        let u: Vec<f64> = (0..p).map(|_| standard_normal(&mut rng)).collect();
        let mut b = vec![0.0; p];
        truth.correlate(&u, &mut b);
        for &t in &times {
            let row = spec.design.design_rows(&spec.basis, &profile, t)?;
            let lam = row.x.iter().zip(&truth.beta).map(|(x, c)| x * c).sum::<f64>()
                + row.z.iter().zip(&b).map(|(z, c)| z * c).sum::<f64>();
            for (k, item) in spec.items.iter().enumerate() {
                let missing = uniform(&mut rng) < design.schedule.item_missing_prob;
                let eps = standard_normal(&mut rng);
                if missing {
                    continue;
                }
                let params = &truth.items[k];
                let latent = lam + truth.contrast_shift(k, &row.x_dif) + params.sigma.abs() * eps;
                let level = params.thresholds.iter().filter(|&&e| e < latent).count();
                observations.push(Observation::new(id.clone(), item.item_id.clone(), t, level));
            }
        }
        table.insert(id.clone(), covs);
        effects.insert(id, b);
    }
    let items: Vec<ItemDef> = spec.items.clone();
    let ds = LongDataset::with_covariates(items, observations, Vec::new(), names, table)?;
    Ok((
        ds,
        TruthRecord {
            spec: spec.clone(),
            natural: truth.clone(),
            theta,
            parameter_names: layout.names().to_vec(),
            seed: design.seed,
            random_effects: effects,
        },
    ))
}

/// Packs the truth when it is a valid estimate. Otherwise checks everything
/// except the scale of `B` and returns `None`.
fn generating_theta(truth: &NaturalParams, layout: &Layout, p: usize) -> Result<Option<Vec<f64>>> {
    if truth.covariance.len() != p * p || truth.chol.len() != p * p {
        return Err(Error::Layout {
            expected: p * p,
            got: truth.covariance.len(),
        });
    }
    if truth.covariance.first() == Some(&1.0) {
        return pack(truth, layout).map(Some);
    }
    let mut scaled = truth.clone();
    scaled.covariance = vec![0.0; p * p];
    scaled.chol = vec![0.0; p * p];
    for r in 0..p {
        scaled.covariance[r * p + r] = 1.0;
        scaled.chol[r * p + r] = 1.0;
    }
    pack(&scaled, layout)?;
    let ok = truth.covariance.iter().chain(&truth.chol).all(|v| v.is_finite());
    if !ok {
        return Err(Error::Invalid("random-effect covariance must be finite".into()));
    }
    Ok(None)
}

/// Seven four-level anxiety/depression-style items: discriminations and
/// thresholds of the published calibration, with items 8 and 10 reverse-coded.
pub fn prediala_items() -> Vec<(ItemDef, ItemParams)> {
    let table: [(&str, f64, [f64; 3], bool); 7] = [
        ("hads2", 1.29, [-0.46, 0.77, 1.52], false),
        ("hads4", 1.56, [-0.26, 0.74, 1.91], false),
        ("hads6", 0.85, [-0.48, 1.58, 3.34], false),
        ("hads8", 0.95, [-1.51, 0.40, 1.69], true),
        ("hads10", 0.88, [-0.05, 1.00, 2.27], true),
        ("hads12", 1.46, [-0.32, 0.72, 1.82], false),
        ("hads14", 0.56, [0.83, 3.18, 4.11], false),
    ];
    table
        .iter()
        .map(|(id, disc, thr, rev)| {
            (
                ItemDef::new(*id, 4).reversed(*rev),
                ItemParams::from_discrimination(*disc, thr.to_vec()).expect("valid item"),
            )
        })
        .collect()
}

/// Spline model with group effects and group-by-time interactions, random
/// intercept and spline slopes; knots at 7 and 15 months, boundaries 0 and 60.
pub fn prediala_spec() -> ModelSpec {
    let items = prediala_items().into_iter().map(|(d, _)| d).collect();
    ModelSpec {
        items,
        basis: TimeBasis::ncs(vec![7.0, 15.0], 0.0, 60.0).expect("valid knots"),
        design: DesignSpec {
            fixed: vec![
                Term::time(1),
                Term::time(2),
                Term::time(3),
                Term::covariate("group"),
                Term::interaction(1, "group"),
                Term::interaction(2, "group"),
                Term::interaction(3, "group"),
            ],
            random: vec![Term::intercept(), Term::time(1), Term::time(2), Term::time(3)],
            contrasts: vec![],
        },
    }
}

/// Latent changes from time 0 at these times parameterize the spline part
/// of the generating model.
pub const PREDIALA_ANCHORS: [f64; 3] = [15.0, 30.0, 45.0];

/// Generating values for [`prediala_spec`]. Spline effects are set as latent
/// changes at [`PREDIALA_ANCHORS`] and mapped onto the spline columns.
pub fn prediala_truth() -> NaturalParams {
    let basis = prediala_spec().basis;
    let values = DMatrix::from_fn(3, 3, |i, j| basis.evaluate(PREDIALA_ANCHORS[i])[j]);
    let a = values.try_inverse().expect("anchor values are invertible");
    let to_columns = |change: [f64; 3]| -> Vec<f64> { (a.clone() * DVector::from_row_slice(&change)).iter().copied().collect() };

    let mut beta = to_columns([0.25, 0.35, 0.4]);
    beta.push(-0.48);
    beta.extend(to_columns([-0.3, -0.45, -0.55]));

    // intercept, then changes at the anchors
    let sd = [1.0, 0.5, 0.7, 0.9];
    let corr = [
        [1.0, -0.3, -0.3, -0.2],
        [-0.3, 1.0, 0.7, 0.5],
        [-0.3, 0.7, 1.0, 0.8],
        [-0.2, 0.5, 0.8, 1.0],
    ];
    let mut m = DMatrix::<f64>::identity(4, 4);
    m.view_mut((1, 1), (3, 3)).copy_from(&a);
    let anchor_cov = DMatrix::from_fn(4, 4, |i, j| corr[i][j] * sd[i] * sd[j]);
    let cov = &m * anchor_cov * m.transpose();
    let mut cov: Vec<f64> = (0..16).map(|k| cov[(k / 4, k % 4)]).collect();
    cov[0] = 1.0;
    for i in 0..4 {
        for j in 0..i {
            cov[i * 4 + j] = cov[j * 4 + i];
        }
    }

    let items = prediala_items().into_iter().map(|(_, p)| p).collect();
    NaturalParams::from_covariance(beta, cov, items, vec![vec![]; 7]).expect("valid truth")
}

/// Entry delays spread over the first 43 months, two to five visits six
/// months apart, balanced groups.
pub fn prediala_schedule() -> VisitSchedule {
    VisitSchedule {
        entry_mean: 7.4,
        entry_min: 0.1,
        entry_max: 43.1,
        min_visits: 2,
        max_visits: 5,
        spacing: 6.0,
        jitter: 1.0,
        item_missing_prob: 0.02,
    }
}

pub fn prediala_design(n_subjects: usize, seed: u64) -> SimDesign {
    SimDesign {
        n_subjects,
        schedule: prediala_schedule(),
        covariates: vec![CovariateGenerator::Bernoulli {
            name: "group".into(),
            p: 0.5,
        }],
        spec: prediala_spec(),
        truth: prediala_truth(),
        seed,
    }
}

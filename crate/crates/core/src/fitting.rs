//! Model fitting: maximizes the QMC log-likelihood, then derives the
//! variance of the estimates and natural-scale summary tables.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cardinal::CardinalMap;
use crate::dataset::LongDataset;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::inference::two_sided_p;
use crate::likelihood::LikelihoodModel;
use crate::model::ModelSpec;
use crate::optimizer::{
    maximize_observed, variance_of_estimates, ConvergenceCheck, FitOptions, IterationRecord, Objective, Termination,
};
use crate::parameters::{canonicalize, initial_theta, quadratic_se, transform_gradient, unpack, Layout, NaturalParams, LAYOUT_VERSION};

/// The log-likelihood of a prepared model as an [`Objective`].
pub struct LikelihoodObjective<'a, E> {
    model: &'a LikelihoodModel,
    exec: &'a E,
}

impl<'a, E: Executor> LikelihoodObjective<'a, E> {
    pub fn new(model: &'a LikelihoodModel, exec: &'a E) -> Self {
        LikelihoodObjective { model, exec }
    }
}

impl<E: Executor> Objective for LikelihoodObjective<'_, E> {
    fn dim(&self) -> usize {
        self.model.layout().len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        match self.model.loglik(theta, self.exec) {
            Err(Error::ZeroProbability { .. }) => Ok(f64::NEG_INFINITY),
            other => other,
        }
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.model.loglik_gradient(theta, self.exec).map(|(_, g)| g)
    }

    fn score_curvature(&self, theta: &[f64]) -> Result<Option<(Vec<f64>, DMatrix<f64>)>> {
        let (_, g, scores) = self.model.subject_scores(theta, self.exec)?;
        let s = DMatrix::from_fn(scores.len(), g.len(), |i, j| scores[i][j]);
        Ok(Some((g, -(s.transpose() * s))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    /// `None` when the variance is unavailable for this quantity.
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub item_id: String,
    pub discrimination: Estimate,
    pub thresholds: Vec<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

impl CoefficientRow {
    fn new(name: String, estimate: f64, se: Option<f64>) -> Self {
        let z = se.filter(|s| *s > 0.0).map(|s| estimate / s);
        CoefficientRow {
            name,
            estimate,
            se,
            z,
            p_value: z.map(two_sided_p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub row: String,
    pub col: String,
    pub estimate: f64,
    /// `None` for the fixed `B_11` and when unavailable.
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub term: String,
    pub item_id: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    /// Not estimated: minus the sum of the other items' contrasts.
    pub derived: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTables {
    pub items: Vec<ItemRow>,
    pub fixed: Vec<CoefficientRow>,
    pub covariance: Vec<CovarianceRow>,
    pub contrasts: Vec<ContrastRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub layout_version: u32,
    pub spec: ModelSpec,
    pub options: FitOptions,
    pub parameter_names: Vec<String>,
    /// Canonical representative: positive scales, non-negative `η*_m (m >= 2)`
    /// and Cholesky diagonal.
    pub theta: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    /// SE availability per packed parameter.
    pub se_available: Vec<bool>,
    pub non_pd_hessian: bool,
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub n_iter: usize,
    pub termination: Termination,
    pub convergence: ConvergenceCheck,
    pub converged: bool,
    pub n_subjects: usize,
    pub n_responses: usize,
    pub natural: NaturalParams,
    pub tables: FitTables,
    pub trace: Vec<IterationRecord>,
}

impl FitResult {
    pub fn layout(&self) -> Layout {
        self.spec.layout()
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let n = self.theta.len();
        DMatrix::from_fn(n, n, |i, j| self.vcov[i][j])
    }

    pub fn standard_errors(&self) -> Vec<Option<f64>> {
        (0..self.theta.len())
            .map(|j| self.se_available[j].then(|| libm::sqrt(self.vcov[j][j].max(0.0))))
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.theta.len()
    }

    /// Delta-method SE of a scalar transform of `θ`; `None` if it depends on
    /// a parameter whose variance is unavailable.
    pub fn delta_se(&self, transform: &dyn Fn(&[f64]) -> f64) -> Estimate {
        delta_estimate(&self.theta, &self.vcov_matrix(), &self.se_available, transform)
    }

    /// SE of a linear combination `aᵀθ`, computed exactly.
    pub fn linear_se(&self, a: &[f64]) -> Option<f64> {
        linear_se(&self.vcov_matrix(), &self.se_available, a)
    }
}

fn linear_se(v: &DMatrix<f64>, available: &[bool], a: &[f64]) -> Option<f64> {
    if a.iter().zip(available).any(|(x, ok)| *x != 0.0 && !ok) {
        return None;
    }
    Some(quadratic_se(v, a).0)
}

fn delta_estimate(theta: &[f64], v: &DMatrix<f64>, available: &[bool], transform: &dyn Fn(&[f64]) -> f64) -> Estimate {
    let jac = transform_gradient(theta, transform);
    Estimate {
        estimate: transform(theta),
        se: linear_se(v, available, &jac),
    }
}

fn build_tables(spec: &ModelSpec, theta: &[f64], v: &DMatrix<f64>, available: &[bool]) -> Result<FitTables> {
    let layout = spec.layout();
    let nat = unpack(theta, &layout)?;
    let nat_of = |t: &[f64]| unpack(t, &layout).expect("layout checked");
    let mut tables = FitTables::default();

    for (k, item) in spec.items.iter().enumerate() {
        let discrimination = delta_estimate(theta, v, available, &|t| nat_of(t).items[k].discrimination());
        let thresholds = (0..item.n_levels - 1)
            .map(|l| delta_estimate(theta, v, available, &|t| nat_of(t).items[k].thresholds[l]))
            .collect();
        tables.items.push(ItemRow {
            item_id: item.item_id.clone(),
            discrimination,
            thresholds,
        });
    }

    let ses: Vec<Option<f64>> = (0..theta.len())
        .map(|j| available[j].then(|| libm::sqrt(v[(j, j)].max(0.0))))
        .collect();
    for (j, name) in spec.fixed_labels().into_iter().enumerate() {
        tables.fixed.push(CoefficientRow::new(name, theta[j], ses[j]));
    }

    let labels = spec.random_labels();
    let p = labels.len();
    for r in 0..p {
        for c in r..p {
            let se = if r == 0 && c == 0 {
                None
            } else {
                delta_estimate(theta, v, available, &|t| nat_of(t).covariance[r * p + c]).se
            };
            tables.covariance.push(CovarianceRow {
                row: labels[r].clone(),
                col: labels[c].clone(),
                estimate: nat.covariance[r * p + c],
                se,
            });
        }
    }

    let nk = spec.items.len();
    for (c, term) in spec.contrast_labels().into_iter().enumerate() {
        for (k, item) in spec.items.iter().enumerate() {
            let mut a = vec![0.0; theta.len()];
            let derived = k + 1 == nk;
            if derived {
                for other in 0..nk - 1 {
                    a[layout.contrast_index(c, other).expect("free contrast")] = -1.0;
                }
            } else {
                a[layout.contrast_index(c, k).expect("free contrast")] = 1.0;
            }
            let se = linear_se(v, available, &a);
            let estimate = nat.gammas[k][c];
            let z = se.filter(|s| *s > 0.0).map(|s| estimate / s);
            tables.contrasts.push(ContrastRow {
                term: term.clone(),
                item_id: item.item_id.clone(),
                estimate,
                se,
                z,
                p_value: z.map(two_sided_p),
                derived,
            });
        }
    }
    Ok(tables)
}

/// Fits a prepared model.
pub fn fit_model<E: Executor>(
    model: &LikelihoodModel,
    options: &FitOptions,
    init: Option<&[f64]>,
    exec: &E,
) -> Result<FitResult> {
    fit_model_observed(model, options, init, exec, &mut |_| {})
}

/// [`fit_model`] with each optimizer trace record passed to `observer`.
pub fn fit_model_observed<E: Executor>(
    model: &LikelihoodModel,
    options: &FitOptions,
    init: Option<&[f64]>,
    exec: &E,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<FitResult> {
    match init {
        Some(t) => fit_prepared(model, options, Start::Original(t), exec, observer),
        None => Err(Error::Invalid("fit_model needs starting values".into())),
    }
}

#[derive(Clone, Copy)]
enum Start<'a> {
    /// Values on the original basis.
    Original(&'a [f64]),
    /// Default values (`β = 0`, `C = I`), used as is on the optimized basis.
    Default(&'a [f64]),
}

impl<'a> Start<'a> {
    fn values(self) -> &'a [f64] {
        match self {
            Start::Original(t) | Start::Default(t) => t,
        }
    }
}

fn fit_prepared<E: Executor>(
    model: &LikelihoodModel,
    options: &FitOptions,
    start: Start<'_>,
    exec: &E,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<FitResult> {
    options.validate()?;
    let layout = model.layout();
    let theta0 = start.values();
    if theta0.len() != layout.len() {
        return Err(Error::Layout {
            expected: layout.len(),
            got: theta0.len(),
        });
    }
    let map = if options.cardinal_basis { CardinalMap::new(model.spec()) } else { None };
    let (outcome, raw_theta, v, raw_gradient, unavailable, non_pd) = match &map {
        Some(map) => {
            let inner = map.model(model);
            let start = match start {
                Start::Original(t) => map.from_original(t, layout)?,
                Start::Default(t) => t.to_vec(),
            };
            let outcome = maximize_observed(&LikelihoodObjective::new(&inner, exec), &start, options, observer)?;
            let variance = variance_of_estimates(&outcome.hessian);
            let jac = map.jacobian(&outcome.theta, layout)?;
            let v = &jac * &variance.v * jac.transpose();
            let n = jac.nrows();
            let unavailable: Vec<bool> =
                (0..n).map(|i| (0..n).any(|j| variance.unavailable[j] && jac[(i, j)] != 0.0)).collect();
            // the score transforms with the inverse transpose of the Jacobian
            let g = DVector::from_column_slice(&outcome.gradient);
            let g = jac
                .transpose()
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Optimization("singular cardinal-basis Jacobian".into()))?;
            let theta = map.to_original(&outcome.theta, layout)?;
            (outcome, theta, v, g.as_slice().to_vec(), unavailable, variance.non_pd)
        }
        None => {
            let outcome = maximize_observed(&LikelihoodObjective::new(model, exec), theta0, options, observer)?;
            let variance = variance_of_estimates(&outcome.hessian);
            let theta = outcome.theta.clone();
            let g = outcome.gradient.clone();
            (outcome, theta, variance.v, g, variance.unavailable, variance.non_pd)
        }
    };

    let (theta, signs) = canonicalize(&raw_theta, layout)?;
    let n = theta.len();
    let v = DMatrix::from_fn(n, n, |i, j| signs[i] * signs[j] * v[(i, j)]);
    let gradient: Vec<f64> = raw_gradient.iter().zip(&signs).map(|(g, s)| g * s).collect();
    let available: Vec<bool> = unavailable.iter().map(|u| !u).collect();
    let natural = unpack(&theta, layout)?;
    let tables = build_tables(model.spec(), &theta, &v, &available)?;
    let converged = outcome.converged();

    Ok(FitResult {
        layout_version: LAYOUT_VERSION,
        spec: model.spec().clone(),
        options: options.clone(),
        parameter_names: layout.names().to_vec(),
        theta,
        vcov: (0..n).map(|i| (0..n).map(|j| v[(i, j)]).collect()).collect(),
        se_available: available,
        non_pd_hessian: non_pd,
        loglik: outcome.value,
        gradient,
        n_iter: outcome.n_iter,
        termination: outcome.termination,
        convergence: outcome.convergence,
        converged,
        n_subjects: model.subjects().len(),
        n_responses: model.n_responses(),
        natural,
        tables,
        trace: outcome.trace,
    })
}

/// Fits `spec` to `ds` from `init` or from the default starting values.
pub fn fit<E: Executor>(
    ds: &LongDataset,
    spec: &ModelSpec,
    options: &FitOptions,
    init: Option<&[f64]>,
    exec: &E,
) -> Result<FitResult> {
    fit_observed(ds, spec, options, init, exec, &mut |_| {})
}

/// [`fit`] with each optimizer trace record passed to `observer`.
pub fn fit_observed<E: Executor>(
    ds: &LongDataset,
    spec: &ModelSpec,
    options: &FitOptions,
    init: Option<&[f64]>,
    exec: &E,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<FitResult> {
    options.validate()?;
    let model = LikelihoodModel::new(ds, spec, options.n_qmc, options.seed)?;
    let default;
    let start = match init {
        Some(t) => Start::Original(t),
        None => {
            default = initial_theta(ds, spec);
            Start::Default(&default)
        }
    };
    let n = start.values().len();
    fit_prepared(&model, options, start, exec, observer).map_err(|e| match e {
        Error::Optimization(msg) => Error::Optimization(format!("{n} parameters: {msg}")),
        other => other,
    })
}


//! Marquardt–Levenberg maximization with convergence on the parameters, the
//! objective and the relative distance to the maximum `gᵀ(-H)⁻¹g / dim`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective to be maximized.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Objective value; `-inf` marks an infeasible point.
    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        central_gradient(&|t: &[f64]| self.value(t), theta)
    }

    /// Hessian by forward differences of [`Objective::gradient`], symmetrized.
    fn hessian(&self, theta: &[f64], gradient: &[f64]) -> Result<DMatrix<f64>> {
        forward_hessian(&|t: &[f64]| self.gradient(t), theta, gradient)
    }

    /// Gradient and `-Σ s_i s_iᵀ` when the objective is a sum of independent
    /// contributions with scores `s_i`; `None` otherwise.
    fn score_curvature(&self, _theta: &[f64]) -> Result<Option<(Vec<f64>, DMatrix<f64>)>> {
        Ok(None)
    }
}

/// Adapts a closure to [`Objective`] with numeric derivatives.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok((self.f)(theta))
    }
}

#[inline]
pub fn fd_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-5)
}

type ScalarFn<'a> = dyn Fn(&[f64]) -> Result<f64> + 'a;
type VectorFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a;

/// Central-difference gradient. A non-finite probe shrinks the step once by
/// a factor 10 before failing with the coordinate.
pub fn central_gradient(f: &ScalarFn, theta: &[f64]) -> Result<Vec<f64>> {
    let mut work = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let mut h = fd_step(theta[j]);
        let mut done = None;
        for _ in 0..2 {
            work[j] = theta[j] + h;
            let up = f(&work)?;
            work[j] = theta[j] - h;
            let down = f(&work)?;
            work[j] = theta[j];
            if up.is_finite() && down.is_finite() {
                done = Some((up - down) / (2.0 * h));
                break;
            }
            h /= 10.0;
        }
        g.push(done.ok_or(Error::NonFiniteProbe { coordinate: j })?);
    }
    Ok(g)
}

/// Symmetrized forward-difference Jacobian of a gradient.
pub fn forward_hessian(grad: &VectorFn, theta: &[f64], g0: &[f64]) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut h = DMatrix::zeros(n, n);
    let mut work = theta.to_vec();
    for j in 0..n {
        let mut step = fd_step(theta[j]);
        let mut col = None;
        for _ in 0..2 {
            work[j] = theta[j] + step;
            let probe = match grad(&work) {
                Ok(g) if g.iter().all(|v| v.is_finite()) => Some(g),
                Ok(_) | Err(Error::ZeroProbability { .. }) | Err(Error::NonFiniteProbe { .. }) => None,
                Err(e) => return Err(e),
            };
            work[j] = theta[j];
            if let Some(g) = probe {
                col = Some(g);
                break;
            }
            step /= 10.0;
        }
        let g = col.ok_or(Error::NonFiniteProbe { coordinate: j })?;
        for i in 0..n {
            h[(i, j)] = (g[i] - g0[i]) / step;
        }
    }
    Ok(symmetrize(&h))
}

/// `(A + Aᵀ) / 2`, exactly symmetric.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Central gradient and forward-difference Hessian of a scalar function.
pub fn numeric_gradient_hessian(objective: &dyn Fn(&[f64]) -> f64, theta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let f = |t: &[f64]| Ok(objective(t));
    let g = central_gradient(&f, theta)?;
    let grad = |t: &[f64]| central_gradient(&f, t);
    let h = forward_hessian(&grad, theta, &g)?;
    Ok((g, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub eps_param: f64,
    pub eps_fn: f64,
    /// Tolerance on the relative distance to the maximum.
    pub eps_rdm: f64,
    pub max_iter: usize,
    pub n_qmc: usize,
    pub seed: u64,
    pub curvature: Curvature,
    /// Optimize natural-spline coefficients on the cardinal functions of
    /// [`crate::cardinal`] and report them on the original basis.
    pub cardinal_basis: bool,
}

/// Curvature matrix used to form the Marquardt steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    /// Finite-difference Hessian at every iteration.
    Exact,
    /// Minus the outer product of per-subject scores until a step fails to
    /// increase the objective or the parameter and function criteria hold,
    /// then the exact Hessian for every remaining iteration.
    #[default]
    Hybrid,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            eps_param: 1e-4,
            eps_fn: 1e-4,
            eps_rdm: 1e-4,
            max_iter: 100,
            n_qmc: 1000,
            seed: 20_240_501,
            curvature: Curvature::Hybrid,
            cardinal_basis: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_param", self.eps_param),
            ("eps_fn", self.eps_fn),
            ("eps_rdm", self.eps_rdm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_qmc == 0 {
            return Err(Error::Invalid("n_qmc must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    /// `Σ(θ_j - θ_j^prev)² / dim`
    pub param: f64,
    /// `|ℒ - ℒ_prev|`
    pub function: f64,
    /// `gᵀ(-H)⁻¹g / dim`; `None` when `-H` is not positive definite.
    pub rdm: Option<f64>,
    pub param_ok: bool,
    pub function_ok: bool,
    pub rdm_ok: bool,
}

impl ConvergenceCheck {
    pub fn all(&self) -> bool {
        self.param_ok && self.function_ok && self.rdm_ok
    }
}

/// `gᵀ(-H)⁻¹g / dim`, or `None` if `-H` is not positive definite.
pub fn relative_distance(g: &[f64], h: &DMatrix<f64>) -> Option<f64> {
    let n = g.len();
    if n == 0 {
        return Some(0.0);
    }
    let neg = -h;
    let chol = neg.cholesky()?;
    let gv = DVector::from_column_slice(g);
    let x = chol.solve(&gv);
    let v = gv.dot(&x) / n as f64;
    v.is_finite().then_some(v)
}

pub fn convergence_check(
    theta_prev: &[f64],
    theta: &[f64],
    loglik_prev: f64,
    loglik: f64,
    g: &[f64],
    h: &DMatrix<f64>,
    options: &FitOptions,
) -> ConvergenceCheck {
    let n = theta.len().max(1) as f64;
    let param = theta.iter().zip(theta_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let function = (loglik - loglik_prev).abs();
    let rdm = relative_distance(g, h);
    ConvergenceCheck {
        param,
        function,
        rdm,
        param_ok: param < options.eps_param,
        function_ok: function < options.eps_fn,
        rdm_ok: rdm.is_some_and(|r| r < options.eps_rdm),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub lambda: f64,
    pub param: f64,
    pub function: f64,
    pub rdm: Option<f64>,
    pub rejected_steps: usize,
    /// The step used the exact Hessian; otherwise `rdm` is computed from the
    /// score outer product.
    pub exact_hessian: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No ascent step found with the damping at its ceiling.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct MaximizeOutcome {
    pub theta: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub n_iter: usize,
    pub convergence: ConvergenceCheck,
    pub termination: Termination,
    pub trace: Vec<IterationRecord>,
}

impl MaximizeOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

const LAMBDA_START: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e8;
const LAMBDA_MIN: f64 = 1e-12;
const NEAR_ZERO_DIAGONAL: f64 = 1e-12;

/// Solves `(M + λ·inflation) δ = g` with `M = -H`; `None` if the inflated
/// matrix is not positive definite.
fn damped_step(neg_h: &DMatrix<f64>, g: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let n = g.len();
    let mut m = neg_h.clone();
    for j in 0..n {
        let d = m[(j, j)];
        m[(j, j)] = if d.abs() < NEAR_ZERO_DIAGONAL {
            d + lambda
        } else {
            d + lambda * d.abs()
        };
    }
    let chol = m.cholesky()?;
    let step = chol.solve(&DVector::from_column_slice(g));
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Marquardt–Levenberg ascent from `theta0`.
pub fn maximize(objective: &dyn Objective, theta0: &[f64], options: &FitOptions) -> Result<MaximizeOutcome> {
    maximize_observed(objective, theta0, options, &mut |_| {})
}

/// [`maximize`], passing each trace record to `observer` as it is produced.
pub fn maximize_observed(
    objective: &dyn Objective,
    theta0: &[f64],
    options: &FitOptions,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<MaximizeOutcome> {
    options.validate()?;
    if theta0.len() != objective.dim() {
        return Err(Error::Layout {
            expected: objective.dim(),
            got: theta0.len(),
        });
    }
    let n = theta0.len();
    let mut theta = theta0.to_vec();
    let mut value = objective.value(&theta)?;
    if !value.is_finite() {
        return Err(Error::Initialization);
    }
    let mut lambda = LAMBDA_START;
    let mut trace = Vec::new();
    let mut record = |trace: &mut Vec<IterationRecord>, r: IterationRecord| {
        observer(&r);
        trace.push(r);
    };
    // criteria 1 and 2 of the last accepted step
    let mut pending: Option<(f64, f64)> = None;
    let mut iter = 0;

    let mut exact = options.curvature == Curvature::Exact;

    loop {
        let approx = if exact { None } else { objective.score_curvature(&theta)? };
        let is_exact = approx.is_none();
        exact = is_exact;
        let (g, h) = match approx {
            Some(gh) => gh,
            None => {
                let g = objective.gradient(&theta)?;
                let h = objective.hessian(&theta, &g)?;
                (g, h)
            }
        };
        let rdm = relative_distance(&g, &h);
        let rdm_ok = is_exact && rdm.is_some_and(|r| r < options.eps_rdm);
        if !is_exact {
            let near = pending.is_some_and(|(param, function)| param < options.eps_param && function < options.eps_fn);
            if near || iter >= options.max_iter {
                exact = true;
                continue;
            }
        }
        if let Some((param, function)) = pending {
            let check = ConvergenceCheck {
                param,
                function,
                rdm,
                param_ok: param < options.eps_param,
                function_ok: function < options.eps_fn,
                rdm_ok,
            };
            if check.all() || iter >= options.max_iter {
                let termination = if check.all() {
                    Termination::Converged
                } else {
                    Termination::MaxIterations
                };
                return Ok(MaximizeOutcome {
                    theta,
                    value,
                    gradient: g,
                    hessian: h,
                    n_iter: iter,
                    convergence: check,
                    termination,
                    trace,
                });
            }
        } else if iter >= options.max_iter {
            let check = ConvergenceCheck {
                param: f64::INFINITY,
                function: f64::INFINITY,
                rdm,
                param_ok: false,
                function_ok: false,
                rdm_ok,
            };
            return Ok(MaximizeOutcome {
                theta,
                value,
                gradient: g,
                hessian: h,
                n_iter: iter,
                convergence: check,
                termination: Termination::MaxIterations,
                trace,
            });
        }
        iter += 1;

        let neg_h = -&h;
        let mut rejected = 0;
        let mut best_rejected: Option<(f64, f64)> = None;
        let accepted = loop {
            if lambda > LAMBDA_MAX {
                break None;
            }
            let Some(step) = damped_step(&neg_h, &g, lambda) else {
                lambda *= 10.0;
                rejected += 1;
                continue;
            };
            let candidate: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
            let cand_value = objective.value(&candidate)?;
            if cand_value.is_finite() && cand_value > value {
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                break Some((candidate, cand_value, step));
            }
            if cand_value.is_finite() && best_rejected.is_none() {
                let param = step.iter().map(|s| s * s).sum::<f64>() / n.max(1) as f64;
                best_rejected = Some((param, (cand_value - value).abs()));
            }
            // already at the maximum to within tolerance: stay put
            if let Some((param, function)) = best_rejected {
                if rdm_ok && param < options.eps_param && function < options.eps_fn {
                    record(&mut trace, IterationRecord {
                        iteration: iter,
                        loglik: value,
                        lambda,
                        param,
                        function,
                        rdm,
                        rejected_steps: rejected + 1,
                        exact_hessian: true,
                    });
                    return Ok(MaximizeOutcome {
                        theta,
                        value,
                        gradient: g,
                        hessian: h,
                        n_iter: iter,
                        convergence: ConvergenceCheck {
                            param,
                            function,
                            rdm,
                            param_ok: true,
                            function_ok: true,
                            rdm_ok: true,
                        },
                        termination: Termination::Converged,
                        trace,
                    });
                }
            }
            if !is_exact {
                break None;
            }
            lambda *= 10.0;
            rejected += 1;
        };

        match accepted {
            Some((candidate, cand_value, step)) => {
                let param = step.iter().map(|s| s * s).sum::<f64>() / n.max(1) as f64;
                let function = (cand_value - value).abs();
                record(&mut trace, IterationRecord {
                    iteration: iter,
                    loglik: cand_value,
                    lambda,
                    param,
                    function,
                    rdm,
                    rejected_steps: rejected,
                    exact_hessian: is_exact,
                });
                theta = candidate;
                value = cand_value;
                pending = Some((param, function));
            }
            None if !is_exact => {
                exact = true;
                lambda = LAMBDA_START;
            }
            None => {
                if damped_step(&neg_h, &g, LAMBDA_MAX).is_none() {
                    return Err(Error::Optimization(format!(
                        "inflated Hessian not positive definite at iteration {iter} (λ = {LAMBDA_MAX:e})"
                    )));
                }
                let (param, function) = best_rejected.unwrap_or((f64::INFINITY, f64::INFINITY));
                return Ok(MaximizeOutcome {
                    theta,
                    value,
                    gradient: g,
                    hessian: h,
                    n_iter: iter,
                    convergence: ConvergenceCheck {
                        param,
                        function,
                        rdm,
                        param_ok: param < options.eps_param,
                        function_ok: function < options.eps_fn,
                        rdm_ok,
                    },
                    termination: Termination::Stalled,
                    trace,
                });
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceEstimate {
    /// `(-H)⁻¹`, symmetric.
    pub v: DMatrix<f64>,
    /// `-H` had eigenvalues that were not clearly positive.
    pub non_pd: bool,
    /// Parameters loading on a clipped direction; their SEs are unavailable.
    pub unavailable: Vec<bool>,
}

impl VarianceEstimate {
    pub fn standard_errors(&self) -> Vec<Option<f64>> {
        (0..self.v.nrows())
            .map(|j| (!self.unavailable[j]).then(|| libm::sqrt(self.v[(j, j)].max(0.0))))
            .collect()
    }
}

/// `V = (-H)⁻¹` through the eigendecomposition of `-H`; eigenvalues that are
/// not clearly positive are dropped (pseudo-inverse) and flagged.
pub fn variance_of_estimates(h: &DMatrix<f64>) -> VarianceEstimate {
    let n = h.nrows();
    let neg = symmetrize(&(-h));
    let eig = neg.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * max_ev.max(f64::MIN_POSITIVE);
    let mut v = DMatrix::zeros(n, n);
    let mut clipped_load = vec![0.0; n];
    let mut non_pd = false;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        if ev > tol {
            v += (col * col.transpose()) / ev;
        } else {
            non_pd = true;
            for j in 0..n {
                clipped_load[j] += col[j] * col[j];
            }
        }
    }
    VarianceEstimate {
        v: symmetrize(&v),
        non_pd,
        unavailable: clipped_load.iter().map(|&l| l > 1e-6).collect(),
    }
}

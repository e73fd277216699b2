//! Wald and likelihood-ratio tests, and the measurement-invariance workflow.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::LongDataset;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fitting::{fit, ContrastRow, FitResult};
use crate::model::ModelSpec;
use crate::optimizer::FitOptions;
use crate::special::chi2_sf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Wald,
    Lrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub kind: TestKind,
    /// A negative likelihood-ratio statistic was clamped at zero.
    #[serde(default)]
    pub clamped: bool,
}

/// Two-sided normal p-value `2(1 - Φ(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() * core::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail of `χ²_df`; `df = 0` gives 1.
pub fn chi2_p(statistic: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    chi2_sf(statistic.max(0.0), df as f64)
}

/// `z = estimate / se` with a two-sided normal p-value.
pub fn wald_univariate(estimate: f64, se: f64) -> Result<TestResult> {
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::RankDeficient(format!("standard error {se}")));
    }
    let z = estimate / se;
    Ok(TestResult {
        statistic: z * z,
        df: 1,
        p_value: two_sided_p(z),
        kind: TestKind::Wald,
        clamped: false,
    })
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |a, b| a.max(*b));
    let tol = max * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|s| **s > tol).count()
}

/// `W = (Lθ - r)ᵀ (L V Lᵀ)⁻¹ (Lθ - r)` with `df = rank(L)`.
pub fn wald_test(theta: &[f64], v: &DMatrix<f64>, l: &DMatrix<f64>, r: &[f64]) -> Result<TestResult> {
    if l.ncols() != theta.len() || r.len() != l.nrows() {
        return Err(Error::Invalid(format!(
            "contrast matrix is {}x{}, parameters {}, null values {}",
            l.nrows(),
            l.ncols(),
            theta.len(),
            r.len()
        )));
    }
    let rank = matrix_rank(l);
    if rank < l.nrows() {
        return Err(Error::RankDeficient(format!(
            "{} combinations but rank {rank}",
            l.nrows()
        )));
    }
    let d = l * DVector::from_column_slice(theta) - DVector::from_column_slice(r);
    let m = l * v * l.transpose();
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(format!("L V Lᵀ ({}x{}) is singular", l.nrows(), l.nrows())))?;
    let statistic = d.dot(&chol.solve(&d)).max(0.0);
    Ok(TestResult {
        statistic,
        df: rank,
        p_value: chi2_p(statistic, rank),
        kind: TestKind::Wald,
        clamped: false,
    })
}

/// Selection matrix picking `indices` out of `n` parameters.
pub fn selection_matrix(indices: &[usize], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(indices.len(), n);
    for (row, &j) in indices.iter().enumerate() {
        l[(row, j)] = 1.0;
    }
    l
}

/// Wald test of `Lθ = r` on a fitted model.
pub fn wald_fit(fit: &FitResult, l: &DMatrix<f64>, r: &[f64]) -> Result<TestResult> {
    for (row, lrow) in l.row_iter().enumerate() {
        for (j, x) in lrow.iter().enumerate() {
            if *x != 0.0 && !fit.se_available[j] {
                return Err(Error::RankDeficient(format!(
                    "row {row} involves {} whose variance is unavailable",
                    fit.parameter_names[j]
                )));
            }
        }
    }
    wald_test(&fit.theta, &fit.vcov_matrix(), l, r)
}

/// Likelihood-ratio test between nested fits, given in either order.
pub fn lrt(a: &FitResult, b: &FitResult) -> Result<TestResult> {
    let (full, reduced) = if a.n_parameters() >= b.n_parameters() { (a, b) } else { (b, a) };
    if full.spec.items != reduced.spec.items || full.n_responses != reduced.n_responses {
        return Err(Error::NotNested("the fits use different items or data".into()));
    }
    for name in &reduced.parameter_names {
        if !full.parameter_names.contains(name) {
            return Err(Error::NotNested(format!("{name} is not a parameter of the larger model")));
        }
    }
    let df = full.n_parameters() - reduced.n_parameters();
    let raw = 2.0 * (full.loglik - reduced.loglik);
    let clamped = raw < 0.0;
    let statistic = raw.max(0.0);
    Ok(TestResult {
        statistic,
        df,
        p_value: chi2_p(statistic, df),
        kind: TestKind::Lrt,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceMode {
    /// Differential item functioning: contrasts on covariates.
    Dif,
    /// Response shift: contrasts on time functions.
    Rs,
}

impl InvarianceMode {
    pub fn default_global_test(self) -> TestKind {
        match self {
            InvarianceMode::Dif => TestKind::Wald,
            InvarianceMode::Rs => TestKind::Lrt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTest {
    pub item_id: String,
    pub test: TestResult,
    /// The item's contrasts are minus the sum of the others.
    pub derived: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralComparison {
    pub name: String,
    pub without_contrasts: f64,
    pub without_contrasts_se: Option<f64>,
    pub with_contrasts: f64,
    pub with_contrasts_se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub mode: InvarianceMode,
    pub global: TestResult,
    pub global_wald: Option<TestResult>,
    pub global_lrt: Option<TestResult>,
    pub per_item: Vec<ItemTest>,
    pub contrasts: Vec<ContrastRow>,
    pub structural: Vec<StructuralComparison>,
    pub loglik_without: f64,
    pub loglik_with: f64,
    pub converged_without: bool,
    pub converged_with: bool,
    /// Per-item p-values are not adjusted for multiplicity.
    pub note: String,
}

/// Rows of `L` expressing item `k`'s contrasts as linear functions of `θ`.
pub fn item_contrast_rows(fit: &FitResult, item: usize) -> DMatrix<f64> {
    let layout = fit.layout();
    let nc = layout.n_contrasts();
    let nk = layout.n_items();
    let mut l = DMatrix::zeros(nc, layout.len());
    for c in 0..nc {
        if item + 1 == nk {
            for other in 0..nk - 1 {
                l[(c, layout.contrast_index(c, other).expect("free contrast"))] = -1.0;
            }
        } else {
            l[(c, layout.contrast_index(c, item).expect("free contrast"))] = 1.0;
        }
    }
    l
}

/// Global and per-item tests from an already fitted pair of models.
pub fn invariance_from_fits(
    without: &FitResult,
    with: &FitResult,
    mode: InvarianceMode,
    global_kind: TestKind,
) -> Result<InvarianceReport> {
    let layout = with.layout();
    if layout.n_contrasts() == 0 {
        return Err(Error::Spec("the contrast model has no contrast terms".into()));
    }
    let free: Vec<usize> = layout.contrast_range().collect();
    let global_wald = wald_fit(with, &selection_matrix(&free, layout.len()), &vec![0.0; free.len()]).ok();
    let global_lrt = lrt(with, without).ok();
    let global = match global_kind {
        TestKind::Wald => global_wald.clone(),
        TestKind::Lrt => global_lrt.clone(),
    }
    .ok_or_else(|| Error::RankDeficient(format!("global {global_kind:?} test unavailable")))?;

    let mut per_item = Vec::new();
    for (k, item) in with.spec.items.iter().enumerate() {
        let l = item_contrast_rows(with, k);
        let test = wald_fit(with, &l, &vec![0.0; l.nrows()])?;
        per_item.push(ItemTest {
            item_id: item.item_id.clone(),
            test,
            derived: k + 1 == with.spec.items.len(),
        });
    }

    let mut structural = Vec::new();
    for (a, b) in without.tables.fixed.iter().zip(&with.tables.fixed) {
        structural.push(StructuralComparison {
            name: a.name.clone(),
            without_contrasts: a.estimate,
            without_contrasts_se: a.se,
            with_contrasts: b.estimate,
            with_contrasts_se: b.se,
        });
    }
    for (a, b) in without.tables.covariance.iter().zip(&with.tables.covariance) {
        structural.push(StructuralComparison {
            name: format!("B[{},{}]", a.row, a.col),
            without_contrasts: a.estimate,
            without_contrasts_se: a.se,
            with_contrasts: b.estimate,
            with_contrasts_se: b.se,
        });
    }

    Ok(InvarianceReport {
        mode,
        global,
        global_wald,
        global_lrt,
        per_item,
        contrasts: with.tables.contrasts.clone(),
        structural,
        loglik_without: without.loglik,
        loglik_with: with.loglik,
        converged_without: without.converged,
        converged_with: with.converged,
        note: String::from("raw p-values, no multiplicity adjustment; the last item's contrasts are minus the sum of the others"),
    })
}

/// Fits the model with and without its contrast terms and tests them.
pub fn invariance_report<E: Executor>(
    ds: &LongDataset,
    spec: &ModelSpec,
    options: &FitOptions,
    mode: InvarianceMode,
    global_kind: Option<TestKind>,
    exec: &E,
) -> Result<InvarianceReport> {
    if spec.n_contrasts() == 0 {
        return Err(Error::Spec("invariance testing needs contrast terms".into()));
    }
    for t in &spec.design.contrasts {
        let ok = match mode {
            InvarianceMode::Dif => t.covariate.is_some(),
            InvarianceMode::Rs => t.time.is_some(),
        };
        if !ok {
            return Err(Error::Spec(format!(
                "{mode:?} mode expects {} contrast terms",
                match mode {
                    InvarianceMode::Dif => "covariate",
                    InvarianceMode::Rs => "time-function",
                }
            )));
        }
    }
    let reduced_spec = spec.without_contrasts();
    let without = fit(ds, &reduced_spec, options, None, exec)?;
    // start the contrast model from the constrained estimates
    let layout = spec.layout();
    let mut init = crate::parameters::initial_theta(ds, spec);
    init[..without.theta.len()].copy_from_slice(&without.theta);
    for j in layout.contrast_range() {
        init[j] = 0.0;
    }
    let with = fit(ds, spec, options, Some(&init), exec)?;
    invariance_from_fits(&without, &with, mode, global_kind.unwrap_or(mode.default_global_test()))
}

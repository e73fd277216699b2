//! Time functions and design rows for the structural model.
//!
//! The natural cubic spline basis is the truncated-power construction on the
//! time axis rescaled so that the boundary knots map to 0 and 1. With knots
//! `k_0 < k_1 < ... < k_{m+1}` on that scale the columns are
//!
//! ```text
//! N_1(u)     = u
//! N_{j+2}(u) = d_j(u) - d_m(u),   j = 0..m-1
//! d_j(u)     = ((u - k_j)^3_+ - (u - k_{m+1})^3_+) / (k_{m+1} - k_j)
//! ```
//!
//! which is cubic between knots, C² everywhere and linear outside the boundary
//! knots. No orthogonalization is applied.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeBasis {
    Ncs {
        internal_knots: Vec<f64>,
        boundary_knots: [f64; 2],
    },
    Polynomial {
        degree: usize,
    },
    Identity,
}

impl TimeBasis {
    pub fn ncs(internal_knots: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        let b = TimeBasis::Ncs {
            internal_knots,
            boundary_knots: [lower, upper],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TimeBasis::Ncs {
                internal_knots,
                boundary_knots: [lo, hi],
            } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Spec(format!("boundary knots [{lo}, {hi}] must be finite and increasing")));
                }
                let mut prev = *lo;
                for &k in internal_knots {
                    if !(k > prev && k < *hi) {
                        return Err(Error::Spec(format!(
                            "internal knot {k} must be strictly increasing and strictly inside ({lo}, {hi})"
                        )));
                    }
                    prev = k;
                }
                Ok(())
            }
            TimeBasis::Polynomial { degree } if *degree == 0 => {
                Err(Error::Spec("polynomial degree must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of non-intercept time functions.
    pub fn dim(&self) -> usize {
        match self {
            TimeBasis::Ncs { internal_knots, .. } => internal_knots.len() + 1,
            TimeBasis::Polynomial { degree } => *degree,
            TimeBasis::Identity => 1,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        match self {
            TimeBasis::Ncs { .. } => (1..=self.dim()).map(|j| format!("ns{j}")).collect(),
            TimeBasis::Polynomial { .. } => (1..=self.dim()).map(|j| format!("t^{j}")).collect(),
            TimeBasis::Identity => alloc::vec![String::from("t")],
        }
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim()];
        self.evaluate_into(t, &mut out);
        out
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        match self {
            TimeBasis::Ncs {
                internal_knots,
                boundary_knots,
            } => ncs_eval(t, internal_knots, *boundary_knots, out),
            TimeBasis::Polynomial { degree } => {
                let mut pow = 1.0;
                for o in out.iter_mut().take(*degree) {
                    pow *= t;
                    *o = pow;
                }
            }
            TimeBasis::Identity => out[0] = t,
        }
    }
}

/// Natural cubic spline basis values at `t`.
pub fn ncs_basis(t: f64, basis: &TimeBasis) -> Result<Vec<f64>> {
    match basis {
        TimeBasis::Ncs { .. } => Ok(basis.evaluate(t)),
        _ => Err(Error::Spec("ncs_basis requires a natural cubic spline basis".into())),
    }
}

#[inline]
fn cube_plus(x: f64) -> f64 {
    if x > 0.0 {
        x * x * x
    } else {
        0.0
    }
}

fn ncs_eval(t: f64, internal: &[f64], [lo, hi]: [f64; 2], out: &mut [f64]) {
    let width = hi - lo;
    let u = (t - lo) / width;
    let m = internal.len();
    let knot = |j: usize| -> f64 {
        if j == 0 {
            0.0
        } else if j == m + 1 {
            1.0
        } else {
            (internal[j - 1] - lo) / width
        }
    };
    let last = cube_plus(u - 1.0);
    let d = |j: usize| -> f64 { (cube_plus(u - knot(j)) - last) / (1.0 - knot(j)) };
    out[0] = u;
    let dm = d(m);
    for j in 0..m {
        out[j + 1] = d(j) - dm;
    }
}

/// Sample quantiles (linear interpolation between order statistics, the
/// "type 7" rule). Used to place internal knots, e.g. at tertiles.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    probs
        .iter()
        .map(|&p| {
            if v.is_empty() {
                return f64::NAN;
            }
            let h = (v.len() - 1) as f64 * p;
            let lo = libm::floor(h) as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        })
        .collect()
}

/// Tertiles of the observed times.
pub fn tertile_knots(times: &[f64]) -> Vec<f64> {
    quantiles(times, &[1.0 / 3.0, 2.0 / 3.0])
}

/// One design column: an optional time function (1-based column of the basis)
/// times an optional covariate. Both absent is the intercept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<String>,
}

impl Term {
    pub fn intercept() -> Self {
        Term::default()
    }

    pub fn time(j: usize) -> Self {
        Term {
            time: Some(j),
            covariate: None,
        }
    }

    pub fn covariate(name: impl Into<String>) -> Self {
        Term {
            time: None,
            covariate: Some(name.into()),
        }
    }

    pub fn interaction(j: usize, name: impl Into<String>) -> Self {
        Term {
            time: Some(j),
            covariate: Some(name.into()),
        }
    }

    pub fn is_intercept(&self) -> bool {
        self.time.is_none() && self.covariate.is_none()
    }

    pub fn label(&self, basis: &TimeBasis) -> String {
        let names = basis.column_names();
        match (&self.time, &self.covariate) {
            (None, None) => String::from("intercept"),
            (Some(j), None) => names.get(j - 1).cloned().unwrap_or_else(|| format!("time{j}")),
            (None, Some(c)) => c.clone(),
            (Some(j), Some(c)) => {
                let t = names.get(j - 1).cloned().unwrap_or_else(|| format!("time{j}"));
                format!("{t}:{c}")
            }
        }
    }

    fn value(&self, time_values: &[f64], covariates: &dyn CovariateSource, basis: &TimeBasis) -> Result<f64> {
        let mut v = 1.0;
        if let Some(j) = self.time {
            v *= time_values[j - 1];
        }
        if let Some(name) = &self.covariate {
            let c = covariates.covariate(name).ok_or_else(|| {
                Error::Spec(format!("term {}: covariate '{name}' is missing", self.label(basis)))
            })?;
            v *= c;
        }
        Ok(v)
    }
}

/// Named covariate lookup used to build design rows.
pub trait CovariateSource {
    fn covariate(&self, name: &str) -> Option<f64>;
}

impl CovariateSource for alloc::collections::BTreeMap<String, f64> {
    fn covariate(&self, name: &str) -> Option<f64> {
        self.get(name).copied().filter(|v| !v.is_nan())
    }
}

impl CovariateSource for &[(&str, f64)] {
    fn covariate(&self, name: &str) -> Option<f64> {
        self.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// No covariates at all; every covariate term fails to resolve.
pub struct NoCovariates;

impl CovariateSource for NoCovariates {
    fn covariate(&self, _: &str) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Fixed effects; never an intercept.
    pub fixed: Vec<Term>,
    /// Random effects; the first is the intercept, the rest are time functions.
    pub random: Vec<Term>,
    /// Item-specific contrast terms (DIF covariates or response-shift time functions).
    #[serde(default)]
    pub contrasts: Vec<Term>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignRow {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub x_dif: Vec<f64>,
}

impl DesignSpec {
    pub fn validate(&self, basis: &TimeBasis) -> Result<()> {
        let q = basis.dim();
        let check_time = |t: &Term, what: &str| -> Result<()> {
            match t.time {
                Some(j) if j == 0 || j > q => Err(Error::Spec(format!(
                    "{what} term refers to time function {j}, basis has {q}"
                ))),
                _ => Ok(()),
            }
        };
        for t in &self.fixed {
            if t.is_intercept() {
                return Err(Error::Spec("fixed effects must not contain an intercept".into()));
            }
            check_time(t, "fixed")?;
        }
        match self.random.first() {
            Some(t) if t.is_intercept() => {}
            _ => return Err(Error::Spec("random effects must start with the intercept".into())),
        }
        for t in &self.random[1..] {
            if t.covariate.is_some() || t.time.is_none() {
                return Err(Error::Spec("random effects beyond the intercept must be time functions".into()));
            }
            check_time(t, "random")?;
        }
        for (i, a) in self.random.iter().enumerate() {
            if self.random[..i].contains(a) {
                return Err(Error::Spec("duplicate random-effect term".into()));
            }
        }
        for (i, a) in self.fixed.iter().enumerate() {
            if self.fixed[..i].contains(a) {
                return Err(Error::Spec(format!("duplicate fixed term {}", a.label(basis))));
            }
        }
        for t in &self.contrasts {
            if t.is_intercept() {
                return Err(Error::Spec("contrast terms must not be an intercept".into()));
            }
            check_time(t, "contrast")?;
        }
        Ok(())
    }

    pub fn design_rows(&self, basis: &TimeBasis, covariates: &dyn CovariateSource, t: f64) -> Result<DesignRow> {
        let tv = basis.evaluate(t);
        let build = |terms: &[Term]| -> Result<Vec<f64>> {
            terms.iter().map(|term| term.value(&tv, covariates, basis)).collect()
        };
        Ok(DesignRow {
            x: build(&self.fixed)?,
            z: build(&self.random)?,
            x_dif: build(&self.contrasts)?,
        })
    }
}

/// Free-function form of [`DesignSpec::design_rows`].
pub fn design_rows(spec: &DesignSpec, basis: &TimeBasis, covariates: &dyn CovariateSource, t: f64) -> Result<DesignRow> {
    spec.design_rows(basis, covariates, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_knot_basis() -> TimeBasis {
        TimeBasis::ncs(vec![7.0, 15.0], 0.0, 60.0).unwrap()
    }

    fn second_derivative(basis: &TimeBasis, t: f64, j: usize) -> f64 {
        let h = 1e-3;
        (basis.evaluate(t + h)[j] - 2.0 * basis.evaluate(t)[j] + basis.evaluate(t - h)[j]) / (h * h)
    }

    #[test]
    fn two_internal_knots_give_three_columns() {
        let b = two_knot_basis();
        assert_eq!(b.dim(), 3);
        assert_eq!(b.column_names(), vec!["ns1", "ns2", "ns3"]);
    }

    #[test]
    fn linear_beyond_boundaries() {
        let b = two_knot_basis();
        for &t in &[-10.0, -1.0, 61.0, 72.0, 100.0] {
            for j in 0..3 {
                assert!(second_derivative(&b, t, j).abs() < 1e-8, "t={t} col={j}");
            }
        }
    }

    #[test]
    fn knot_validation() {
        assert!(TimeBasis::ncs(vec![15.0, 7.0], 0.0, 60.0).is_err());
        assert!(TimeBasis::ncs(vec![0.0], 0.0, 60.0).is_err());
        assert!(TimeBasis::ncs(vec![70.0], 0.0, 60.0).is_err());
    }

    #[test]
    fn spline_by_group_design() {
        let basis = two_knot_basis();
        let mut fixed: Vec<Term> = (1..=3).map(Term::time).collect();
        fixed.push(Term::covariate("group"));
        fixed.extend((1..=3).map(|j| Term::interaction(j, "group")));
        let design = DesignSpec {
            fixed,
            random: core::iter::once(Term::intercept()).chain((1..=3).map(Term::time)).collect(),
            contrasts: vec![],
        };
        design.validate(&basis).unwrap();
        let covs: &[(&str, f64)] = &[("group", 0.0)];
        let row = design.design_rows(&basis, &covs, 20.0).unwrap();
        assert_eq!(row.x.len(), 7);
        assert_eq!(row.z.len(), 4);
        assert_eq!(row.z[0], 1.0);
        assert!(row.x[3..].iter().all(|&v| v == 0.0));
        let labels: Vec<String> = design.fixed.iter().map(|t| t.label(&basis)).collect();
        assert_eq!(labels[4], "ns1:group");
        assert!(design.design_rows(&basis, &NoCovariates, 1.0).is_err());
    }

    #[test]
    fn design_rejects_intercept_in_fixed() {
        let d = DesignSpec {
            fixed: vec![Term::intercept()],
            random: vec![Term::intercept()],
            contrasts: vec![],
        };
        assert!(d.validate(&TimeBasis::Identity).is_err());
    }

    #[test]
    fn tertiles() {
        let t: Vec<f64> = (0..=30).map(|i| i as f64).collect();
        let k = tertile_knots(&t);
        assert!((k[0] - 10.0).abs() < 1e-12 && (k[1] - 20.0).abs() < 1e-12);
    }
}

//! Cardinal reparameterization of a natural cubic spline.
//!
//! With anchors `a_1 < ... < a_q` (the internal knots and the upper boundary
//! knot) and `V[k][j] = N_j(a_k)`, the functions `G = N V⁻¹` take the value 1
//! at one anchor and 0 at the others. Coefficients on `G` are values of the
//! time trend at the anchors. A full set of spline terms sharing a covariate
//! is rewritten on `G`, so that `xᵀβ = x'ᵀβ'` with `x' = Tᵀx`, `β = Tβ'`, and
//! `zᵀb = z'ᵀb'` with `z' = Mᵀz`, `b = Mb'`. Both parameterizations give the
//! same exact likelihood. The QMC approximations differ by a rotation of the
//! nodes, since the triangular factor of `MBMᵀ` is not `CMᵀ`.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::likelihood::{LikelihoodModel, SubjectData};
use crate::model::ModelSpec;
use crate::parameters::Layout;
use crate::timebasis::{Term, TimeBasis};

#[derive(Clone, Debug)]
pub struct CardinalMap {
    t: DMatrix<f64>,
    m: DMatrix<f64>,
    t_inv: DMatrix<f64>,
    m_inv: DMatrix<f64>,
}

impl CardinalMap {
    /// `None` unless the basis is a natural cubic spline and at least one
    /// covariate group (or the random effects) carries every spline column.
    pub fn new(spec: &ModelSpec) -> Option<Self> {
        let TimeBasis::Ncs {
            internal_knots,
            boundary_knots,
        } = &spec.basis
        else {
            return None;
        };
        let q = spec.basis.dim();
        let anchors: Vec<f64> = internal_knots.iter().copied().chain([boundary_knots[1]]).collect();
        let v = DMatrix::from_fn(q, q, |k, j| spec.basis.evaluate(anchors[k])[j]);
        let a = v.try_inverse()?;

        let design = &spec.design;
        let mut t = DMatrix::identity(design.fixed.len(), design.fixed.len());
        let mut changed = false;
        let mut groups: Vec<Option<&str>> = Vec::new();
        for term in &design.fixed {
            let c = term.covariate.as_deref();
            if term.time.is_some() && !groups.contains(&c) {
                groups.push(c);
            }
        }
        for c in groups {
            if let Some(pos) = spline_positions(&design.fixed, c, q) {
                place(&mut t, &pos, &a);
                changed = true;
            }
        }
        let p = design.random.len();
        let mut m = DMatrix::identity(p, p);
        if let Some(pos) = spline_positions(&design.random, None, q) {
            place(&mut m, &pos, &a);
            changed = true;
        }
        if !changed {
            return None;
        }
        let t_inv = t.clone().try_inverse()?;
        let m_inv = m.clone().try_inverse()?;
        Some(CardinalMap { t, m, t_inv, m_inv })
    }

    /// Rewrites the design rows of every visit on the cardinal functions.
    pub fn transform_subjects(&self, subjects: &mut [SubjectData]) {
        for s in subjects {
            for visit in &mut s.visits {
                visit.x = apply_transpose(&self.t, &visit.x);
                visit.z = apply_transpose(&self.m, &visit.z);
            }
        }
    }

    /// The same data and nodes with design rows on the cardinal functions.
    pub fn model(&self, model: &LikelihoodModel) -> LikelihoodModel {
        let mut subjects = model.subjects().to_vec();
        self.transform_subjects(&mut subjects);
        LikelihoodModel::from_parts(model.spec().clone(), subjects, model.nodes().clone())
    }

    /// Packed parameters on the cardinal functions to the original basis.
    pub fn to_original(&self, theta: &[f64], layout: &Layout) -> Result<Vec<f64>> {
        map_theta(theta, layout, &self.t, &self.m)
    }

    /// Packed parameters on the original basis to the cardinal functions.
    pub fn from_original(&self, theta: &[f64], layout: &Layout) -> Result<Vec<f64>> {
        map_theta(theta, layout, &self.t_inv, &self.m_inv)
    }

    /// Jacobian of [`Self::to_original`] at `theta`; central differences in
    /// the Cholesky block.
    pub fn jacobian(&self, theta: &[f64], layout: &Layout) -> Result<DMatrix<f64>> {
        let n = theta.len();
        let mut jac = DMatrix::identity(n, n);
        let beta = layout.beta_range();
        jac.view_mut((beta.start, beta.start), (beta.len(), beta.len())).copy_from(&self.t);
        let chol = layout.chol_range();
        let mut x = theta.to_vec();
        for j in chol.clone() {
            let h = 1e-6 * x[j].abs().max(1.0);
            let orig = x[j];
            x[j] = orig + h;
            let up = self.to_original(&x, layout)?;
            x[j] = orig - h;
            let down = self.to_original(&x, layout)?;
            x[j] = orig;
            for i in chol.clone() {
                jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

/// Positions of `Term { time: j, covariate: c }` for `j = 1..=q`, if all occur.
fn spline_positions(terms: &[Term], c: Option<&str>, q: usize) -> Option<Vec<usize>> {
    (1..=q)
        .map(|j| terms.iter().position(|t| t.time == Some(j) && t.covariate.as_deref() == c))
        .collect()
}

fn place(target: &mut DMatrix<f64>, pos: &[usize], a: &DMatrix<f64>) {
    for (j, &r) in pos.iter().enumerate() {
        for (i, &c) in pos.iter().enumerate() {
            target[(r, c)] = a[(j, i)];
        }
    }
}

fn apply_transpose(t: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..t.ncols()).map(|i| (0..t.nrows()).map(|j| t[(j, i)] * x[j]).sum()).collect()
}

/// `β ← Tβ` and `b ← Mb`; the Cholesky factor of `MBMᵀ` is the triangular
/// factor of a QR decomposition of `CMᵀ`, which also covers singular `B`.
fn map_theta(theta: &[f64], layout: &Layout, t: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Vec<f64>> {
    layout.check(theta)?;
    let mut out = theta.to_vec();
    let beta = &theta[layout.beta_range()];
    for (r, o) in out[layout.beta_range()].iter_mut().enumerate() {
        *o = (0..beta.len()).map(|c| t[(r, c)] * beta[c]).sum();
    }
    let p = layout.n_random();
    let c = DMatrix::from_fn(p, p, |r, s| {
        if r == 0 && s == 0 {
            1.0
        } else {
            layout.chol_index(r, s).map_or(0.0, |i| theta[i])
        }
    });
    let mut r = (c * m.transpose()).qr().r();
    for row in 0..p {
        if r[(row, row)] < 0.0 {
            for col in row..p {
                r[(row, col)] = -r[(row, col)];
            }
        }
    }
    if (r[(0, 0)] - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid("cardinal map changed the first random-effect variance".into()));
    }
    for row in 0..p {
        for col in row..p {
            if let Some(i) = layout.chol_index(row, col) {
                out[i] = r[(row, col)];
            }
        }
    }
    Ok(out)
}

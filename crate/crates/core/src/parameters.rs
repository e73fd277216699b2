//! Packed unconstrained parameter vector and its natural-scale counterpart.
//!
//! Layout of the packed vector, in order:
//!
//! 1. fixed effects `β` (no intercept),
//! 2. upper-triangular Cholesky factor `C` of the random-effect covariance
//!    `B = CᵀC`, row-major, without `C_11` which is fixed at 1,
//! 3. per item: the scale `σ_k`, then `η*_1..η*_{L_k-1}` with
//!    `η_1 = η*_1` and `η_l = η*_1 + Σ_{m=2..l} (η*_m)²`,
//! 4. per contrast term: `γ_1..γ_{K-1}`; `γ_K = -Σ_{k<K} γ_k`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LongDataset;
use crate::error::{Error, Result};
use crate::measurement::ItemParams;
use crate::model::ModelSpec;
use crate::normal;

/// Version tag written next to serialized parameter vectors.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    n_fixed: usize,
    p: usize,
    levels: Vec<usize>,
    n_contrasts: usize,
    item_offsets: Vec<usize>,
    contrast_offset: usize,
    len: usize,
    names: Vec<String>,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let n_fixed = spec.n_fixed();
        let p = spec.n_random();
        let levels: Vec<usize> = spec.items.iter().map(|i| i.n_levels).collect();
        let n_contrasts = spec.n_contrasts();
        let k = levels.len();

        let mut names = Vec::new();
        for label in spec.fixed_labels() {
            names.push(format!("beta[{label}]"));
        }
        for r in 0..p {
            for c in r..p {
                if r == 0 && c == 0 {
                    continue;
                }
                names.push(format!("chol[{},{}]", r + 1, c + 1));
            }
        }
        let mut item_offsets = Vec::with_capacity(k);
        for item in &spec.items {
            item_offsets.push(names.len());
            names.push(format!("item[{}].sigma", item.item_id));
            for l in 1..item.n_levels {
                names.push(format!("item[{}].eta*{l}", item.item_id));
            }
        }
        let contrast_offset = names.len();
        if n_contrasts > 0 {
            for label in spec.contrast_labels() {
                for item in &spec.items[..k - 1] {
                    names.push(format!("contrast[{label}][{}]", item.item_id));
                }
            }
        }
        Layout {
            n_fixed,
            p,
            levels,
            n_contrasts,
            item_offsets,
            contrast_offset,
            len: names.len(),
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn n_random(&self) -> usize {
        self.p
    }

    pub fn n_items(&self) -> usize {
        self.levels.len()
    }

    pub fn n_contrasts(&self) -> usize {
        self.n_contrasts
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn beta_range(&self) -> core::ops::Range<usize> {
        0..self.n_fixed
    }

    pub fn chol_range(&self) -> core::ops::Range<usize> {
        self.n_fixed..self.n_fixed + self.p * (self.p + 1) / 2 - 1
    }

    /// Packed position of Cholesky entry `(r, c)`, `r <= c`; `None` for the fixed `C_11`.
    pub fn chol_index(&self, r: usize, c: usize) -> Option<usize> {
        if r > c || c >= self.p || (r == 0 && c == 0) {
            return None;
        }
        // entries before row r: Σ_{i<r} (p - i), minus the skipped (0,0)
        let before = r * self.p - r * (r.saturating_sub(1)) / 2;
        Some(self.n_fixed + before + (c - r) - 1)
    }

    pub fn sigma_index(&self, item: usize) -> usize {
        self.item_offsets[item]
    }

    /// Packed positions of `η*_1..η*_{L-1}` of an item.
    pub fn eta_range(&self, item: usize) -> core::ops::Range<usize> {
        let start = self.item_offsets[item] + 1;
        start..start + self.levels[item] - 1
    }

    pub fn item_range(&self, item: usize) -> core::ops::Range<usize> {
        self.item_offsets[item]..self.item_offsets[item] + self.levels[item]
    }

    /// Packed position of `γ_{item, contrast}` for the free items `item < K-1`.
    pub fn contrast_index(&self, contrast: usize, item: usize) -> Option<usize> {
        let k = self.levels.len();
        (contrast < self.n_contrasts && item + 1 < k).then(|| self.contrast_offset + contrast * (k - 1) + item)
    }

    pub fn contrast_range(&self) -> core::ops::Range<usize> {
        self.contrast_offset..self.len
    }

    pub(crate) fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len {
            return Err(Error::Layout {
                expected: self.len,
                got: theta.len(),
            });
        }
        Ok(())
    }
}

/// Natural-scale parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub beta: Vec<f64>,
    /// Random-effect covariance `B`, `p x p` row-major, `B_11 = 1`.
    pub covariance: Vec<f64>,
    /// Upper-triangular `C` with non-negative diagonal and `CᵀC = B`, row-major.
    pub chol: Vec<f64>,
    pub items: Vec<ItemParams>,
    /// `gammas[k][c]`: contrast `c` of item `k`; each column sums to zero.
    pub gammas: Vec<Vec<f64>>,
}

impl NaturalParams {
    /// Builds natural parameters from a covariance matrix (`p x p` row-major),
    /// computing its Cholesky factor.
    pub fn from_covariance(
        beta: Vec<f64>,
        covariance: Vec<f64>,
        items: Vec<ItemParams>,
        gammas: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let p = isqrt(covariance.len())?;
        let chol = upper_cholesky(&covariance, p)?;
        Ok(NaturalParams {
            beta,
            covariance,
            chol,
            items,
            gammas,
        })
    }

    pub fn p(&self) -> usize {
        isqrt(self.chol.len()).unwrap_or(0)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_row_slice(p, p, &self.covariance)
    }

    /// `Cᵀu`: maps a standard-normal vector onto `N(0, B)`.
    #[inline]
    pub fn correlate(&self, u: &[f64], out: &mut [f64]) {
        let p = u.len();
        for (s, o) in out.iter_mut().enumerate().take(p) {
            let mut acc = 0.0;
            for (r, ur) in u.iter().enumerate().take(s + 1) {
                acc += self.chol[r * p + s] * ur;
            }
            *o = acc;
        }
    }

    /// Item shift `x_difᵀγ_k` for one row of contrast covariates.
    #[inline]
    pub fn contrast_shift(&self, item: usize, x_dif: &[f64]) -> f64 {
        if x_dif.is_empty() {
            return 0.0;
        }
        self.gammas[item].iter().zip(x_dif).map(|(g, x)| g * x).sum()
    }
}

fn isqrt(n: usize) -> Result<usize> {
    let p = libm::sqrt(n as f64) as usize;
    if p * p != n {
        return Err(Error::Invalid(format!("{n} entries do not form a square matrix")));
    }
    Ok(p)
}

/// Upper Cholesky factor (row-major) of a symmetric positive definite matrix.
fn upper_cholesky(b: &[f64], p: usize) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(p, p, b);
    let asym = (&m - m.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
    }
    let l = m
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("random-effect covariance".into()))?
        .unpack();
    let mut out = vec![0.0; p * p];
    for r in 0..p {
        for c in r..p {
            out[r * p + c] = l[(c, r)];
        }
    }
    Ok(out)
}

/// Maps packed parameters onto the natural scale.
pub fn unpack(theta: &[f64], layout: &Layout) -> Result<NaturalParams> {
    layout.check(theta)?;
    let p = layout.p;
    let beta = theta[layout.beta_range()].to_vec();

    let mut chol = vec![0.0; p * p];
    chol[0] = 1.0;
    for r in 0..p {
        for c in r..p {
            if let Some(i) = layout.chol_index(r, c) {
                chol[r * p + c] = theta[i];
            }
        }
    }
    // B = CᵀC is unchanged by flipping a row of C; keep the row with a
    // non-negative diagonal so that equal B gives bit-equal factors.
    for r in 1..p {
        if chol[r * p + r] < 0.0 {
            for c in r..p {
                chol[r * p + c] = -chol[r * p + c];
            }
        }
    }
    let mut covariance = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for r in 0..=i.min(j) {
                acc += chol[r * p + i] * chol[r * p + j];
            }
            covariance[i * p + j] = acc;
        }
    }

    let mut items = Vec::with_capacity(layout.n_items());
    for k in 0..layout.n_items() {
        let star = &theta[layout.eta_range(k)];
        let mut thresholds = Vec::with_capacity(star.len());
        let mut acc = star[0];
        thresholds.push(acc);
        for s in &star[1..] {
            acc += s * s;
            thresholds.push(acc);
        }
        items.push(ItemParams {
            sigma: theta[layout.sigma_index(k)],
            thresholds,
        });
    }

    let k = layout.n_items();
    let nc = layout.n_contrasts;
    let mut gammas = vec![vec![0.0; nc]; k];
    for c in 0..nc {
        let mut sum = 0.0;
        for (item, g) in gammas.iter_mut().enumerate().take(k - 1) {
            let v = theta[layout.contrast_index(c, item).expect("free contrast")];
            g[c] = v;
            sum += v;
        }
        gammas[k - 1][c] = -sum;
    }

    Ok(NaturalParams {
        beta,
        covariance,
        chol,
        items,
        gammas,
    })
}

/// Inverse of [`unpack`] up to the signs of `σ_k`, `η*_m (m >= 2)` and the
/// rows of `C`, which the likelihood does not identify.
pub fn pack(natural: &NaturalParams, layout: &Layout) -> Result<Vec<f64>> {
    let p = layout.p;
    if natural.beta.len() != layout.n_fixed {
        return Err(Error::Layout {
            expected: layout.n_fixed,
            got: natural.beta.len(),
        });
    }
    if natural.covariance.len() != p * p {
        return Err(Error::Layout {
            expected: p * p,
            got: natural.covariance.len(),
        });
    }
    if (natural.covariance[0] - 1.0).abs() > 1e-12 {
        return Err(Error::Constraint(format!(
            "first random-effect variance must be 1, got {}",
            natural.covariance[0]
        )));
    }
    let chol = upper_cholesky(&natural.covariance, p)?;
    if natural.items.len() != layout.n_items() {
        return Err(Error::Layout {
            expected: layout.n_items(),
            got: natural.items.len(),
        });
    }
    let mut theta = vec![0.0; layout.len];
    theta[layout.beta_range()].copy_from_slice(&natural.beta);
    for r in 0..p {
        for c in r..p {
            if let Some(i) = layout.chol_index(r, c) {
                theta[i] = chol[r * p + c];
            }
        }
    }
    for (k, item) in natural.items.iter().enumerate() {
        if item.thresholds.len() + 1 != layout.levels[k] {
            return Err(Error::Layout {
                expected: layout.levels[k] - 1,
                got: item.thresholds.len(),
            });
        }
        if item.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Constraint(format!("thresholds of item {} are decreasing", k + 1)));
        }
        theta[layout.sigma_index(k)] = item.sigma;
        let range = layout.eta_range(k);
        theta[range.start] = item.thresholds[0];
        for m in 1..item.thresholds.len() {
            theta[range.start + m] = libm::sqrt(item.thresholds[m] - item.thresholds[m - 1]);
        }
    }
    let k = layout.n_items();
    for c in 0..layout.n_contrasts {
        let total: f64 = natural.gammas.iter().map(|g| g[c]).sum();
        let scale: f64 = natural.gammas.iter().map(|g| g[c].abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-10 * scale {
            return Err(Error::Constraint(format!("contrast {} does not sum to zero ({total})", c + 1)));
        }
        for item in 0..k - 1 {
            theta[layout.contrast_index(c, item).expect("free contrast")] = natural.gammas[item][c];
        }
    }
    Ok(theta)
}

/// Representative of the sign-equivalence class of `theta`: positive scales,
/// non-negative `η*_m` for `m >= 2` and non-negative Cholesky diagonal. Returns
/// the canonical vector and the per-coordinate signs `s` with
/// `canonical = s ∘ theta`; a covariance transforms as `diag(s) V diag(s)`.
pub fn canonicalize(theta: &[f64], layout: &Layout) -> Result<(Vec<f64>, Vec<f64>)> {
    layout.check(theta)?;
    let mut signs = vec![1.0; theta.len()];
    let p = layout.p;
    for r in 1..p {
        let d = layout.chol_index(r, r).expect("diagonal");
        if theta[d] < 0.0 {
            for c in r..p {
                signs[layout.chol_index(r, c).expect("upper")] = -1.0;
            }
        }
    }
    for k in 0..layout.n_items() {
        let s = layout.sigma_index(k);
        if theta[s] < 0.0 {
            signs[s] = -1.0;
        }
        for i in layout.eta_range(k).skip(1) {
            if theta[i] < 0.0 {
                signs[i] = -1.0;
            }
        }
    }
    let canonical = theta.iter().zip(&signs).map(|(t, s)| t * s).collect();
    Ok((canonical, signs))
}

/// Standard error from first-order propagation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSe {
    pub estimate: f64,
    pub se: f64,
    /// The quadratic form came out negative and was clamped at zero.
    pub clamped: bool,
}

#[inline]
fn fd_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-5)
}

/// Central-difference gradient of a scalar transform.
pub fn transform_gradient(theta: &[f64], transform: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let h = fd_step(theta[j]);
            work[j] = theta[j] + h;
            let up = transform(&work);
            work[j] = theta[j] - h;
            let down = transform(&work);
            work[j] = theta[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `sqrt(aᵀ V a)`, clamping a negative quadratic form to zero.
pub fn quadratic_se(v: &DMatrix<f64>, a: &[f64]) -> (f64, bool) {
    let n = a.len();
    let mut q = 0.0;
    for i in 0..n {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            q += a[i] * v[(i, j)] * a[j];
        }
    }
    if q < 0.0 {
        (0.0, true)
    } else {
        (libm::sqrt(q), false)
    }
}

/// Delta-method standard error of `transform(θ)` given `V(θ̂)`.
pub fn delta_method_se(theta_hat: &[f64], v: &DMatrix<f64>, transform: &dyn Fn(&[f64]) -> f64) -> Result<DeltaSe> {
    if v.nrows() != theta_hat.len() || v.ncols() != theta_hat.len() {
        return Err(Error::Layout {
            expected: theta_hat.len(),
            got: v.nrows(),
        });
    }
    let jac = transform_gradient(theta_hat, transform);
    let (se, clamped) = quadratic_se(v, &jac);
    Ok(DeltaSe {
        estimate: transform(theta_hat),
        se,
        clamped,
    })
}

/// Default starting values: `β = 0`, `C = I`, `σ_k = 1`, thresholds from the
/// probit of cumulative category proportions, contrasts at zero.
///
/// With `σ = 1` and a unit-variance latent level the marginal cumulative
/// probability is `Φ(η/√2)`, so thresholds are `√2 Φ⁻¹(p̂)`.
pub fn initial_theta(ds: &LongDataset, spec: &ModelSpec) -> Vec<f64> {
    let layout = Layout::new(spec);
    let mut theta = vec![0.0; layout.len()];
    for r in 1..layout.p {
        theta[layout.chol_index(r, r).expect("diagonal")] = 1.0;
    }
    for (k, item) in spec.items.iter().enumerate() {
        theta[layout.sigma_index(k)] = 1.0;
        let mut freq = vec![0usize; item.n_levels];
        for o in ds.observations().iter().filter(|o| o.item_id == item.item_id) {
            freq[o.response] += 1;
        }
        let n: usize = freq.iter().sum();
        let nf = n.max(1) as f64;
        let mut cum = 0usize;
        let mut thresholds = Vec::with_capacity(item.n_levels - 1);
        for (l, f) in freq.iter().enumerate().take(item.n_levels - 1) {
            cum += f;
            let prop = if n == 0 {
                (l + 1) as f64 / item.n_levels as f64
            } else {
                (cum as f64 / nf).clamp(0.5 / nf, 1.0 - 0.5 / nf)
            };
            let mut eta = core::f64::consts::SQRT_2 * normal::quantile(prop);
            if let Some(&prev) = thresholds.last() {
                eta = f64::max(eta, prev + 0.1);
            }
            thresholds.push(eta);
        }
        let range = layout.eta_range(k);
        theta[range.start] = thresholds[0];
        for m in 1..thresholds.len() {
            theta[range.start + m] = libm::sqrt(thresholds[m] - thresholds[m - 1]);
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ItemDef;
    use crate::measurement::category_probs;
    use crate::timebasis::{DesignSpec, Term, TimeBasis};
    use proptest::prelude::*;

    fn spec(p: usize, k: usize, levels: usize, contrasts: usize) -> ModelSpec {
        ModelSpec {
            items: (0..k).map(|i| ItemDef::new(format!("i{i}"), levels)).collect(),
            basis: TimeBasis::Polynomial { degree: 3 },
            design: DesignSpec {
                fixed: vec![Term::time(1), Term::covariate("g")],
                random: core::iter::once(Term::intercept()).chain((1..p).map(Term::time)).collect(),
                contrasts: (0..contrasts).map(|_| Term::covariate("g")).collect(),
            },
        }
    }

    #[test]
    fn threshold_transform_example() {
        let s = spec(1, 1, 4, 0);
        let layout = s.layout();
        let mut theta = vec![0.0; layout.len()];
        theta[layout.sigma_index(0)] = 1.0;
        let r = layout.eta_range(0);
        theta[r.clone()].copy_from_slice(&[-0.5, 1.0, 0.5]);
        let nat = unpack(&theta, &layout).unwrap();
        assert_eq!(nat.items[0].thresholds, vec![-0.5, 0.5, 0.75]);
    }

    #[test]
    fn cholesky_example() {
        let s = spec(2, 1, 2, 0);
        let layout = s.layout();
        let mut theta = vec![0.0; layout.len()];
        theta[layout.sigma_index(0)] = 1.0;
        theta[layout.chol_index(0, 1).unwrap()] = 0.5;
        theta[layout.chol_index(1, 1).unwrap()] = 0.8;
        let nat = unpack(&theta, &layout).unwrap();
        let want = [1.0, 0.5, 0.5, 0.89];
        for (g, w) in nat.covariance.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_covariance_packs_without_fixed_entry() {
        let s = spec(2, 1, 2, 0);
        let layout = s.layout();
        assert_eq!(layout.chol_range().len(), 2);
        let nat = NaturalParams::from_covariance(
            vec![0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![ItemParams::new(1.0, vec![0.0]).unwrap()],
            vec![vec![]],
        )
        .unwrap();
        let theta = pack(&nat, &layout).unwrap();
        assert_eq!(&theta[layout.chol_range()], &[0.0, 1.0]);
    }

    #[test]
    fn tied_thresholds_pack_to_zero_square() {
        let s = spec(1, 1, 3, 0);
        let layout = s.layout();
        let nat = NaturalParams::from_covariance(
            vec![0.0, 0.0],
            vec![1.0],
            vec![ItemParams::new(1.0, vec![0.3, 0.3]).unwrap()],
            vec![vec![]],
        )
        .unwrap();
        let theta = pack(&nat, &layout).unwrap();
        assert_eq!(&theta[layout.eta_range(0)], &[0.3, 0.0]);
    }

    #[test]
    fn pack_errors() {
        let s = spec(2, 1, 3, 0);
        let layout = s.layout();
        let item = ItemParams {
            sigma: 1.0,
            thresholds: vec![0.5, 0.1],
        };
        let mut nat = NaturalParams {
            beta: vec![0.0, 0.0],
            covariance: vec![1.0, 0.0, 0.0, 1.0],
            chol: vec![1.0, 0.0, 0.0, 1.0],
            items: vec![item],
            gammas: vec![vec![]],
        };
        assert!(matches!(pack(&nat, &layout), Err(Error::Constraint(_))));
        nat.items[0].thresholds = vec![0.1, 0.5];
        nat.covariance = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(pack(&nat, &layout), Err(Error::NotPositiveDefinite(_))));
        assert!(matches!(unpack(&[0.0; 3], &layout), Err(Error::Layout { .. })));
    }

    #[test]
    fn last_contrast_is_minus_the_sum() {
        // contrasts of items 2..12 on group, with the Leisure item derived
        let free = [-0.150, -0.031, 0.020, -0.053, 0.040, 0.037];
        let s = spec(1, 7, 4, 1);
        let layout = s.layout();
        let mut theta = vec![0.0; layout.len()];
        for k in 0..7 {
            theta[layout.sigma_index(k)] = 1.0;
        }
        for (k, g) in free.iter().enumerate() {
            theta[layout.contrast_index(0, k).unwrap()] = *g;
        }
        let nat = unpack(&theta, &layout).unwrap();
        assert!((nat.gammas[6][0] - 0.137).abs() < 1e-12);
        // the reported 0.138 comes from unrounded estimates
        assert!((nat.gammas[6][0] - 0.138).abs() < 2e-3);
    }

    #[test]
    fn delta_method_examples() {
        let v = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let theta = [1.0, 2.0];
        for j in 0..2 {
            let d = delta_method_se(&theta, &v, &|t: &[f64]| t[j]).unwrap();
            assert!((d.se - libm::sqrt(v[(j, j)])).abs() < 1e-10);
        }
        let v1 = DMatrix::from_row_slice(1, 1, &[0.01]);
        let d = delta_method_se(&[2.0], &v1, &|t: &[f64]| 1.0 / t[0].abs()).unwrap();
        assert!((d.estimate - 0.5).abs() < 1e-15);
        assert!((d.se - 0.025).abs() < 1e-9);
        let bad = DMatrix::from_row_slice(1, 1, &[-0.01]);
        assert!(delta_method_se(&[2.0], &bad, &|t: &[f64]| t[0]).unwrap().clamped);
    }

    #[test]
    fn chol_index_matches_names() {
        let s = spec(4, 2, 3, 0);
        let layout = s.layout();
        for r in 0..4 {
            for c in r..4 {
                if let Some(i) = layout.chol_index(r, c) {
                    assert_eq!(layout.names()[i], format!("chol[{},{}]", r + 1, c + 1));
                }
            }
        }
    }

    fn arb_theta(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, len)
    }

    proptest! {
        #[test]
        fn unpack_constraints_hold(theta in arb_theta(spec(3, 4, 4, 2).layout().len())) {
            let s = spec(3, 4, 4, 2);
            let layout = s.layout();
            let nat = unpack(&theta, &layout).unwrap();
            prop_assert_eq!(nat.covariance[0], 1.0);
            for item in &nat.items {
                prop_assert!(item.thresholds.windows(2).all(|w| w[0] <= w[1]));
            }
            for c in 0..2 {
                let sum: f64 = nat.gammas.iter().map(|g| g[c]).sum();
                prop_assert!(sum.abs() < 1e-14);
            }
        }

        #[test]
        fn round_trip_preserves_identified_quantities(theta in arb_theta(spec(3, 4, 4, 2).layout().len())) {
            let s = spec(3, 4, 4, 2);
            let layout = s.layout();
            let mut theta = theta;
            // keep B well conditioned
            for r in 1..3 {
                let d = layout.chol_index(r, r).unwrap();
                if theta[d].abs() < 0.2 { theta[d] = 0.5; }
            }
            for k in 0..4 {
                let i = layout.sigma_index(k);
                if theta[i].abs() < 0.2 { theta[i] = 1.0; }
            }
            let nat = unpack(&theta, &layout).unwrap();
            let again = unpack(&pack(&nat, &layout).unwrap(), &layout).unwrap();
            for (a, b) in nat.covariance.iter().zip(&again.covariance) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (ia, ib) in nat.items.iter().zip(&again.items) {
                for lam in [-2.0, 0.0, 1.5] {
                    let pa = category_probs(ia, lam);
                    let pb = category_probs(ib, lam);
                    for (x, y) in pa.iter().zip(&pb) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }
            prop_assert_eq!(&nat.gammas, &again.gammas);
            let (canon, signs) = canonicalize(&theta, &layout).unwrap();
            let from_canon = unpack(&canon, &layout).unwrap();
            prop_assert_eq!(&from_canon.chol, &nat.chol);
            prop_assert!(signs.iter().all(|s| *s == 1.0 || *s == -1.0));
        }
    }
}

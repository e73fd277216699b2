//! Cumulative-probit graded response measurement model.
//!
//! Item `k` with `L` levels has an error scale `σ` (discrimination `1/|σ|`) and
//! thresholds `η_1 <= ... <= η_{L-1}`, padded with `η_0 = -∞` and `η_L = +∞`:
//!
//! ```text
//! P(Y <= l | Λ) = Φ(σ⁻ (η_{l+1} - Λ))
//! P(Y  = l | Λ) = Φ(σ⁻ (η_{l+1} - Λ)) - Φ(σ⁻ (η_l - Λ))
//! ```

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Probabilities below this are treated as an empty category.
pub const DEGENERATE_PROB: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    /// Error scale; only `|sigma|` matters.
    pub sigma: f64,
    /// `η_1..η_{L-1}`, non-decreasing.
    pub thresholds: Vec<f64>,
}

impl ItemParams {
    pub fn new(sigma: f64, thresholds: Vec<f64>) -> Result<Self> {
        if !(sigma.is_finite() && sigma != 0.0) {
            return Err(Error::Constraint("item scale must be finite and non-zero".into()));
        }
        if thresholds.is_empty() {
            return Err(Error::Constraint("an item needs at least one threshold".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Constraint("thresholds must be finite and non-decreasing".into()));
        }
        Ok(ItemParams { sigma, thresholds })
    }

    pub fn from_discrimination(discrimination: f64, thresholds: Vec<f64>) -> Result<Self> {
        Self::new(1.0 / discrimination, thresholds)
    }

    /// `σ⁻ = 1/|σ|`
    #[inline]
    pub fn discrimination(&self) -> f64 {
        1.0 / self.sigma.abs()
    }

    pub fn n_levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `η_l` with the infinite padding at `l = 0` and `l = L`.
    #[inline]
    pub fn threshold(&self, l: usize) -> f64 {
        if l == 0 {
            f64::NEG_INFINITY
        } else if l > self.thresholds.len() {
            f64::INFINITY
        } else {
            self.thresholds[l - 1]
        }
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l >= self.n_levels() {
            return Err(Error::LevelOutOfRange {
                item: alloc::string::String::new(),
                level: l,
                n_levels: self.n_levels(),
            });
        }
        Ok(())
    }

    /// Standardized bounds `(σ⁻(η_l - Λ), σ⁻(η_{l+1} - Λ))` of category `l`.
    #[inline]
    pub(crate) fn bounds(&self, l: usize, lambda: f64) -> (f64, f64) {
        let s = self.discrimination();
        (s * (self.threshold(l) - lambda), s * (self.threshold(l + 1) - lambda))
    }
}

/// `P(Y <= l | Λ)`.
pub fn cum_prob(item: &ItemParams, l: usize, lambda: f64) -> Result<f64> {
    item.check_level(l)?;
    if l + 1 == item.n_levels() {
        return Ok(1.0);
    }
    Ok(normal::cdf(item.discrimination() * (item.threshold(l + 1) - lambda)))
}

/// Category characteristic curve `P(Y = l | Λ)`.
pub fn category_prob(item: &ItemParams, l: usize, lambda: f64) -> Result<f64> {
    item.check_level(l)?;
    let (a, b) = item.bounds(l, lambda);
    Ok(normal::interval_prob(a, b))
}

/// All category probabilities at `Λ`.
pub fn category_probs(item: &ItemParams, lambda: f64) -> Vec<f64> {
    (0..item.n_levels())
        .map(|l| {
            let (a, b) = item.bounds(l, lambda);
            normal::interval_prob(a, b)
        })
        .collect()
}

/// Expected item score `E[Y | Λ] = (L-1) - Σ_{l=1}^{L-1} Φ(σ⁻(η_l - Λ))`.
pub fn item_expectation(item: &ItemParams, lambda: f64) -> f64 {
    let s = item.discrimination();
    let below: f64 = item.thresholds.iter().map(|&e| normal::cdf(s * (e - lambda))).sum();
    item.thresholds.len() as f64 - below
}

/// `∂E[Y | Λ]/∂Λ = Σ_l σ⁻ φ(σ⁻(η_l - Λ))`.
pub fn item_expectation_slope(item: &ItemParams, lambda: f64) -> f64 {
    let s = item.discrimination();
    item.thresholds.iter().map(|&e| s * normal::pdf(s * (e - lambda))).sum()
}

/// Contribution of category `l` to the Fisher information about `Λ`:
/// `(∂P_l/∂Λ)² / P_l = σ⁻² (φ(b) - φ(a))² / (Φ(b) - Φ(a))`.
pub fn category_information(item: &ItemParams, l: usize, lambda: f64) -> Result<f64> {
    item.check_level(l)?;
    Ok(category_information_unchecked(item, l, lambda))
}

fn category_information_unchecked(item: &ItemParams, l: usize, lambda: f64) -> f64 {
    let s = item.discrimination();
    let (a, b) = item.bounds(l, lambda);
    let p = normal::interval_prob(a, b);
    if p < DEGENERATE_PROB {
        return 0.0;
    }
    let d = normal::pdf(b) - normal::pdf(a);
    s * s * d * d / p
}

/// Item information `I_k(Λ)`: sum of the category contributions.
pub fn item_information(item: &ItemParams, lambda: f64) -> f64 {
    (0..item.n_levels())
        .map(|l| category_information_unchecked(item, l, lambda))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn item2() -> ItemParams {
        ItemParams::from_discrimination(1.29, vec![-0.46, 0.77, 1.52]).unwrap()
    }

    #[test]
    fn cum_prob_examples() {
        let it = item2();
        assert_eq!(cum_prob(&it, 3, 0.3).unwrap(), 1.0);
        assert!((cum_prob(&it, 1, 0.77).unwrap() - 0.5).abs() < 1e-15);
        // 40-digit oracle: Φ(1.29 × -0.46)
        assert!((cum_prob(&it, 0, 0.0).unwrap() - 0.276_456_744_447_827_6).abs() < 1e-12);
        assert!(cum_prob(&it, 4, 0.0).is_err());
    }

    #[test]
    fn category_and_expectation_examples() {
        let it = item2();
        assert!((category_prob(&it, 1, 0.0).unwrap() - 0.563_261_366_774_212_7).abs() < 1e-12);
        assert!((item_expectation(&it, 0.0) - 0.908_776_323_362_876_3).abs() < 1e-12);
        assert!((item_expectation(&it, 60.0) - 3.0).abs() < 1e-12);
        assert!((category_prob(&it, 0, -60.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binary_information_closed_form() {
        let it = ItemParams::new(1.0, vec![0.0]).unwrap();
        // φ(0)² / (Φ(0)(1-Φ(0)))
        assert!((item_information(&it, 0.0) - 0.636_619_772_367_581_4).abs() < 1e-14);
    }

    #[test]
    fn symmetric_thresholds_give_symmetric_information() {
        let it = ItemParams::new(0.8, vec![-1.2, 1.2]).unwrap();
        for i in 0..50 {
            let x = i as f64 * 0.1;
            assert!((item_information(&it, x) - item_information(&it, -x)).abs() < 1e-13);
        }
    }

    #[test]
    fn information_matches_finite_differences() {
        let it = item2();
        let h = 1e-4;
        for &lam in &[-2.0, -0.3, 0.0, 0.9, 2.5] {
            // per category: (d log P / dΛ)² P from a central first difference
            for l in 0..4 {
                let lp = |x: f64| libm::log(category_prob(&it, l, x).unwrap());
                let d1 = (lp(lam + h) - lp(lam - h)) / (2.0 * h);
                let p = category_prob(&it, l, lam).unwrap();
                let want = d1 * d1 * p;
                assert!((category_information(&it, l, lam).unwrap() - want).abs() < 1e-5);
            }
            // item level: -Σ P_l ∂² log P_l / ∂Λ²
            let mut fd = 0.0;
            for l in 0..4 {
                let lp = |x: f64| libm::log(category_prob(&it, l, x).unwrap());
                let d2 = (lp(lam + h) - 2.0 * lp(lam) + lp(lam - h)) / (h * h);
                fd -= category_prob(&it, l, lam).unwrap() * d2;
            }
            assert!((item_information(&it, lam) - fd).abs() < 1e-5, "Λ={lam}");
        }
    }

    #[test]
    fn degenerate_category_contributes_zero() {
        let it = ItemParams::new(1.0, vec![0.5, 0.5, 1.0]).unwrap();
        assert_eq!(category_prob(&it, 1, 0.0).unwrap(), 0.0);
        assert_eq!(category_information(&it, 1, 0.0).unwrap(), 0.0);
    }

    fn arb_item() -> impl Strategy<Value = ItemParams> {
        (0.2f64..3.0, any::<bool>(), -3.0f64..3.0, proptest::collection::vec(0.0f64..2.0, 1..5)).prop_map(
            |(scale, neg, start, gaps)| {
                let mut th = vec![start];
                for g in gaps {
                    let last = *th.last().unwrap();
                    th.push(last + g);
                }
                ItemParams::new(if neg { -scale } else { scale }, th).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn probabilities_normalized(item in arb_item(), lam in -8.0f64..8.0) {
            let p = category_probs(&item, lam);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let e: f64 = p.iter().enumerate().map(|(l, &x)| l as f64 * x).sum();
            prop_assert!((e - item_expectation(&item, lam)).abs() < 1e-12);
            let mut prev = 0.0;
            for l in 0..item.n_levels() {
                let c = cum_prob(&item, l, lam).unwrap();
                prop_assert!(c >= prev);
                prev = c;
            }
        }

        #[test]
        fn expectation_monotone(item in arb_item(), a in -6.0f64..6.0, b in -6.0f64..6.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(item_expectation(&item, lo) <= item_expectation(&item, hi));
            let h = 1e-5;
            let fd = (item_expectation(&item, a + h) - item_expectation(&item, a - h)) / (2.0 * h);
            prop_assert!((fd - item_expectation_slope(&item, a)).abs() < 1e-6);
        }

        #[test]
        fn only_scale_magnitude_matters(item in arb_item(), lam in -6.0f64..6.0) {
            let flipped = ItemParams::new(-item.sigma, item.thresholds.clone()).unwrap();
            prop_assert_eq!(category_probs(&item, lam), category_probs(&flipped, lam));
            prop_assert_eq!(item_information(&item, lam), item_information(&flipped, lam));
        }

        #[test]
        fn information_nonnegative(item in arb_item(), lam in -6.0f64..6.0) {
            prop_assert!(item_information(&item, lam) >= 0.0);
        }
    }
}

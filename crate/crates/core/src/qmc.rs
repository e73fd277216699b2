//! Scrambled Sobol points mapped to the standard normal distribution.
//!
//! Direction numbers are the Joe–Kuo (new-joe-kuo-6.21201) set for the first
//! 21 dimensions. Each dimension receives a random lower-triangular binary
//! matrix scramble followed by a random digital shift, both drawn from a
//! ChaCha stream keyed by the seed, so every `(n, p, seed)` triple produces one
//! fixed node matrix on every platform.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

const BITS: usize = 32;

/// `(degree s, polynomial coefficient a, initial m_1..m_s)` for dimensions 2..=21.
const JOE_KUO: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
];

/// Largest supported dimension.
pub const MAX_DIM: usize = JOE_KUO.len() + 1;

/// Default number of integration nodes.
pub const DEFAULT_NODES: usize = 1000;

/// Unscrambled direction numbers `v_1..v_32` for dimension `dim` (0-based),
/// most significant bit first.
fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1u32 << (BITS - 1 - i);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for i in 0..s {
        v[i] = m[i] << (BITS - 1 - i);
    }
    for i in s..BITS {
        let mut next = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                next ^= v[i - k];
            }
        }
        v[i] = next;
    }
    v
}

/// Applies a lower-triangular (in digit order) binary matrix with unit
/// diagonal. `rows[i]` masks the digits that feed digit `i`.
fn apply_scramble(rows: &[u32; BITS], x: u32) -> u32 {
    let mut out = 0u32;
    for (i, mask) in rows.iter().enumerate() {
        if (x & mask).count_ones() & 1 == 1 {
            out |= 1u32 << (BITS - 1 - i);
        }
    }
    out
}

/// Raw scrambled Sobol points in `(0, 1)^p`, row-major `n x p`.
pub fn sobol_uniform(n: usize, p: usize, seed: u64) -> Result<Vec<f64>> {
    if p == 0 || p > MAX_DIM {
        return Err(Error::Qmc { dim: p, max: MAX_DIM });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Vec::with_capacity(p);
    let mut shifts = Vec::with_capacity(p);
    for d in 0..p {
        let mut rows = [0u32; BITS];
        for (i, row) in rows.iter_mut().enumerate() {
            let own = 1u32 << (BITS - 1 - i);
            let above = if i == 0 { 0 } else { !((own << 1).wrapping_sub(1)) };
            *row = own | (rng.gen::<u32>() & above);
        }
        let raw = direction_numbers(d);
        let mut scrambled = [0u32; BITS];
        for (s, r) in scrambled.iter_mut().zip(raw.iter()) {
            *s = apply_scramble(&rows, *r);
        }
        dirs.push(scrambled);
        shifts.push(rng.gen::<u32>());
    }
    let mut out = Vec::with_capacity(n * p);
    let scale = 1.0 / (1u64 << BITS) as f64;
    for i in 0..n {
        for d in 0..p {
            let mut x = shifts[d];
            let mut idx = i;
            let mut bit = 0;
            while idx != 0 {
                if idx & 1 == 1 {
                    x ^= dirs[d][bit];
                }
                idx >>= 1;
                bit += 1;
            }
            out.push((x as f64 + 0.5) * scale);
        }
    }
    Ok(out)
}

/// Integration nodes for `b ~ N(0, I_p)`: `n` rows of `p` standard-normal
/// coordinates, each node carrying weight `1/n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmcNodes {
    n: usize,
    p: usize,
    seed: u64,
    values: Vec<f64>,
}

impl QmcNodes {
    pub fn new(p: usize, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("number of QMC nodes must be positive".into()));
        }
        let values = sobol_uniform(n, p, seed)?
            .into_iter()
            .map(normal::quantile)
            .collect();
        Ok(QmcNodes { n, p, seed, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn node(&self, q: usize) -> &[f64] {
        &self.values[q * self.p..(q + 1) * self.p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Convenience constructor mirroring the operation name used elsewhere.
pub fn qmc_nodes(p: usize, n: usize, seed: u64) -> Result<QmcNodes> {
    QmcNodes::new(p, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = QmcNodes::new(2, 1000, 7).unwrap();
        let b = QmcNodes::new(2, 1000, 7).unwrap();
        assert_eq!(a, b);
        let c = QmcNodes::new(2, 1000, 8).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn single_point_is_finite() {
        let n = QmcNodes::new(1, 1, 0).unwrap();
        assert_eq!(n.len(), 1);
        assert!(n.node(0)[0].is_finite());
    }

    #[test]
    fn every_dimension_stratifies_dyadic_intervals() {
        let m = 10;
        let n = 1usize << m;
        let pts = sobol_uniform(n, MAX_DIM, 3).unwrap();
        for d in 0..MAX_DIM {
            let mut seen = alloc::vec![false; n];
            for i in 0..n {
                let cell = (pts[i * MAX_DIM + d] * n as f64) as usize;
                assert!(!seen[cell], "dimension {d} puts two points in cell {cell}");
                seen[cell] = true;
            }
        }
    }

    #[test]
    fn first_two_dimensions_form_a_zero_net() {
        let m = 8;
        let n = 1usize << m;
        let pts = sobol_uniform(n, 2, 11).unwrap();
        for a in 0..=m {
            let (nx, ny) = (1usize << a, 1usize << (m - a));
            let mut count = alloc::vec![0u32; n];
            for i in 0..n {
                let cx = (pts[2 * i] * nx as f64) as usize;
                let cy = (pts[2 * i + 1] * ny as f64) as usize;
                count[cx * ny + cy] += 1;
            }
            assert!(count.iter().all(|&c| c == 1), "split {a}");
        }
    }

    #[test]
    fn normal_moments() {
        let nodes = QmcNodes::new(2, 1000, 42).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = (0..1000).map(|q| nodes.node(q)[d]).collect();
            let mean = col.iter().sum::<f64>() / 1000.0;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 999.0;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn rejects_unsupported_dimension() {
        assert!(QmcNodes::new(MAX_DIM + 1, 10, 0).is_err());
        assert!(QmcNodes::new(0, 10, 0).is_err());
    }
}

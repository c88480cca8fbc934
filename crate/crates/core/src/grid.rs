//! The periodic lattice `{0,…,N−1}^d` and its dual grid `θ_k = 2πk/N`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Geometry of a `d`-dimensional periodic lattice carrying `n` field components per site.
///
/// Sites are linearised row-major with the last axis fastest; the same layout
/// is used for dual-grid indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dim: usize,
    pub components: usize,
    pub side: usize,
}

impl LatticeSpec {
    pub fn new(dim: usize, components: usize, side: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidLattice("dimension must be at least 1".into()));
        }
        if components == 0 {
            return Err(Error::InvalidLattice("need at least one field component".into()));
        }
        if side < 8 || side % 2 != 0 {
            return Err(Error::InvalidLattice(format!(
                "side must be even and >= 8, got {side}"
            )));
        }
        let mut total: usize = 1;
        for _ in 0..dim {
            total = total.checked_mul(side).ok_or_else(|| {
                Error::InvalidLattice(format!("{side}^{dim} sites overflow usize"))
            })?;
        }
        // every index is also stored per component
        total.checked_mul(components).ok_or_else(|| {
            Error::InvalidLattice(format!("{side}^{dim} x {components} overflows usize"))
        })?;
        Ok(Self {
            dim,
            components,
            side,
        })
    }

    /// Number of lattice sites, equal to the number of dual grid points.
    pub fn sites(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    /// Spacing of the dual grid, `2π/N`.
    pub fn dual_spacing(&self) -> f64 {
        2.0 * PI / self.side as f64
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        for axis in (0..self.dim).rev() {
            out[axis] = index % self.side;
            index /= self.side;
        }
        out
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &m| acc * self.side + m % self.side)
    }

    /// Linear index of a possibly negative or out-of-range integer coordinate, wrapped onto the torus.
    pub fn wrap_index(&self, coords: &[i64]) -> usize {
        let n = self.side as i64;
        coords
            .iter()
            .fold(0, |acc, &c| acc * self.side + c.rem_euclid(n) as usize)
    }

    /// Dual-grid point `θ_k` with components in `[0, 2π)`.
    pub fn theta(&self, index: usize) -> Vec<f64> {
        let h = self.dual_spacing();
        self.multi_index(index)
            .into_iter()
            .map(|k| k as f64 * h)
            .collect()
    }

    /// Index of `−θ_k`.
    pub fn negate(&self, index: usize) -> usize {
        let multi: Vec<usize> = self
            .multi_index(index)
            .into_iter()
            .map(|k| (self.side - k) % self.side)
            .collect();
        self.linear_index(&multi)
    }

    /// Index shifted by `step` along `axis`, periodically.
    pub fn shift(&self, index: usize, axis: usize, step: i64) -> usize {
        let stride = self.side.pow((self.dim - 1 - axis) as u32);
        let k = (index / stride) % self.side;
        let k_new = (k as i64 + step).rem_euclid(self.side as i64) as usize;
        index - k * stride + k_new * stride
    }

    /// Minimal-image coordinates of a site, each in `(−N/2, N/2]`.
    pub fn centered_coords(&self, index: usize) -> Vec<i64> {
        let half = (self.side / 2) as i64;
        self.multi_index(index)
            .into_iter()
            .map(|k| {
                let k = k as i64;
                if k > half {
                    k - self.side as i64
                } else {
                    k
                }
            })
            .collect()
    }

    /// Euclidean length of the minimal-image coordinates of a site.
    pub fn centered_norm(&self, index: usize) -> f64 {
        self.centered_coords(index)
            .iter()
            .map(|&c| (c * c) as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn describe(&self) -> String {
        format!("d={}, n={}, N={}", self.dim, self.components, self.side)
    }

    pub(crate) fn ensure_same(&self, other: &LatticeSpec) -> Result<()> {
        if self != other {
            return Err(Error::LatticeMismatch {
                expected: self.describe(),
                found: other.describe(),
            });
        }
        Ok(())
    }
}

/// Periodic distance between two angles.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_small_sides() {
        assert!(LatticeSpec::new(1, 1, 7).is_err());
        assert!(LatticeSpec::new(1, 1, 6).is_err());
        assert!(LatticeSpec::new(0, 1, 8).is_err());
        assert!(LatticeSpec::new(1, 0, 8).is_err());
        assert!(LatticeSpec::new(64, 1, 1 << 20).is_err());
    }

    #[test]
    fn dual_grid_covers_torus_once() {
        let lat = LatticeSpec::new(2, 1, 8).unwrap();
        let mut seen = std::collections::HashSet::new();
        for k in 0..lat.sites() {
            let th = lat.theta(k);
            assert!(th.iter().all(|&t| (0.0..2.0 * PI).contains(&t)));
            let key: Vec<i64> = th.iter().map(|t| (t * 1e6).round() as i64).collect();
            assert!(seen.insert(key));
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn negate_and_shift_are_consistent() {
        let lat = LatticeSpec::new(3, 1, 8).unwrap();
        for k in [0, 1, 9, 77, 511] {
            assert_eq!(lat.negate(lat.negate(k)), k);
            for axis in 0..3 {
                assert_eq!(lat.shift(lat.shift(k, axis, 3), axis, -3), k);
            }
        }
        assert_eq!(lat.wrap_index(&[-1, 0, 0]), lat.linear_index(&[7, 0, 0]));
        assert_eq!(lat.centered_coords(lat.linear_index(&[7, 4, 5])), vec![-1, 4, -3]);
    }
}

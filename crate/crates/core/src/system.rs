//! Dimensions, domain boxes and output maps shared by plants and models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal widths of one (possibly local) observer problem.
///
/// `nw` is the width of the neighbour signal entering a local subsystem; it
/// is zero for stand-alone plants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    #[serde(default)]
    pub nw: usize,
}

impl Dims {
    pub fn new(nx: usize, nu: usize, ny: usize, nw: usize) -> Self {
        Self { nx, nu, ny, nw }
    }

    /// Width of one χ = (z, u, y, w) record.
    pub fn chi(&self) -> usize {
        self.nx + self.nu + self.ny + self.nw
    }
}

/// Axis-aligned box `[lo_i, hi_i]`; zero axes is a valid (empty-signal) box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn empty() -> Self {
        Self { lo: vec![], hi: vec![] }
    }

    /// `[-half, half]^n`.
    pub fn symmetric(n: usize, half: f64) -> Self {
        Self { lo: vec![-half; n], hi: vec![half; n] }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(bounds.iter().map(|b| b.0).collect(), bounds.iter().map(|b| b.1).collect())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() {
            return Err(Error::Config("box bounds differ in length".into()));
        }
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::Config(format!("box axis {i} is empty or unbounded: [{l}, {h}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Box with every half-width multiplied by `factor` about the centre.
    pub fn inflated(&self, factor: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let c = 0.5 * (l + h);
                let r = 0.5 * (h - l) * factor;
                (c - r, c + r)
            })
            .unzip();
        Self { lo, hi }
    }

    /// Appends one uniform draw to `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        for (l, h) in self.lo.iter().zip(&self.hi) {
            out.push(if h > l { rng.gen_range(*l..*h) } else { *l });
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.sample_into(rng, &mut v);
        v
    }

    /// Corner `k` of the box; bit `i` of `k` selects the upper bound on axis `i`.
    pub fn vertex(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| if (k >> i) & 1 == 1 { self.hi[i] } else { self.lo[i] }).collect()
    }

    pub fn num_vertices(&self) -> usize {
        1usize << self.dim()
    }

    /// Concatenation of boxes (product domain).
    pub fn product(parts: &[&BoxDomain]) -> Self {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for p in parts {
            lo.extend_from_slice(&p.lo);
            hi.extend_from_slice(&p.hi);
        }
        Self { lo, hi }
    }
}

/// Known output map `y = h(x)`; all benchmarks measure a subset of states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMap {
    /// `y_j = x[indices[j]]`.
    Select(Vec<usize>),
}

impl OutputMap {
    pub fn output_dim(&self) -> usize {
        match self {
            OutputMap::Select(ix) => ix.len(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        match self {
            OutputMap::Select(ix) => ix,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.indices().iter().map(|&i| x[i]).collect()
    }

    pub fn validate(&self, nx: usize) -> Result<()> {
        if let Some(&bad) = self.indices().iter().find(|&&i| i >= nx) {
            return Err(Error::Dimension(format!("output map reads state {bad} of a {nx}-state system")));
        }
        Ok(())
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_validation_and_membership() {
        assert!(BoxDomain::new(vec![0.0], vec![-1.0]).is_err());
        let b = BoxDomain::from_bounds(&[(-25.0, 25.0), (0.0, 50.0)]).unwrap();
        assert!(b.contains(&[0.0, 50.0]));
        assert!(!b.contains(&[0.0, 50.1]));
        let big = b.inflated(2.0);
        assert_eq!(big.lo, vec![-50.0, -25.0]);
        assert_eq!(big.hi, vec![50.0, 75.0]);
    }

    #[test]
    fn samples_stay_in_box() {
        let b = BoxDomain::from_bounds(&[(-0.8, 0.8), (2.0, 3.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| b.contains(&b.sample(&mut rng))));
    }

    #[test]
    fn vertices_enumerate_corners() {
        let b = BoxDomain::from_bounds(&[(0.0, 1.0), (2.0, 3.0)]).unwrap();
        assert_eq!(b.num_vertices(), 4);
        assert_eq!(b.vertex(0), vec![0.0, 2.0]);
        assert_eq!(b.vertex(3), vec![1.0, 3.0]);
    }

    #[test]
    fn output_map_selects_states() {
        let h = OutputMap::Select(vec![0]);
        assert_eq!(h.apply(&[4.0, 5.0, 6.0]), vec![4.0]);
        assert!(h.validate(3).is_ok());
        assert!(OutputMap::Select(vec![3]).validate(3).is_err());
    }
}

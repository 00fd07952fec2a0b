//! Axis-aligned boxes.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoxDomain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl TryFrom<RawBox> for BoxDomain {
    type Error = Error;
    fn try_from(r: RawBox) -> Result<Self> {
        BoxDomain::new(r.lo, r.hi)
    }
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidDomain(format!(
                "bounds of length {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for d in 0..lo.len() {
            if !(lo[d].is_finite() && hi[d].is_finite() && lo[d] < hi[d]) {
                return Err(Error::InvalidDomain(format!(
                    "dimension {d}: [{}, {}]",
                    lo[d], hi[d]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// `±half` about the origin.
    pub fn symmetric(half: &[f64]) -> Result<Self> {
        Self::new(half.iter().map(|h| -h).collect(), half.to_vec())
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.width(d)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, &v)| v >= self.lo[d] && v <= self.hi[d])
    }

    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, &v)| v > self.lo[d] && v < self.hi[d])
    }

    pub fn contains_box(&self, other: &BoxDomain) -> bool {
        (0..self.dim()).all(|d| other.lo[d] >= self.lo[d] && other.hi[d] <= self.hi[d])
    }

    /// Project a point onto the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[d], self.hi[d]);
        }
    }

    pub fn clamp_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.lo[d], self.hi[d]);
            }
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, self.dim()), |(_, d)| {
            self.lo[d] + rng.random::<f64>() * self.width(d)
        })
    }

    /// Scale by `k` about the center.
    pub fn scaled(&self, k: f64) -> Self {
        let c = self.center();
        let lo = (0..self.dim())
            .map(|d| c[d] - 0.5 * k * self.width(d))
            .collect();
        let hi = (0..self.dim())
            .map(|d| c[d] + 0.5 * k * self.width(d))
            .collect();
        Self { lo, hi }
    }

    /// Scale by `k` about the origin.
    pub fn scaled_about_origin(&self, k: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|v| v * k).collect(),
            hi: self.hi.iter().map(|v| v * k).collect(),
        }
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BoxDomain) -> Self {
        Self {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Halves along dimension `d`.
    pub fn split(&self, d: usize) -> (Self, Self) {
        let mid = 0.5 * (self.lo[d] + self.hi[d]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[d] = mid;
        right.lo[d] = mid;
        (left, right)
    }

    /// Area of the face normal to dimension `d`.
    pub fn face_area(&self, d: usize) -> f64 {
        (0..self.dim())
            .filter(|&k| k != d)
            .map(|k| self.width(k))
            .product()
    }

    /// Uniform samples on the surface: face chosen with probability
    /// proportional to its area, each side equally likely.
    pub fn sample_faces<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let areas: Vec<f64> = (0..self.dim()).map(|d| self.face_area(d)).collect();
        let total: f64 = areas.iter().sum();
        let mut out = self.sample_uniform(rng, n);
        for mut row in out.rows_mut() {
            let mut r = rng.random::<f64>() * total;
            let mut d = 0;
            while d + 1 < areas.len() && r >= areas[d] {
                r -= areas[d];
                d += 1;
            }
            row[d] = if rng.random::<bool>() {
                self.hi[d]
            } else {
                self.lo[d]
            };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_inverted_bounds() {
        assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![1.0, 0.0], vec![2.0]).is_err());
        assert!(serde_json::from_str::<BoxDomain>(r#"{"lo":[1.0],"hi":[0.0]}"#).is_err());
    }

    #[test]
    fn boundary_of_doubled_unit_box() {
        let b = BoxDomain::symmetric(&[1.0, 1.0]).unwrap().scaled(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample_faces(&mut rng, 1000);
        for row in s.rows() {
            let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn face_samples_pin_one_coordinate() {
        let b = BoxDomain::symmetric(&[1.0, 2.0, 0.5, 3.0, 1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = b.sample_faces(&mut rng, 2000);
        for row in s.rows() {
            let pinned = (0..6)
                .filter(|&d| row[d] == b.lo()[d] || row[d] == b.hi()[d])
                .count();
            assert_eq!(pinned, 1);
        }
    }

    #[test]
    fn face_distribution_follows_area() {
        // Faces normal to x have length 4, normal to y have length 1.
        let b = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let s = b.sample_faces(&mut rng, n);
        let mut counts = [0usize; 4];
        for row in s.rows() {
            let k = if row[0] == 0.0 {
                0
            } else if row[0] == 1.0 {
                1
            } else if row[1] == 0.0 {
                2
            } else {
                3
            };
            counts[k] += 1;
        }
        let expected = [0.4, 0.4, 0.1, 0.1].map(|p| p * n as f64);
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&c, e)| (c as f64 - e).powi(2) / e)
            .sum();
        // 3 degrees of freedom, 99.9% quantile is about 16.3
        assert!(chi2 < 16.3, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn samples_stay_inside(lo in -5.0f64..0.0, w in 0.1f64..5.0, seed in 0u64..1000) {
            let b = BoxDomain::new(vec![lo, lo * 0.5], vec![lo + w, lo * 0.5 + 2.0 * w]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for row in b.sample_uniform(&mut rng, 64).rows() {
                prop_assert!(b.contains(row.as_slice().unwrap()));
            }
            let (l, r) = b.split(1);
            prop_assert!(b.contains_box(&l) && b.contains_box(&r));
            prop_assert!((l.volume() + r.volume() - b.volume()).abs() < 1e-9);
            prop_assert!(b.scaled(1.2).contains_box(&b));
        }
    }
}

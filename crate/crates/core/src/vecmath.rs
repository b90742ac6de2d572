//! Small vector helpers shared by every module: norms, cosine similarity,
//! compensated summation and seed derivation.

use crate::error::{MacCapError, Result};

/// Tolerance used by the unit-norm invariants throughout the crate.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length.
///
/// A vector whose norm already equals one to within a few ulps is returned
/// unchanged, which makes normalization exactly idempotent.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(MacCapError::NumericFailure(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    if norm == 0.0 {
        return Err(MacCapError::invalid("cannot normalize a zero vector"));
    }
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Standard cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MacCapError::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(MacCapError::invalid("cosine of empty vectors"));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(MacCapError::invalid("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Neumaier compensated sum. The result is independent of summation order
/// to well below 1e-9 for the magnitudes used here.
#[derive(Debug, Default, Clone, Copy)]
pub struct StableSum {
    sum: f64,
    compensation: f64,
    count: usize,
}

impl StableSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total() / self.count as f64)
    }
}

impl FromIterator<f64> for StableSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = StableSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed, a domain tag and an
/// index: `splitmix64(splitmix64(splitmix64(seed) ^ domain) ^ index)`.
pub fn stream_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ domain) ^ index)
}

/// Domain tags for [`stream_seed`].
pub mod domain {
    pub const TEXT_TOKEN: u64 = 0x5445_5854;
    pub const PIXEL_PROJECTION: u64 = 0x5049_5845;
    pub const SYNTHETIC_IMAGE: u64 = 0x494d_4147;
    pub const SYNTHETIC_CAPTION: u64 = 0x4341_5054;
    pub const LANGUAGE_MODEL: u64 = 0x4c4d_5754;
    pub const ADAPTOR_INIT: u64 = 0x4144_4150;
    pub const TRAIN_NOISE: u64 = 0x544e_4f49;
    pub const TRAIN_SHUFFLE: u64 = 0x5348_5546;
    pub const INFERENCE_NOISE: u64 = 0x494e_4f49;
    pub const TESTBED: u64 = 0x5445_5342;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hand_values() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MacCapError::InvalidArgument(_))
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let v = l2_normalize(&[3.0, 4.0, 12.0]).unwrap();
        assert_eq!(l2_normalize(&v).unwrap(), v);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
        assert!(l2_normalize(&[0.0; 3]).is_err());
    }

    #[test]
    fn stable_sum_is_order_independent() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e8).collect();
        let fwd: StableSum = xs.iter().copied().collect();
        let rev: StableSum = xs.iter().rev().copied().collect();
        assert!((fwd.mean().unwrap() - rev.mean().unwrap()).abs() < 1e-9);
    }
}

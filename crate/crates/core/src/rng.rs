//! Counter-based normal variates.
//!
//! Every variate is a pure function of a key `(seed, stream, step, index,
//! axis)`. Nothing is carried between draws, so a node increment does not
//! depend on how many other nodes, landmarks or steps were sampled before
//! it. This is what lets a superset of points see exactly the same noise as
//! any of its subsets.

use std::f64::consts::PI;

/// A keyed stream of standard normal variates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derive an independent stream, e.g. one per path or per tree edge.
    pub fn substream(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix64(self.stream ^ mix64(label.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    /// Standard normal variate for the given key.
    pub fn normal(&self, step: u64, index: u64, axis: u64) -> f64 {
        let mut h = mix64(self.seed ^ 0xA076_1D64_78BD_642F);
        h = mix64(h ^ self.stream.wrapping_mul(0xE703_7ED1_A0B4_28DB));
        h = mix64(h ^ step.wrapping_mul(0x8EBC_6AF0_9C88_C6E3));
        h = mix64(h ^ index.wrapping_mul(0x5899_65CC_7537_4CC3));
        h = mix64(h ^ axis.wrapping_mul(0x1D8E_4E27_C47D_124F));
        let a = mix64(h ^ 0x9E37_79B9_7F4A_7C15);
        let b = mix64(a ^ 0xBF58_476D_1CE4_E5B9);
        // Box-Muller, u1 in (0, 1] so the log is finite
        let u1 = ((a >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_are_pure() {
        let s = NoiseStream::new(7, 3);
        assert_eq!(s.normal(1, 2, 0).to_bits(), s.normal(1, 2, 0).to_bits());
        assert_ne!(s.normal(1, 2, 0), s.normal(1, 2, 1));
        assert_ne!(s.normal(1, 2, 0), s.normal(2, 2, 0));
        assert_ne!(s.substream(1), s.substream(2));
    }

    #[test]
    fn moments_are_standard_normal() {
        let s = NoiseStream::new(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|i| s.normal(0, i, 0)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        let k4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        assert!((k4 - 3.0).abs() < 0.1);
    }
}

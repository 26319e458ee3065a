//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, purpose, index)`. The seed and purpose
//! are hashed into a ChaCha8 key and the index selects the ChaCha stream, so
//! any two addresses give independent sequences and parallel trials never
//! share generator state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use super::linalg::Matrix;
use crate::error::{RemixError, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    purpose: String,
    index: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, purpose: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(purpose.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        RngStream { seed, purpose: purpose.to_owned(), index, rng, spare_normal: None }
    }

    /// A fresh stream sharing this stream's seed.
    pub fn derive(&self, purpose: &str, index: u64) -> RngStream {
        RngStream::new(self.seed, purpose, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> &str {
        &self.purpose
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal draw by the Box–Muller transform. Draws come in
    /// pairs; the second of each pair is returned by the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }
}

/// Matrix with i.i.d. `N(0, sigma²)` entries, filled row-major from `rng`.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(RemixError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = sigma * rng.normal();
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_triples_replay() {
        let mut a = RngStream::new(7, "router", 3);
        let mut b = RngStream::new(7, "router", 3);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let ma = gaussian_matrix(&mut RngStream::new(1, "p", 0), 4, 5, 1.0).unwrap();
        let mb = gaussian_matrix(&mut RngStream::new(1, "p", 0), 4, 5, 1.0).unwrap();
        assert_eq!(ma.data(), mb.data());
    }

    #[test]
    fn distinct_triples_differ() {
        let first = |s: u64, p: &str, i: u64| RngStream::new(s, p, i).next_u64();
        let base = first(1, "a", 0);
        assert_ne!(base, first(2, "a", 0));
        assert_ne!(base, first(1, "b", 0));
        assert_ne!(base, first(1, "a", 1));
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let mut rng = RngStream::new(0, "x", 0);
        assert!(gaussian_matrix(&mut rng, 2, 2, 0.0).is_err());
        assert!(gaussian_matrix(&mut rng, 2, 2, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(11, "moments", 0);
        let unit = gaussian_matrix(&mut rng, 1000, 1000, 1.0).unwrap();
        let mean = unit.data().iter().sum::<f64>() / 1e6;
        assert!(mean.abs() <= 0.005, "mean {mean}");

        let wide = gaussian_matrix(&mut rng, 1000, 1000, 2.0).unwrap();
        let m = wide.data().iter().sum::<f64>() / 1e6;
        let var = wide.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (1e6 - 1.0);
        assert!((var - 4.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = RngStream::new(3, "below", 0);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.below(5)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0);
        }
    }
}

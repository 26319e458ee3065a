//! Standard normal density, distribution and quantile functions.

use statrs::function::{erf, gamma};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density φ(z).
pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal distribution function Φ(z).
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(z), computed without cancellation.
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Quantile Φ⁻¹(p) for `p ∈ (0, 1)`.
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ(z) = ½ + φ(z)·Σ z^(2k+1) / (1·3·5·…·(2k+1)), summed until the
    /// terms vanish. Independent of the erfc route used above.
    fn cdf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        let mut k = 0u32;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            k += 1;
            term *= z * z / f64::from(2 * k + 1);
            sum += term;
        }
        0.5 + std_normal_pdf(z) * sum
    }

    #[test]
    fn anchors() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert!((std_normal_cdf(1.96) - 0.975_002_1).abs() < 1e-7);
        assert!((std_normal_cdf(1.96) - cdf_series(1.96)).abs() < 1e-10);
    }

    #[test]
    fn cdf_matches_series_oracle() {
        let mut z = -8.0;
        while z <= 8.0 {
            let diff = (std_normal_cdf(z) - cdf_series(z)).abs();
            assert!(diff <= 1e-10, "z={z} diff={diff}");
            z += 0.125;
        }
    }

    #[test]
    fn derivative_of_cdf_is_pdf() {
        let h = 1e-5;
        for i in 0..=16 {
            let z = -4.0 + 0.5 * f64::from(i);
            let fd = (std_normal_cdf(z + h) - std_normal_cdf(z - h)) / (2.0 * h);
            assert!((fd - std_normal_pdf(z)).abs() <= 1e-6, "z={z}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-6, 0.001, 0.1, 0.5, 0.8, 0.999] {
            let z = std_normal_inv_cdf(p);
            assert!((std_normal_cdf(z) - p).abs() <= 1e-12 * p.max(1e-3) * 1e3, "p={p}");
        }
        assert!(std_normal_inv_cdf(0.5).abs() < 1e-15);
    }

    #[test]
    fn survival_complements_cdf() {
        for &z in &[-3.0, 0.0, 1.0, 5.0] {
            assert!((std_normal_sf(z) + std_normal_cdf(z) - 1.0).abs() < 1e-15);
        }
    }
}

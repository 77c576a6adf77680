//! Radial basis: Gaussians with centres `r_cut·(i+1)/n` and width `r_cut/n`,
//! times the envelope `1 − 10x³ + 15x⁴ − 6x⁵` with `x = r / r_cut`.
//!
//! The envelope and its first two derivatives vanish at `x = 1`, so every
//! basis value goes to zero smoothly at the cutoff.

use super::config::ModelConfig;
use crate::poly::Polynomial;
use crate::{Error, Result};

pub fn envelope(x: f64) -> f64 {
    if x >= 1.0 {
        return 0.0;
    }
    1.0 - x.powi(3) * (10.0 - 15.0 * x + 6.0 * x * x)
}

/// The envelope as a polynomial in `r`.
pub fn envelope_polynomial(r_cut: f64) -> Polynomial {
    let c = |k: i32| r_cut.powi(-k);
    Polynomial::univariate(&[1.0, 0.0, 0.0, -10.0 * c(3), 15.0 * c(4), -6.0 * c(5)])
}

pub fn centers(config: &ModelConfig) -> Vec<f64> {
    let n = config.n_radial_basis;
    (0..n).map(|i| config.r_cut * (i + 1) as f64 / n as f64).collect()
}

pub fn width(config: &ModelConfig) -> f64 {
    config.r_cut / config.n_radial_basis as f64
}

/// Basis values at distance `r`.
pub fn radial_basis(config: &ModelConfig, r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("radial basis needs r > 0, got {r}")));
    }
    let env = envelope(r / config.r_cut);
    let sigma = width(config);
    Ok(centers(config).iter().map(|mu| env * (-(r - mu).powi(2) / (2.0 * sigma * sigma)).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_and_beyond_cutoff() {
        let c = ModelConfig::uniform(1, 0, 2, vec![1]);
        assert!(radial_basis(&c, c.r_cut).unwrap().iter().all(|&v| v == 0.0));
        assert!(radial_basis(&c, 1.2 * c.r_cut).unwrap().iter().all(|&v| v == 0.0));
        assert!(radial_basis(&c, 0.0).is_err());
        assert!(radial_basis(&c, -1.0).is_err());
    }

    #[test]
    fn half_cutoff_matches_closed_form() {
        let mut c = ModelConfig::uniform(1, 0, 2, vec![1]);
        c.r_cut = 2.0;
        c.n_radial_basis = 4;
        let v = radial_basis(&c, 1.0).unwrap();
        // x = 1/2: envelope = 1 − 10/8 + 15/16 − 6/32 = 0.5
        let env = 0.5;
        let sigma = 0.5;
        for (i, mu) in [0.5, 1.0, 1.5, 2.0].iter().enumerate() {
            let want = env * (-(1.0f64 - mu).powi(2) / (2.0 * sigma * sigma)).exp();
            assert!((v[i] - want).abs() < 1e-15);
        }
        assert_eq!(v[1], 0.5);
    }

    #[test]
    fn envelope_is_flat_to_second_order_at_cutoff() {
        let p = envelope_polynomial(1.7);
        assert!(p.eval(&[1.7]).abs() < 1e-12);
        assert!(p.derivative(0).eval(&[1.7]).abs() < 1e-12);
        assert!(p.derivative(0).derivative(0).eval(&[1.7]).abs() < 1e-11);
        assert!((p.eval(&[0.85]) - envelope(0.5)).abs() < 1e-14);
    }
}

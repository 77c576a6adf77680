//! Multivariate polynomials with real coefficients.
//!
//! Used for the Cartesian form of the real spherical harmonics and for the
//! radial cutoff envelope; closed under differentiation, which the tape relies
//! on for higher-order gradients.

use std::collections::BTreeMap;

use crate::tape::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    n_vars: usize,
    /// `(coefficient, exponents)` with exponents unique and sorted.
    terms: Vec<(f64, Vec<u8>)>,
}

impl Polynomial {
    pub fn zero(n_vars: usize) -> Self {
        Self { n_vars, terms: Vec::new() }
    }

    pub fn constant(n_vars: usize, c: f64) -> Self {
        Self::from_terms(n_vars, vec![(c, vec![0; n_vars])])
    }

    /// The single variable `x_var`.
    pub fn var(n_vars: usize, var: usize) -> Self {
        let mut e = vec![0; n_vars];
        e[var] = 1;
        Self::from_terms(n_vars, vec![(1.0, e)])
    }

    /// Univariate polynomial from ascending coefficients.
    pub fn univariate(coeffs: &[f64]) -> Self {
        let terms = coeffs.iter().enumerate().map(|(p, &c)| (c, vec![p as u8])).collect();
        Self::from_terms(1, terms)
    }

    pub fn from_terms(n_vars: usize, terms: Vec<(f64, Vec<u8>)>) -> Self {
        let mut merged: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
        for (c, e) in terms {
            assert_eq!(e.len(), n_vars, "exponent arity");
            *merged.entry(e).or_insert(0.0) += c;
        }
        let terms = merged.into_iter().filter(|(_, c)| *c != 0.0).map(|(e, c)| (c, e)).collect();
        Self { n_vars, terms }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn terms(&self) -> &[(f64, Vec<u8>)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n_vars, other.n_vars);
        let terms = self.terms.iter().chain(&other.terms).cloned().collect();
        Self::from_terms(self.n_vars, terms)
    }

    pub fn scale(&self, c: f64) -> Self {
        let terms = self.terms.iter().map(|(k, e)| (k * c, e.clone())).collect();
        Self::from_terms(self.n_vars, terms)
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.n_vars, other.n_vars);
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (a, ea) in &self.terms {
            for (b, eb) in &other.terms {
                let e = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                terms.push((a * b, e));
            }
        }
        Self::from_terms(self.n_vars, terms)
    }

    pub fn pow(&self, p: u32) -> Self {
        (0..p).fold(Self::constant(self.n_vars, 1.0), |acc, _| acc.mul(self))
    }

    pub fn derivative(&self, var: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(_, e)| e[var] > 0)
            .map(|(c, e)| {
                let mut e2 = e.clone();
                e2[var] -= 1;
                (c * f64::from(e[var]), e2)
            })
            .collect();
        Self::from_terms(self.n_vars, terms)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_t(x)
    }

    pub fn eval_t<T: Real>(&self, x: &[T]) -> T {
        debug_assert_eq!(x.len(), self.n_vars);
        let mut acc = T::zero();
        for (c, e) in &self.terms {
            let mut t = T::from_f64(*c);
            for (xi, &p) in x.iter().zip(e) {
                if p > 0 {
                    t = t * xi.powi(i32::from(p));
                }
            }
            acc += t;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_product() {
        let x = Polynomial::var(2, 0);
        let y = Polynomial::var(2, 1);
        let p = x.pow(3).mul(&y).add(&y.scale(2.0)); // x³y + 2y
        let dx = p.derivative(0); // 3x²y
        let dy = p.derivative(1); // x³ + 2
        assert_eq!(dx.eval(&[2.0, 5.0]), 60.0);
        assert_eq!(dy.eval(&[2.0, 5.0]), 10.0);
        assert!(p.derivative(0).derivative(0).derivative(0).derivative(0).is_zero());
    }

    #[test]
    fn cancelling_terms_are_dropped() {
        let x = Polynomial::var(1, 0);
        assert!(x.add(&x.scale(-1.0)).is_zero());
    }
}

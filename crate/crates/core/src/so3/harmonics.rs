use std::f64::consts::PI;

use super::factorial;
use crate::poly::Polynomial;
use crate::{Error, Result};

/// Number of components for orders `0..=l_max`.
pub fn sh_width(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Flat position of component `(l, m)` in an order-stacked harmonic vector.
pub fn sh_index(l: usize, m: i64) -> usize {
    (l * l) + (m + l as i64) as usize
}

/// Ascending coefficients of the Legendre polynomial `P_l`.
fn legendre_coeffs(l: usize) -> Vec<f64> {
    let mut c = vec![0.0; l + 1];
    for k in 0..=l / 2 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let binom_lk = factorial(l as i64) / (factorial(k as i64) * factorial((l - k) as i64));
        let binom_2l = factorial((2 * l - 2 * k) as i64)
            / (factorial(l as i64) * factorial((l - 2 * k) as i64));
        c[l - 2 * k] = sign * binom_lk * binom_2l / 2f64.powi(l as i32);
    }
    c
}

/// Cartesian polynomials in `(x, y, z)` equal to the real harmonics on the
/// unit sphere, one per component, order-stacked up to `l_max`.
pub fn real_sh_polynomials(l_max: usize) -> Vec<Polynomial> {
    let x = Polynomial::var(3, 0);
    let y = Polynomial::var(3, 1);
    let mut out = Vec::with_capacity(sh_width(l_max));
    for l in 0..=l_max {
        // P_l as a polynomial in z.
        let pl: Polynomial = Polynomial::from_terms(
            3,
            legendre_coeffs(l)
                .into_iter()
                .enumerate()
                .map(|(p, c)| (c, vec![0, 0, p as u8]))
                .collect(),
        );
        let mut block = vec![Polynomial::zero(3); 2 * l + 1];
        let mut dpl = pl;
        for m in 0..=l {
            if m > 0 {
                dpl = dpl.derivative(2);
            }
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial((l - m) as i64)
                / factorial((l + m) as i64))
            .sqrt();
            if m == 0 {
                block[l] = dpl.scale(norm);
                continue;
            }
            // Re / Im of (x + i y)^m.
            let mut re = Polynomial::zero(3);
            let mut im = Polynomial::zero(3);
            for j in 0..=m {
                let binom = factorial(m as i64) / (factorial(j as i64) * factorial((m - j) as i64));
                let t = x.pow((m - j) as u32).mul(&y.pow(j as u32)).scale(binom);
                match j % 4 {
                    0 => re = re.add(&t),
                    1 => im = im.add(&t),
                    2 => re = re.add(&t.scale(-1.0)),
                    _ => im = im.add(&t.scale(-1.0)),
                }
            }
            let c = std::f64::consts::SQRT_2 * norm;
            block[l + m] = dpl.mul(&re).scale(c);
            block[l - m] = dpl.mul(&im).scale(c);
        }
        out.extend(block);
    }
    out
}

/// Real spherical harmonics of a unit direction, one block per order.
pub fn real_spherical_harmonics(l_max: usize, direction: [f64; 3]) -> Result<Vec<Vec<f64>>> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(norm));
    }
    let polys = real_sh_polynomials(l_max);
    Ok((0..=l_max)
        .map(|l| (0..2 * l + 1).map(|i| polys[l * l + i].eval(&direction)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_harmonic_is_constant() {
        let c = 0.5 / PI.sqrt();
        for d in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]] {
            let y = real_spherical_harmonics(0, d).unwrap();
            assert!((y[0][0] - c).abs() < 1e-16);
            assert!((y[0][0] - 0.2820948).abs() < 1e-7);
        }
    }

    #[test]
    fn l1_along_z_has_only_m0() {
        let y = real_spherical_harmonics(1, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(y[1][0], 0.0);
        assert_eq!(y[1][2], 0.0);
        assert!(y[1][1] > 0.0);
        assert!((y[1][1] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn l2_matches_cartesian_closed_form() {
        // Independent closed forms for the real l = 2 harmonics.
        let s = 1.0 / 3f64.sqrt();
        let (x, y, z) = (s, s, s);
        let c = 0.5 * (15.0 / PI).sqrt();
        let expected = [
            c * x * y,
            c * y * z,
            0.25 * (5.0 / PI).sqrt() * (3.0 * z * z - 1.0),
            c * x * z,
            0.5 * c * (x * x - y * y),
        ];
        let got = real_spherical_harmonics(2, [x, y, z]).unwrap();
        for (g, e) in got[2].iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(matches!(
            real_spherical_harmonics(2, [1.0, 1.0, 0.0]),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn legendre_p3() {
        // P3 = (5z³ − 3z)/2
        assert_eq!(legendre_coeffs(3), vec![0.0, -1.5, 0.0, 2.5]);
    }
}

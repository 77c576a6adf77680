use num_complex::Complex64;

use super::{complex_to_real, factorial, Rotation, MAX_L};

/// Real Wigner-D block of order `l`, `(2l+1)×(2l+1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerBlock {
    pub l: usize,
    pub matrix: Vec<f64>,
}

impl WignerBlock {
    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim() + j]
    }

    /// `D · v` for a single `(2l+1)` multiplet.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }

    pub fn orthogonality_error(&self) -> f64 {
        let n = self.dim();
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| self.get(k, i) * self.get(k, j)).sum();
                err = err.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        err
    }
}

/// Wigner small-d `d^l_{m'm}(β)` from the explicit factorial sum.
pub fn wigner_small_d(l: usize, mp: i64, m: i64, beta: f64) -> f64 {
    let l = l as i64;
    let (c, s) = ((beta / 2.0).cos(), (beta / 2.0).sin());
    let pre = (factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m)).sqrt();
    let s_min = 0.max(m - mp);
    let s_max = (l + m).min(l - mp);
    let mut sum = 0.0;
    for k in s_min..=s_max {
        let sign = if (mp - m + k) % 2 == 0 { 1.0 } else { -1.0 };
        let den = factorial(l + m - k) * factorial(k) * factorial(mp - m + k) * factorial(l - mp - k);
        sum += sign / den * c.powi((2 * l + m - mp - 2 * k) as i32) * s.powi((mp - m + 2 * k) as i32);
    }
    pre * sum
}

/// Complex `D^l_{m'm}(α, β, γ) = e^{-i m' α} d^l_{m'm}(β) e^{-i m γ}`, indexed at `+l`.
pub fn complex_wigner_d(l: usize, g: &Rotation) -> Vec<Vec<Complex64>> {
    let (alpha, beta, gamma) = g.to_euler_zyz();
    let li = l as i64;
    let n = 2 * l + 1;
    let mut d = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for mp in -li..=li {
        for m in -li..=li {
            let phase = Complex64::from_polar(1.0, -(mp as f64) * alpha - (m as f64) * gamma);
            d[(mp + li) as usize][(m + li) as usize] = phase * wigner_small_d(l, mp, m, beta);
        }
    }
    d
}

/// Real-basis Wigner-D with `Y_l(g r) = D^l(g) Y_l(r)`.
pub fn wigner_d(l: usize, g: &Rotation) -> WignerBlock {
    assert!(l <= MAX_L, "order {l} above supported maximum {MAX_L}");
    let n = 2 * l + 1;
    if l == 0 {
        return WignerBlock { l, matrix: vec![1.0] };
    }
    let d = complex_wigner_d(l, g);
    let u = complex_to_real(l);
    // Complex harmonics transform with the conjugate of D: Y(g r) = D* Y(r).
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..n {
                if u[i][a].norm_sqr() == 0.0 {
                    continue;
                }
                for b in 0..n {
                    if u[j][b].norm_sqr() == 0.0 {
                        continue;
                    }
                    acc += u[i][a] * d[a][b].conj() * u[j][b].conj();
                }
            }
            matrix[i * n + j] = acc.re;
        }
    }
    WignerBlock { l, matrix }
}

use std::collections::BTreeMap;

use num_complex::Complex64;

use super::{complex_to_real, factorial};

/// Selection rule `|l1 − l2| ≤ l3 ≤ l1 + l2`.
pub fn triangle(l1: usize, l2: usize, l3: usize) -> bool {
    l1.abs_diff(l2) <= l3 && l3 <= l1 + l2
}

/// Complex-basis `⟨l1 m1 l2 m2 | l3 m3⟩` from the Racah closed-form sum.
pub fn complex_clebsch_gordan(l1: usize, m1: i64, l2: usize, m2: i64, l3: usize, m3: i64) -> f64 {
    if m1 + m2 != m3 || !triangle(l1, l2, l3) {
        return 0.0;
    }
    let (j1, j2, j3) = (l1 as i64, l2 as i64, l3 as i64);
    if m1.abs() > j1 || m2.abs() > j2 || m3.abs() > j3 {
        return 0.0;
    }
    let f = factorial;
    let pre = ((2 * j3 + 1) as f64 * f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3)
        / f(j1 + j2 + j3 + 1))
    .sqrt()
        * (f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)).sqrt();
    let k_min = 0.max(j2 - j3 - m1).max(j1 - j3 + m2);
    let k_max = (j1 + j2 - j3).min(j1 - m1).min(j2 + m2);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign
            / (f(k) * f(j1 + j2 - j3 - k) * f(j1 - m1 - k) * f(j2 + m2 - k) * f(j3 - j2 + m1 + k)
                * f(j3 - j1 - m2 + k));
    }
    pre * sum
}

/// Dense real-basis coupling tensor indexed `[m1][m2][m3]` (each at `+l`).
///
/// Contraction `out[m3] = Σ C[m1,m2,m3] a[m1] b[m2]` is equivariant:
/// `C(D¹a, D²b) = D³ C(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CgTensor {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub data: Vec<f64>,
}

impl CgTensor {
    pub fn get(&self, m1: usize, m2: usize, m3: usize) -> f64 {
        let (n2, n3) = (2 * self.l2 + 1, 2 * self.l3 + 1);
        self.data[(m1 * n2 + m2) * n3 + m3]
    }

    /// Non-zero entries as `(m1, m2, m3, value)` in row-major order.
    pub fn nonzero(&self) -> Vec<(usize, usize, usize, f64)> {
        let (n1, n2, n3) = (2 * self.l1 + 1, 2 * self.l2 + 1, 2 * self.l3 + 1);
        let mut out = Vec::new();
        for a in 0..n1 {
            for b in 0..n2 {
                for c in 0..n3 {
                    let v = self.get(a, b, c);
                    if v != 0.0 {
                        out.push((a, b, c, v));
                    }
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn contract(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.l3 + 1];
        for (i, j, k, v) in self.nonzero() {
            out[k] += v * a[i] * b[j];
        }
        out
    }
}

/// Real-basis Clebsch–Gordan tensor; all zeros when the selection rule fails.
pub fn clebsch_gordan(l1: usize, l2: usize, l3: usize) -> CgTensor {
    let (n1, n2, n3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let mut data = vec![0.0; n1 * n2 * n3];
    if !triangle(l1, l2, l3) {
        return CgTensor { l1, l2, l3, data };
    }
    let (u1, u2, u3) = (complex_to_real(l1), complex_to_real(l2), complex_to_real(l3));
    let (i1, i2, i3) = (l1 as i64, l2 as i64, l3 as i64);
    let mut t = vec![Complex64::new(0.0, 0.0); n1 * n2 * n3];
    for mu1 in -i1..=i1 {
        for mu2 in -i2..=i2 {
            let mu3 = mu1 + mu2;
            if mu3.abs() > i3 {
                continue;
            }
            let c = complex_clebsch_gordan(l1, mu1, l2, mu2, l3, mu3);
            if c == 0.0 {
                continue;
            }
            let (p1, p2, p3) = ((mu1 + i1) as usize, (mu2 + i2) as usize, (mu3 + i3) as usize);
            for a1 in 0..n1 {
                let x1 = u1[a1][p1].conj();
                if x1.norm_sqr() == 0.0 {
                    continue;
                }
                for a2 in 0..n2 {
                    let x2 = u2[a2][p2].conj();
                    if x2.norm_sqr() == 0.0 {
                        continue;
                    }
                    for a3 in 0..n3 {
                        let x3 = u3[a3][p3];
                        if x3.norm_sqr() == 0.0 {
                            continue;
                        }
                        t[(a1 * n2 + a2) * n3 + a3] += x1 * x2 * x3 * c;
                    }
                }
            }
        }
    }
    // The change of basis leaves a global phase of 1 or i.
    let re = t.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let im = t.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    for (d, z) in data.iter_mut().zip(&t) {
        let v = if re >= im { z.re } else { z.im };
        *d = if v.abs() < 1e-14 { 0.0 } else { v };
    }
    CgTensor { l1, l2, l3, data }
}

/// Immutable cache of every admissible real coupling tensor up to `l_max`.
#[derive(Debug, Clone)]
pub struct CgCache {
    l_max: usize,
    tensors: BTreeMap<(usize, usize, usize), CgTensor>,
}

impl CgCache {
    pub fn new(l_max: usize) -> Self {
        let mut tensors = BTreeMap::new();
        for l1 in 0..=l_max {
            for l2 in 0..=l_max {
                for l3 in 0..=l_max {
                    if triangle(l1, l2, l3) {
                        tensors.insert((l1, l2, l3), clebsch_gordan(l1, l2, l3));
                    }
                }
            }
        }
        Self { l_max, tensors }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn get(&self, l1: usize, l2: usize, l3: usize) -> Option<&CgTensor> {
        self.tensors.get(&(l1, l2, l3))
    }

    /// Single real coefficient; zero outside the cached selection-rule set.
    pub fn coefficient(&self, l1: usize, l2: usize, l3: usize, m1: i64, m2: i64, m3: i64) -> f64 {
        self.get(l1, l2, l3).map_or(0.0, |t| {
            t.get((m1 + l1 as i64) as usize, (m2 + l2 as i64) as usize, (m3 + l3 as i64) as usize)
        })
    }
}

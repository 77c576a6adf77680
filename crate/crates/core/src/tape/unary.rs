use super::Real;

/// Element-wise scalar functions, closed under differentiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    /// `coef · exp(scale · x)`
    Exp { scale: f64, coef: f64 },
    /// `coef · x^p`
    Pow { p: f64, coef: f64 },
    /// `order`-th derivative of `x · sigmoid(x)`
    Silu { order: u32 },
    /// `order`-th derivative of `tanh(x)`
    Tanh { order: u32 },
}

impl UnaryFn {
    pub const SILU: UnaryFn = UnaryFn::Silu { order: 0 };
    pub const TANH: UnaryFn = UnaryFn::Tanh { order: 0 };

    pub fn sqrt() -> Self {
        UnaryFn::Pow { p: 0.5, coef: 1.0 }
    }

    pub fn derivative(self) -> Self {
        match self {
            UnaryFn::Exp { scale, coef } => UnaryFn::Exp { scale, coef: coef * scale },
            UnaryFn::Pow { p, coef } => UnaryFn::Pow { p: p - 1.0, coef: coef * p },
            UnaryFn::Silu { order } => UnaryFn::Silu { order: order + 1 },
            UnaryFn::Tanh { order } => UnaryFn::Tanh { order: order + 1 },
        }
    }

    /// Applies the function to every element of `xs`.
    pub fn apply<T: Real>(self, xs: &[T]) -> Vec<T> {
        match self {
            UnaryFn::Exp { scale, coef } => {
                let (s, c) = (T::from_f64(scale), T::from_f64(coef));
                xs.iter().map(|&x| c * (s * x).exp()).collect()
            }
            UnaryFn::Pow { p, coef } => {
                let c = T::from_f64(coef);
                if p == 0.0 {
                    return vec![c; xs.len()];
                }
                if p == 1.0 {
                    return xs.iter().map(|&x| c * x).collect();
                }
                let pt = T::from_f64(p);
                xs.iter().map(|&x| c * x.powf(pt)).collect()
            }
            UnaryFn::Silu { order } => {
                let p = sigmoid_derivative_poly(order);
                let q = if order > 0 { sigmoid_derivative_poly(order - 1) } else { Vec::new() };
                let n = T::from_f64(f64::from(order));
                xs.iter()
                    .map(|&x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        let mut v = x * horner(&p, s);
                        if order > 0 {
                            v += n * horner(&q, s);
                        }
                        v
                    })
                    .collect()
            }
            UnaryFn::Tanh { order } => {
                let p = tanh_derivative_poly(order);
                xs.iter().map(|&x| horner(&p, x.tanh())).collect()
            }
        }
    }
}

fn horner<T: Real>(coeffs: &[f64], x: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + T::from_f64(c))
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(i, &c)| c * i as f64).collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `d^n sigmoid / dx^n` as a polynomial in `s = sigmoid(x)`.
fn sigmoid_derivative_poly(n: u32) -> Vec<f64> {
    // s' = s (1 − s)
    (0..n).fold(vec![0.0, 1.0], |p, _| poly_mul(&poly_derivative(&p), &[0.0, 1.0, -1.0]))
}

/// `d^n tanh / dx^n` as a polynomial in `t = tanh(x)`.
fn tanh_derivative_poly(n: u32) -> Vec<f64> {
    // t' = 1 − t²
    (0..n).fold(vec![0.0, 1.0], |p, _| poly_mul(&poly_derivative(&p), &[1.0, 0.0, -1.0]))
}

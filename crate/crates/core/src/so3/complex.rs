use num_complex::Complex64;

/// Unitary change of basis `U` with `Y_real = U · Y_complex` for order `l`.
///
/// Rows are real-basis components `m = -l..=l`, columns complex components
/// `μ = -l..=l`, both stored at offset `+l`. The complex harmonics carry the
/// Condon–Shortley phase.
pub fn complex_to_real(l: usize) -> Vec<Vec<Complex64>> {
    let n = 2 * l + 1;
    let li = l as i64;
    let mut u = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    u[l][l] = Complex64::new(1.0, 0.0);
    for m in 1..=li {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let (pos, neg) = ((li + m) as usize, (li - m) as usize);
        // m > 0 row: ((-1)^m Y^m + Y^-m) / sqrt(2)
        u[pos][pos] = Complex64::new(sign * h, 0.0);
        u[pos][neg] = Complex64::new(h, 0.0);
        // m < 0 row: i (Y^-m - (-1)^m Y^m) / sqrt(2)
        u[neg][neg] = Complex64::new(0.0, h);
        u[neg][pos] = Complex64::new(0.0, -sign * h);
    }
    u
}

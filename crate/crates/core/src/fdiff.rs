//! Central finite differences, used as the independent gradient oracle
//! throughout the test suites.

/// d/dx f(x) via the central difference (f(x+h) - f(x-h)) / 2h.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of a multivariate scalar function, one central difference per
/// coordinate.
pub fn central_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// max_i |a_i - b_i| / max(1, |a_i|)
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

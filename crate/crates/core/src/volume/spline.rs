//! Natural cubic splines on unit-spaced samples.

/// Second derivatives of the natural cubic spline through `y` sampled at
/// integer positions (`M[0] = M[n-1] = 0`).
pub fn natural_spline_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Tridiagonal system M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])
    // over the interior, solved with the Thomas algorithm.
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 0..k {
        let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
        if i == 0 {
            c[i] = 1.0 / 4.0;
            d[i] = rhs / 4.0;
        } else {
            let denom = 4.0 - c[i - 1];
            c[i] = 1.0 / denom;
            d[i] = (rhs - d[i - 1]) / denom;
        }
    }
    m[k] = d[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = d[i] - c[i] * m[i + 2];
    }
    m
}

/// Evaluates the natural spline through `y` at fractional index positions.
/// Positions outside `[0, n-1]` continue linearly with the end slope.
pub fn resample_line(y: &[f64], positions: &[f64], out: &mut [f64]) {
    let n = y.len();
    debug_assert!(n >= 2 && out.len() == positions.len());
    let m = natural_spline_second_derivatives(y);
    let last = (n - 1) as f64;
    let slope0 = y[1] - y[0] - (2.0 * m[0] + m[1]) / 6.0;
    let slope1 = y[n - 1] - y[n - 2] + (m[n - 2] + 2.0 * m[n - 1]) / 6.0;
    for (o, &x) in out.iter_mut().zip(positions) {
        *o = if x <= 0.0 {
            y[0] + slope0 * x
        } else if x >= last {
            y[n - 1] + slope1 * (x - last)
        } else {
            let k = (x.floor() as usize).min(n - 2);
            let b = x - k as f64;
            let a = 1.0 - b;
            a * y[k] + b * y[k + 1] + ((a * a * a - a) * m[k] + (b * b * b - b) * m[k + 1]) / 6.0
        };
    }
}

/// Piecewise-linear counterpart of [`resample_line`] for very short lines.
pub fn linear_resample_line(y: &[f64], positions: &[f64], out: &mut [f64]) {
    let n = y.len();
    if n == 1 {
        out.fill(y[0]);
        return;
    }
    for (o, &x) in out.iter_mut().zip(positions) {
        let k = (x.floor().max(0.0) as usize).min(n - 2);
        let t = x - k as f64;
        *o = y[k] + t * (y[k + 1] - y[k]);
    }
}

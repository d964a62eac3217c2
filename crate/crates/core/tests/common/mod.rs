#![allow(dead_code)]

/// Sample mean, unbiased variance and standard error of the mean.
pub fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v, (v / n).sqrt())
}

/// |estimate − target| within `k` standard errors.
pub fn within(estimate: f64, target: f64, se: f64, k: f64) -> bool {
    (estimate - target).abs() <= k * se
}

/// Standard error of a Gaussian sample variance with true variance `var`.
pub fn var_se(var: f64, n: usize) -> f64 {
    var * (2.0 / (n as f64 - 1.0)).sqrt()
}

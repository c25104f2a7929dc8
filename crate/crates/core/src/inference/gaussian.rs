//! Closed forms for diagonal Gaussians parameterized by mean and log standard deviation.

const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

/// `KL(N(mean, diag exp(2 log_std)) ‖ N(0, I))`.
pub fn kl_std_normal(mean: &[f64], log_std: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .map(|(m, r)| 0.5 * (m * m + (2.0 * r).exp() - 1.0) - r)
        .sum()
}

/// Gradients of `-KL` with respect to mean and log std.
pub fn neg_kl_std_normal_grad(mean: &[f64], log_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gm = mean.iter().map(|m| -m).collect();
    let gr = log_std.iter().map(|r| 1.0 - (2.0 * r).exp()).collect();
    (gm, gr)
}

pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|r| r + 0.5 * LN_2PI_E).sum()
}

/// Entropy of a diagonal Gaussian given its variances.
pub fn entropy_var(var: &[f64]) -> f64 {
    var.iter().map(|v| 0.5 * (LN_2PI_E + v.ln())).sum()
}

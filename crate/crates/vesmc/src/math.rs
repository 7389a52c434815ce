//! Scalar numeric helpers shared across modules.

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of N(mean, var) at x. Caller guarantees var > 0.
#[inline]
pub(crate) fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((var.ln() + LN_2PI) + d * d / var)
}

/// log(sum(exp(v))) with max subtraction; -inf for empty or all -inf input.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

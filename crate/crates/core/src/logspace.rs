//! Log-domain helpers shared by the forward recursions and the variational E-steps.

/// `log(sum(exp(x)))` with max subtraction. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities and returns the log normalizer.
///
/// An all `-inf` input yields the uniform distribution.
pub fn softmax_in_place(values: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / values.len() as f64;
        values.iter_mut().for_each(|v| *v = u);
        return max;
    }
    // Normalizing the shifted exponentials directly keeps ties exact at large magnitudes.
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
    max + sum.ln()
}

/// `ln(p)` that maps zero to `-inf` without a NaN for negative zero.
#[inline]
pub fn ln(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// `p * ln(q)` with the `0 * ln 0 = 0` convention.
#[inline]
pub fn xlogy(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * ln(q)
    }
}

/// Relative change used by every stopping rule in the crate.
pub fn relative_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.abs().max(next.abs()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive() {
        let xs = [-1.0, -2.0, -3.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-15);
    }

    #[test]
    fn lse_survives_large_exponents() {
        let xs = [1.0e5, 1.0e5];
        assert!((log_sum_exp(&xs) - (1.0e5 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = [3.0, -700.0, 1.0e4, 2.0];
        softmax_in_place(&mut xs);
        assert!((xs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(xs[2] > 0.999_999);
    }
}

//! Binomial confidence intervals for empirical reach-avoid probabilities.

use statrs::distribution::{Beta, ContinuousCDF};

/// One-sided upper Clopper-Pearson bound for a binomial proportion.
///
/// Returns `u` such that `P(p <= u) >= confidence` for `successes` out of
/// `trials` observations.
pub fn clopper_pearson_upper(successes: u64, trials: u64, confidence: f64) -> f64 {
    assert!(trials > 0, "trials must be positive");
    assert!(successes <= trials);
    assert!((0.0..1.0).contains(&(1.0 - confidence)));
    if successes >= trials {
        return 1.0;
    }
    let a = successes as f64 + 1.0;
    let b = (trials - successes) as f64;
    Beta::new(a, b).expect("valid beta").inverse_cdf(confidence)
}

/// One-sided lower Clopper-Pearson bound.
pub fn clopper_pearson_lower(successes: u64, trials: u64, confidence: f64) -> f64 {
    assert!(trials > 0, "trials must be positive");
    assert!(successes <= trials);
    if successes == 0 {
        return 0.0;
    }
    let a = successes as f64;
    let b = (trials - successes) as f64 + 1.0;
    Beta::new(a, b)
        .expect("valid beta")
        .inverse_cdf(1.0 - confidence)
}

/// Two-sided Clopper-Pearson interval at the given confidence level.
pub fn clopper_pearson_interval(successes: u64, trials: u64, confidence: f64) -> (f64, f64) {
    let side = 1.0 - (1.0 - confidence) / 2.0;
    (
        clopper_pearson_lower(successes, trials, side),
        clopper_pearson_upper(successes, trials, side),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_successes_closed_form() {
        // For x = 0 the upper bound solves (1-u)^n = 1 - confidence.
        let n = 10;
        let u = clopper_pearson_upper(0, n, 0.99);
        let expected = 1.0 - (0.01f64).powf(1.0 / n as f64);
        assert!((u - expected).abs() < 1e-10, "{u} vs {expected}");
    }

    #[test]
    fn all_successes_closed_form() {
        let n = 25;
        assert_eq!(clopper_pearson_upper(n, n, 0.99), 1.0);
        let lo = clopper_pearson_lower(n, n, 0.99);
        let expected = (0.01f64).powf(1.0 / n as f64);
        assert!((lo - expected).abs() < 1e-10);
    }

    #[test]
    fn interval_brackets_point_estimate() {
        for &(x, n) in &[(3u64, 50u64), (42, 50), (0, 50), (50, 50), (25, 50)] {
            let (lo, hi) = clopper_pearson_interval(x, n, 0.95);
            let p = x as f64 / n as f64;
            assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }

    #[test]
    fn upper_bound_shrinks_with_trials() {
        let u100 = clopper_pearson_upper(50, 100, 0.99);
        let u1000 = clopper_pearson_upper(500, 1000, 0.99);
        assert!(u1000 < u100);
    }
}

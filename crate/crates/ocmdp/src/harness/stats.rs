//! Small statistics helpers for run comparison: sample moments, one-sided
//! Welch tests, and a Page-Hinkley drift detector for utility sequences.

use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; NaN for fewer than two points.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn standard_error(xs: &[f64]) -> f64 {
    (sample_var(xs) / xs.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for the alternative `mean(a) > mean(b)`.
    pub p_one_sided: f64,
}

/// Welch's unequal-variance t-test. Degenerate cases: identical samples give
/// the p = 0.5 convention; zero pooled variance with distinct means gives 0
/// or 1 by the sign of the difference.
pub fn welch_one_sided(a: &[f64], b: &[f64]) -> WelchResult {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a).max(0.0), sample_var(b).max(0.0));
    let pooled = va / na + vb / nb;
    if !(pooled > 0.0) || !pooled.is_finite() {
        let p = if ma > mb {
            0.0
        } else if ma < mb {
            1.0
        } else {
            0.5
        };
        return WelchResult { t: if ma == mb { 0.0 } else { f64::INFINITY * (ma - mb).signum() }, df: f64::NAN, p_one_sided: p };
    }
    let t = (ma - mb) / pooled.sqrt();
    let df_num = pooled * pooled;
    let df_den = (va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0);
    let df = if df_den > 0.0 { df_num / df_den } else { (na + nb - 2.0).max(1.0) };
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    WelchResult { t, df, p_one_sided: 1.0 - dist.cdf(t) }
}

/// Page-Hinkley detector for a downward mean shift: accumulates
/// `running_mean - x - delta` and fires when the excursion above its running
/// minimum exceeds `lambda`. Nondecreasing sequences never fire.
pub fn page_hinkley_decrease(xs: &[f64], delta: f64, lambda: f64) -> bool {
    let mut sum = 0.0;
    let mut m = 0.0;
    let mut m_min = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        sum += x;
        let running_mean = sum / (i + 1) as f64;
        m += running_mean - x - delta;
        m_min = m_min.min(m);
        if m - m_min > lambda {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_on_identical_samples_is_half() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_one_sided(&a, &a);
        assert_eq!(r.p_one_sided, 0.5);
        assert_eq!(r.t, 0.0);
    }

    #[test]
    fn welch_detects_a_large_gap() {
        let a: Vec<f64> = (0..20).map(|i| 10.0 + 0.1 * (i % 5) as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 1.0 + 0.1 * (i % 7) as f64).collect();
        let r = welch_one_sided(&a, &b);
        assert!(r.p_one_sided < 1e-6, "p = {}", r.p_one_sided);
        let reversed = welch_one_sided(&b, &a);
        assert!(reversed.p_one_sided > 1.0 - 1e-6);
    }

    #[test]
    fn welch_zero_variance_uses_sign_convention() {
        let a = [2.0, 2.0, 2.0];
        let b = [1.0, 1.0, 1.0];
        assert_eq!(welch_one_sided(&a, &b).p_one_sided, 0.0);
        assert_eq!(welch_one_sided(&b, &a).p_one_sided, 1.0);
    }

    #[test]
    fn page_hinkley_ignores_rising_and_flags_falling() {
        let rising: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        assert!(!page_hinkley_decrease(&rising, 0.05, 2.0));

        let mut falling: Vec<f64> = (0..25).map(|_| 10.0).collect();
        falling.extend((0..25).map(|_| 2.0));
        assert!(page_hinkley_decrease(&falling, 0.05, 2.0));
    }

    #[test]
    fn page_hinkley_tolerates_noise_around_a_level() {
        let noisy: Vec<f64> = (0..60)
            .map(|i| 5.0 + if i % 2 == 0 { 0.3 } else { -0.3 })
            .collect();
        assert!(!page_hinkley_decrease(&noisy, 0.1, 3.0));
    }
}

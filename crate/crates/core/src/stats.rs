//! Summary statistics for ablation curves.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean and standard error of the mean. Values are summed in sorted order so
/// the result does not depend on input order.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p: f64,
}

/// Welch's unequal-variance t-test, one-sided alternative `mean(a) > mean(b)`.
pub fn welch_t_test_greater(a: &[f64], b: &[f64]) -> Option<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, sa) = mean_and_se(a);
    let (mb, sb) = mean_and_se(b);
    let (va, vb) = (sa * sa, sb * sb);
    let se = (va + vb).sqrt();
    if !(se > 0.0) {
        return None;
    }
    let t = (ma - mb) / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(TTest { t, df, p: dist.sf(t) })
}

//! Small statistics helpers shared by tests and reports.

use crate::rng::CounterRng;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Pearson correlation; `None` when either side is degenerate.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx).powi(2);
        dy += (y - my).powi(2);
    }
    if dx <= 0.0 || dy <= 0.0 {
        return None;
    }
    Some(num / (dx * dy).sqrt())
}

/// Cohen's d effect size for a difference in group means (pooled std).
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled <= 0.0 {
        return 0.0;
    }
    (mean(a) - mean(b)) / pooled
}

/// Two-sample two-tailed permutation test on the difference in means.
/// Returns the add-one-smoothed p-value; deterministic given the seed.
pub fn permutation_mean_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty group");
    let observed = (mean(a) - mean(b)).abs();
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    let rng = CounterRng::new(seed);
    let mut counter = 0u64;
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        for k in (1..pool.len()).rev() {
            let j = rng.index_at(counter, k + 1);
            counter += 1;
            pool.swap(k, j);
        }
        let pa = mean(&pool[..a.len()]);
        let pb = mean(&pool[a.len()..]);
        if (pa - pb).abs() >= observed {
            extreme += 1;
        }
    }
    (extreme + 1) as f64 / (n_perm + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_perfect_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson_r(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_is_none() {
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn permutation_test_separated_groups() {
        let a: Vec<f64> = (0..40).map(|i| 10.0 + (i % 5) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..40).map(|i| 0.0 + (i % 5) as f64 * 0.01).collect();
        let p = permutation_mean_test(&a, &b, 999, 1);
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn permutation_test_identical_groups() {
        let a: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let p = permutation_mean_test(&a, &a, 499, 2);
        assert!(p > 0.5, "p = {p}");
    }

    #[test]
    fn cohens_d_sign_and_scale() {
        let a = [1.0, 1.1, 0.9, 1.0];
        let b = [0.0, 0.1, -0.1, 0.0];
        assert!(cohens_d(&a, &b) > 5.0);
        assert!(cohens_d(&b, &a) < -5.0);
    }
}

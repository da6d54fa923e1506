//! Small statistical helpers shared by the probes.
//!
//! All reductions run sequentially in index order so results do not depend
//! on how the samples were produced.

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn standard_error(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.sd / (self.n as f64).sqrt()
    }

    pub fn ci95(&self) -> f64 {
        Z95 * self.standard_error()
    }
}

/// Mean and sample standard deviation by a two-pass sum.
pub fn mean_estimate(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    if n == 0 {
        return MeanEstimate {
            mean: f64::NAN,
            sd: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanEstimate { mean, sd, n }
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    least_squares_fit(xs, ys).map(|(slope, _)| slope)
}

/// `(slope, intercept)` of the least-squares line.
pub fn least_squares_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Inverse-CDF quantile of already sorted data: the smallest order statistic
/// whose empirical CDF reaches `level`. Level 0 gives the minimum.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    sorted[quantile_index(sorted.len(), level)]
}

fn quantile_index(n: usize, level: f64) -> usize {
    let level = level.clamp(0.0, 1.0);
    let k = (level * n as f64).ceil() as usize;
    k.saturating_sub(1).min(n - 1)
}

/// Quantile with a distribution-free 95% interval from binomial order
/// statistics. Returns `(estimate, lower, upper)`.
pub fn quantile_with_ci(sorted: &[f64], level: f64) -> (f64, f64, f64) {
    let n = sorted.len();
    let est = quantile_sorted(sorted, level);
    let center = level * n as f64;
    let half = Z95 * (n as f64 * level * (1.0 - level)).sqrt();
    let lo_idx = ((center - half).floor().max(1.0) as usize).min(n) - 1;
    let hi_idx = ((center + half).ceil().max(1.0) as usize).min(n) - 1;
    (est, sorted[lo_idx].min(est), sorted[hi_idx].max(est))
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let a = sorted_copy(a);
    let b = sorted_copy(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Half-width of the 95% normal-approximation interval for a proportion.
pub fn proportion_ci95(successes: usize, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let p = successes as f64 / n as f64;
    Z95 * (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_and_sd() {
        let e = mean_estimate(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slope_of_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let (s, c) = least_squares_fit(&xs, &ys).unwrap();
        assert!((s + 0.5).abs() < 1e-15 && (c - 2.0).abs() < 1e-15);
        assert!(least_squares_slope(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn quantile_boundaries() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.51), 3.0);
    }

    #[test]
    fn ks_known_values() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        // F_a jumps to 1/2 at 1 while F_b is still 0.
        assert_eq!(ks_statistic(&[1.0, 3.0], &[2.0, 4.0]), 0.5);
    }

    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn ks_matches_brute_force(
            a in prop::collection::vec(-5i32..5, 1..30),
            b in prop::collection::vec(-5i32..5, 1..30),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!((ks_statistic(&a, &b) - brute_ks(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn quantile_ci_brackets_estimate(
            xs in prop::collection::vec(-100.0f64..100.0, 1..200),
            level in 0.0f64..1.0,
        ) {
            let s = sorted_copy(&xs);
            let (e, lo, hi) = quantile_with_ci(&s, level);
            prop_assert!(lo <= e && e <= hi);
        }
    }
}

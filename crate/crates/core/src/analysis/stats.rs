//! Correlation statistics and percentile bootstrap.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::decode_rng;

fn check_lengths(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < min {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least {min} points, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Product-moment correlation and its two-sided p-value under a
/// Student-t with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_lengths(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok((r, p))
}

/// Kendall's tau-b by direct pair counting.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y, 2)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i]
                .partial_cmp(&x[j])
                .ok_or_else(|| Error::UndefinedCorrelation("NaN input".into()))?;
            let dy = y[i]
                .partial_cmp(&y[j])
                .ok_or_else(|| Error::UndefinedCorrelation("NaN input".into()))?;
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("all values tied".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y, 3)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y))?.0)
}

/// Mean with a 95% percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl MeanCi {
    pub fn overlaps(&self, other: &MeanCi) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("bootstrap over an empty sample".into()));
    }
    let m = mean(values);
    if values.len() == 1 || resamples == 0 {
        return Ok(MeanCi {
            mean: m,
            low: m,
            high: m,
        });
    }
    let mut rng = decode_rng(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(MeanCi {
        mean: m,
        low: at(0.025),
        high: at(0.975),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pearson_spot_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap().0 - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap().0 + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap().0 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_p_value() {
        // r = 0.8, n = 4: t = 0.8 * sqrt(2 / 0.36) = 1.8856, two-sided p with 2 df = 0.2.
        let (_, p) = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((p - 0.2).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn pearson_zero_variance() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn kendall_spot_values() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((t - 4.0 / 24f64.sqrt()).abs() < 1e-15);
        let t = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((t - 0.8).abs() < 1e-15);
        assert!(kendall_tau_b(&[1.0, 2.0], &[4.0, 4.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn bootstrap_single_point_collapses() {
        let ci = bootstrap_mean_ci(&[0.3], 10_000, 1).unwrap();
        assert_eq!((ci.low, ci.mean, ci.high), (0.3, 0.3, 0.3));
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let v: Vec<f64> = (0..100).map(|i| (i % 10) as f64 / 10.0).collect();
        let ci = bootstrap_mean_ci(&v, 2000, 3).unwrap();
        assert!(ci.low < ci.mean && ci.mean < ci.high);
        assert_eq!(ci, bootstrap_mean_ci(&v, 2000, 3).unwrap());
    }

    proptest! {
        #[test]
        fn correlations_are_bounded_and_symmetric(
            pairs in proptest::collection::vec((-5i32..5, -5i32..5), 3..30)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            if let Ok(t) = kendall_tau_b(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&t));
                prop_assert_eq!(t, kendall_tau_b(&y, &x).unwrap());
            }
            if let Ok((r, p)) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((r - pearson(&y, &x).unwrap().0).abs() < 1e-12);
            }
        }
    }
}

//! Small statistical helpers shared by the partition audits and analyses.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and sample (n - 1) standard deviation; the std is 0 for one value.
pub fn mean_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Kolmogorov distribution tail `Q(λ) = 2 Σ (-1)^{k-1} exp(-2 k² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test. Returns `(D, asymptotic p-value)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty(), "ks_two_sample needs non-empty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    (d, kolmogorov_q((sq + 0.12 + 0.11 / sq) * d))
}

/// Pearson χ² test of homogeneity on a rows × columns contingency table.
/// Columns with zero total are dropped. Returns `(statistic, p-value)`.
pub fn chi_square_homogeneity(table: &[Vec<usize>]) -> (f64, f64) {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_tot: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum::<usize>() as f64).collect();
    let total: f64 = row_tot.iter().sum();
    let live_cols = col_tot.iter().filter(|&&c| c > 0.0).count();
    let live_rows = row_tot.iter().filter(|&&r| r > 0.0).count();
    let mut stat = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let e = row_tot[r] * col_tot[c] / total;
            if e > 0.0 {
                stat += (table[r][c] as f64 - e).powi(2) / e;
            }
        }
    }
    let dof = (live_rows.saturating_sub(1) * live_cols.saturating_sub(1)) as f64;
    if dof == 0.0 {
        return (stat, 1.0);
    }
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

/// Plug-in mutual information (nats) between two discrete label sequences.
pub fn mutual_information(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let nx = x.iter().max().map_or(0, |m| m + 1);
    let ny = y.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0.0; nx * ny];
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * ny + b] += 1.0;
        px[a] += 1.0;
        py[b] += 1.0;
    }
    let mut mi = 0.0;
    for a in 0..nx {
        for b in 0..ny {
            let j = joint[a * ny + b];
            if j > 0.0 {
                mi += j / n * (j * n / (px[a] * py[b])).ln();
            }
        }
    }
    mi
}

/// Sample skewness `m3 / m2^{3/2}` with population moments; 0 for a
/// degenerate sample.
pub fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn test_compensated_sum_recovers_lost_bits() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn test_ks_same_and_shifted_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.2).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
        let (d, _) = ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn test_chi_square_cases() {
        let same = vec![vec![50, 50, 100], vec![25, 25, 50]];
        let (stat, p) = chi_square_homogeneity(&same);
        assert!(stat.abs() < 1e-12 && (p - 1.0).abs() < 1e-12);
        let diff = vec![vec![100, 0], vec![0, 100]];
        assert!(chi_square_homogeneity(&diff).1 < 1e-10);
    }

    #[test]
    fn test_mutual_information_bounds() {
        let x = [0, 1, 0, 1, 0, 1];
        assert!((mutual_information(&x, &x) - 2f64.ln()).abs() < 1e-12);
        assert!(mutual_information(&x, &[0, 0, 1, 1, 2, 2]).abs() < 1e-12);
    }

    #[test]
    fn test_skewness_sign() {
        assert_eq!(skewness(&[1.0, 1.0, 1.0]), 0.0);
        assert!(skewness(&[0.0, 0.0, 0.0, 0.0, 10.0]) > 0.0);
        assert!((skewness(&[1.0, 2.0, 3.0])).abs() < 1e-15);
    }
}

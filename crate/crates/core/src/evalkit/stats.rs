use crate::{Error, Result};

/// Two-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.5758;

/// Wilson score interval for `k` successes in `n` trials, without continuity
/// correction.
pub fn wilson_ci(k: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "wilson interval needs at least one trial".into(),
        ));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("{k} successes out of {n} trials")));
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    // Rounding can push the bounds a hair past p at the extremes.
    Ok(((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0)))
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0. Needs at least two distinct labels.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::InvalidArgument("silhouette needs one label per point".into()));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; clusters.len()];
        let mut counts = vec![0usize; clusters.len()];
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let c = clusters.binary_search(&labels[j]).expect("label is present");
            sums[c] += dist(p, q);
            counts[c] += 1;
        }
        let own = clusters.binary_search(&labels[i]).expect("label is present");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        total += s;
    }
    Ok(total / points.len() as f64)
}

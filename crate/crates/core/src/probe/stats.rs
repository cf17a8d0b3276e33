//! Small robust statistics used by the probes.

/// Median of `values` (upper median for even lengths). `None` if empty.
pub fn median(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    Some(*v.select_nth_unstable(mid).1)
}

/// Median and a robust sigma estimate, floored at `floor`.
///
/// `1.4826 * MAD` alone is too coarse on integer latencies (a MAD of 1
/// covers sigmas from about 1 to 2), so the estimate is raised to the
/// root-mean-square deviation from the median of the samples within six MAD-sigmas of the median.
/// Far outliers still carry no weight.
pub fn robust_center_scale(values: &[u64], floor: f64) -> Option<(f64, f64)> {
    let m = median(values)?;
    let dev: Vec<u64> = values.iter().map(|&v| v.abs_diff(m)).collect();
    let mad = median(&dev)? as f64;
    let s0 = (1.4826 * mad).max(floor);
    let window = 6.0 * s0;
    let (mut n, mut sq) = (0usize, 0.0);
    for d in dev.iter().map(|&d| d as f64).filter(|&d| d <= window) {
        n += 1;
        sq += d * d;
    }
    let sd = if n > 1 { (sq / (n - 1) as f64).sqrt() } else { 0.0 };
    Some((m as f64, s0.max(sd)))
}

/// Result of the optimal 1-D two-cluster split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoMeans {
    pub low_center: f64,
    pub high_center: f64,
    pub low_count: usize,
    pub high_count: usize,
    /// Pooled within-cluster standard deviation.
    pub within_sd: f64,
}

impl TwoMeans {
    pub fn threshold(&self) -> f64 {
        (self.low_center + self.high_center) / 2.0
    }
}

/// Exact least-squares two-means on the real line: the best split point is
/// between two adjacent distinct values, so every such split is scored.
/// `None` with fewer than two distinct values.
pub fn two_means(values: &[u64]) -> Option<TwoMeans> {
    let mut v = values.to_vec();
    v.sort_unstable();
    let mut uniq: Vec<(f64, f64)> = Vec::new();
    for x in v {
        match uniq.last_mut() {
            Some((val, n)) if *val == x as f64 => *n += 1.0,
            _ => uniq.push((x as f64, 1.0)),
        }
    }
    if uniq.len() < 2 {
        return None;
    }
    let total_n: f64 = uniq.iter().map(|u| u.1).sum();
    let total_s: f64 = uniq.iter().map(|u| u.0 * u.1).sum();
    let total_q: f64 = uniq.iter().map(|u| u.0 * u.0 * u.1).sum();
    let (mut n1, mut s1) = (0.0, 0.0);
    let mut best: Option<(f64, usize)> = None;
    for (i, &(val, n)) in uniq[..uniq.len() - 1].iter().enumerate() {
        n1 += n;
        s1 += val * n;
        let (n2, s2) = (total_n - n1, total_s - s1);
        // Maximising between-cluster sum of squares minimises the within SSE.
        let between = s1 * s1 / n1 + s2 * s2 / n2;
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, i));
        }
    }
    let (between, split) = best?;
    let low_n: f64 = uniq[..=split].iter().map(|u| u.1).sum();
    let low_s: f64 = uniq[..=split].iter().map(|u| u.0 * u.1).sum();
    let high_n = total_n - low_n;
    let high_s = total_s - low_s;
    let sse = (total_q - between).max(0.0);
    Some(TwoMeans {
        low_center: low_s / low_n,
        high_center: high_s / high_n,
        low_count: low_n as usize,
        high_count: high_n as usize,
        within_sd: (sse / total_n).sqrt(),
    })
}

/// Wilson score interval for a binomial proportion at `z` standard errors.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

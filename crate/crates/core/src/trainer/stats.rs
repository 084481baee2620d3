use statrs::distribution::{ContinuousCDF, StudentsT};

/// One-sided paired t-test of `H₁: mean(live − base) < 0` at level `significance`.
pub fn paired_t_test(live: &[f64], base: &[f64], significance: f64) -> bool {
    let n = live.len().min(base.len());
    if n < 2 {
        return false;
    }
    let diffs: Vec<f64> = live.iter().zip(base).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return mean < 0.0;
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    dist.cdf(t) < significance
}

/// Nearest-rank percentile, `q` in `[0, 1]`; `None` for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

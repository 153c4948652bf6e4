//! Order statistics shared by calibration, risk and robust normalization.
//!
//! Quantiles use linear interpolation between order statistics (the "type 7"
//! convention), so `quantile(x, 0.5)` is the usual median.

/// Sorted copy with NaNs rejected by the caller's contract (all inputs here are finite).
fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Type-7 quantile of an already sorted slice. `None` for an empty slice.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let level = level.clamp(0.0, 1.0);
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn quantile(values: &[f64], level: f64) -> Option<f64> {
    quantile_sorted(&sorted(values), level)
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Median absolute deviation about `center` (unscaled).
pub fn mad(values: &[f64], center: f64) -> Option<f64> {
    let dev: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median(&dev)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

/// Type-7 quantile of a sample made of `zeros` zero values plus the
/// nonnegative `positive_sorted` values (ascending). Avoids materializing
/// long runs of zeros, which dominate tactile recordings.
pub fn quantile_with_zeros(zeros: usize, positive_sorted: &[f64], level: f64) -> Option<f64> {
    let n = zeros + positive_sorted.len();
    if n == 0 {
        return None;
    }
    let at = |k: usize| {
        if k < zeros {
            0.0
        } else {
            positive_sorted[k - zeros]
        }
    };
    let level = level.clamp(0.0, 1.0);
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    Some(at(lo) + frac * (at(hi) - at(lo)))
}

//! Trajectory statistics.

/// Sign alternations among consecutive nonzero actions within the last five
/// steps of a fixation. Zero actions are skipped, not counted as breaks, so
/// the metric measures direction reversals of the commands actually issued.
pub fn oscillation_metric(actions: &[i32]) -> u32 {
    assert!(actions.len() >= 5, "need a full fixation tail");
    let tail = &actions[actions.len() - 5..];
    let mut count = 0u32;
    let mut prev: Option<i32> = None;
    for &a in tail {
        if a == 0 {
            continue;
        }
        if let Some(p) = prev {
            if (p > 0) != (a > 0) {
                count += 1;
            }
        }
        prev = Some(a);
    }
    count
}

/// Median of |values|; the mean of the two central order statistics for
/// even counts.
pub fn median_abs(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite metric value"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fraction of fixations whose final |residual| is at most one pixel.
pub fn convergence_rate(final_residuals: &[f64]) -> f64 {
    assert!(!final_residuals.is_empty());
    let hits = final_residuals.iter().filter(|r| r.abs() <= 1.0 + 1e-9).count();
    hits as f64 / final_residuals.len() as f64
}

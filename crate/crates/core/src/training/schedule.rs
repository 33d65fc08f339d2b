use super::Convergence;

/// Learning rate after `step_in_stage` batches of the current stage: a
/// linear ramp from `base_lr / 1000` to `base_lr` over `warmup_batches`.
pub fn warmup_lr(step_in_stage: usize, base_lr: f64, warmup_batches: usize) -> f64 {
    let start = base_lr / 1000.0;
    if warmup_batches == 0 || step_in_stage >= warmup_batches {
        return base_lr;
    }
    start + (base_lr - start) * step_in_stage as f64 / warmup_batches as f64
}

/// Whether the current stage has converged, given the mean total loss of
/// each of its epochs.
///
/// The window is the last `patience_epochs` epochs. The stage has converged
/// when the best loss in the window improves on the window's first epoch by
/// less than `min_rel_improvement` per epoch on average.
pub fn advance_stage(history: &[f64], c: &Convergence) -> bool {
    if history.len() >= c.max_epochs_per_stage {
        return true;
    }
    let p = c.patience_epochs.max(1);
    if history.len() < p {
        return false;
    }
    let window = &history[history.len() - p..];
    let first = window[0];
    let best = window.iter().copied().fold(f64::INFINITY, f64::min);
    if p == 1 {
        return true;
    }
    let rel = (first - best) / first.abs().max(f64::MIN_POSITIVE);
    rel / ((p - 1) as f64) < c.min_rel_improvement
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_midpoint() {
        assert!((warmup_lr(0, 1e-4, 1000) - 1e-7).abs() < 1e-20);
        assert_eq!(warmup_lr(1000, 1e-4, 1000), 1e-4);
        assert_eq!(warmup_lr(5000, 1e-4, 1000), 1e-4);
        // Independent linear interpolation between the endpoints.
        let mid = 1e-7 + 0.5 * (1e-4 - 1e-7);
        assert!((warmup_lr(500, 1e-4, 1000) - mid).abs() < 1e-18);
        assert!((mid - 5.005e-5).abs() < 1e-18);
        assert_eq!(warmup_lr(0, 1e-4, 0), 1e-4);
    }

    #[test]
    fn convergence_rule() {
        let c = Convergence::default();
        let decreasing: Vec<f64> = (0..20).map(|i| 0.9f64.powi(i)).collect();
        for n in 1..=decreasing.len() {
            assert!(!advance_stage(&decreasing[..n], &c));
        }
        assert!(advance_stage(&[0.5; 5], &c));
        assert!(!advance_stage(&[0.5; 4], &c));
        let slow = [1.0, 0.99, 0.989, 0.9889, 0.98889, 0.988889];
        assert!(!advance_stage(&slow[..5], &c));
        assert!(advance_stage(&slow, &c));
        let capped = vec![1.0; 3];
        assert!(advance_stage(&capped, &Convergence { max_epochs_per_stage: 3, patience_epochs: 10, ..c }));
    }
}

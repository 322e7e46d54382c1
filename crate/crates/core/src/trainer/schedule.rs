/// Warmup length in steps: `round(warmup_fraction * total_steps)`, at least one.
pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    ((warmup_fraction * total_steps as f64).round() as u64).clamp(1, total_steps.max(1))
}

/// Linear warmup to `peak_lr` over the first `W` steps, then linear decay to
/// zero at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, peak_lr: f64, warmup_fraction: f64) -> f64 {
    let w = warmup_steps(total_steps, warmup_fraction);
    let step = step.min(total_steps);
    if step <= w {
        peak_lr * step as f64 / w as f64
    } else {
        peak_lr * (total_steps - step) as f64 / (total_steps - w) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(warmup_steps(1000, 0.1), 100);
        assert_eq!(lr_at_step(0, 1000, 1e-3, 0.1), 0.0);
        assert_eq!(lr_at_step(100, 1000, 1e-3, 0.1), 1e-3);
        assert_eq!(lr_at_step(1000, 1000, 1e-3, 0.1), 0.0);
        assert!((lr_at_step(550, 1000, 1e-3, 0.1) - 5e-4).abs() < 1e-15);
        assert!((lr_at_step(50, 1000, 1e-3, 0.1) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn peak_is_the_maximum() {
        let lrs: Vec<f64> = (0..=777).map(|s| lr_at_step(s, 777, 2e-3, 0.1)).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 2e-3);
        assert_eq!(lrs[warmup_steps(777, 0.1) as usize], 2e-3);
        // Continuity: consecutive values never jump by more than one slope step.
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 2e-3 / 78.0 + 1e-15);
        }
    }
}

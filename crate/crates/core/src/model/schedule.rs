use std::f64::consts::PI;

/// Warmup length used when none is configured: 2% of the run, at least one step.
pub fn default_warmup(total_steps: usize) -> usize {
    ((total_steps as f64 * 0.02).round() as usize).max(1).min(total_steps)
}

/// Linear warmup to `peak_lr` at `warmup_steps`, then cosine decay to
/// `peak_lr / 10` at `total_steps`. Steps beyond the end stay at the floor.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup_steps) as f64 / span as f64).min(1.0)
    };
    peak_lr * (0.1 + 0.9 * 0.5 * (1.0 + (PI * progress).cos()))
}

use std::f64::consts::PI;

/// Peak learning rate scaled linearly with the batch size: `base * batch / 256`.
pub fn scaled_peak_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 256.0
}

/// Default warmup length: 1% of the run, at least 10 steps, never the whole run.
pub fn default_warmup(total_steps: usize) -> usize {
    total_steps.div_ceil(100).max(10).min(total_steps.saturating_sub(1))
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine
/// annealing to 0 at `total` steps.
pub fn cosine_lr(step: usize, total: usize, peak: f64, warmup: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64;
    let span = (total - warmup) as f64;
    (0.5 * peak * (1.0 + (PI * t / span).cos())).max(0.0)
}

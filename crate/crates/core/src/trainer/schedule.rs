/// Noam learning rate:
/// `scale · dim^-0.5 · min(step^-0.5, step · warmup^-1.5)`, with `step ≥ 1`.
pub fn noam_lr(step: usize, warmup: usize, scale: f64, model_dim: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    scale * (model_dim as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

/// Temperature ceiling at `step` of a run with `total_steps` updates,
/// moving linearly from `start` (first step) to `end` (last step).
pub fn tau_max_at(step: usize, total_steps: usize, start: f64, end: f64) -> f64 {
    if total_steps <= 1 {
        return start;
    }
    let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    // Blend form so both endpoints come out exact.
    start * (1.0 - progress) + end * progress
}

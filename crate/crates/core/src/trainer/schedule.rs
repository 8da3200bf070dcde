//! Linear warm-up followed by cosine decay, evaluated per optimizer step.

use super::TrainConfig;

/// Learning rate at `step` (0 ..= total_steps).
///
/// Ramps linearly from 0 to `base_lr` over the warm-up, then follows
/// `min_lr + (base_lr - min_lr) * (1 + cos(pi * progress)) / 2`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig, total_steps: u64) -> f64 {
    let warmup = cfg.warmup_for(total_steps);
    let base = cfg.base_lr;
    let min = cfg.min_lr_or_default();
    let step = step.min(total_steps);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let progress = (step - warmup) as f64 / span as f64;
    min + (base - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

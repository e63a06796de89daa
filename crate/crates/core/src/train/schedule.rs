use crate::config::{Schedule, TrainConfig};

/// Learning rate after `step` updates: a linear ramp from 0 to `lr` over the
/// warmup, then linear or cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let steps = cfg.steps.max(1);
    let warmup = cfg.warmup.min(steps);
    let step = step.min(steps);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    if steps == warmup {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / (steps - warmup) as f64;
    let factor = match cfg.schedule {
        Schedule::LinearDecay => 1.0 - progress,
        Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    };
    (cfg.lr * factor).max(0.0)
}

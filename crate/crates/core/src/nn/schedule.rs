use std::f64::consts::PI;

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// `max_lr / START_DIVISOR` is the rate at step 0.
pub const START_DIVISOR: f64 = 25.0;
/// `max_lr / END_DIVISOR` is the rate at the last step.
pub const END_DIVISOR: f64 = 1e4;

/// Step at which the one-cycle schedule peaks.
pub fn peak_step(total_steps: usize) -> usize {
    (WARMUP_FRACTION * total_steps as f64).floor() as usize
}

/// One-cycle learning rate: cosine warmup from `max_lr / 25` to `max_lr` at
/// [`peak_step`], then cosine annealing to `max_lr / 1e4` at the final step.
///
/// Callers guarantee `step < total_steps`.
pub fn one_cycle(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let peak = peak_step(total_steps);
    let start = max_lr / START_DIVISOR;
    let end = max_lr / END_DIVISOR;
    if step < peak {
        let p = step as f64 / peak as f64;
        start + (max_lr - start) * (1.0 - (PI * p).cos()) / 2.0
    } else {
        let span = total_steps - 1 - peak;
        if span == 0 {
            return max_lr;
        }
        let p = (step - peak) as f64 / span as f64;
        end + (max_lr - end) * (1.0 + (PI * p).cos()) / 2.0
    }
}

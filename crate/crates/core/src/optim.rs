//! SGD with momentum and the cosine learning-rate schedule.

use core::f64::consts::PI;

/// `base · ½(1 + cos(π·step/total))`, reaching zero at `step == total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(PI * t))
}

/// Heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[inline]
pub fn momentum_step(param: &mut f64, velocity: &mut f64, grad: f64, lr: f64, momentum: f64) {
    *velocity = momentum * *velocity + grad;
    *param -= lr * *velocity;
}

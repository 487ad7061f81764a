//! Cosine annealing with warm restarts, stepped per epoch.

/// Learning rate at (possibly fractional) epoch `epoch`.
///
/// Restart periods are `t0, t0·t_mult, t0·t_mult², …`; within a period the
/// rate follows `lr_min + ½(lr_max − lr_min)(1 + cos(π·t_cur/t_i))`.
pub fn cosine_restart_lr(epoch: f64, lr_max: f64, lr_min: f64, t0: usize, t_mult: usize) -> f64 {
    let epoch = epoch.max(0.0);
    let mut start = 0.0;
    let mut period = t0.max(1) as f64;
    let mult = t_mult.max(1) as f64;
    while epoch >= start + period {
        start += period;
        period *= mult;
    }
    let t_cur = epoch - start;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / period).cos())
}

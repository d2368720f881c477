/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

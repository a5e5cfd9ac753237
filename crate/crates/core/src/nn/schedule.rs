use super::TrainConfig;

/// Learning rate for a zero-based `epoch`: linear warm-up reaching the base
/// rate at the end of warm-up, then a step decay multiplied in at every
/// decay epoch already reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let mut lr = if epoch < config.warmup_epochs {
        config.base_lr * (epoch + 1) as f64 / config.warmup_epochs as f64
    } else {
        config.base_lr
    };
    for &d in &config.decay_epochs {
        if epoch >= d {
            lr *= config.decay_factor;
        }
    }
    lr
}

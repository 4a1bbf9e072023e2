use crate::config::TrainConfig;

/// Supervised horizon for a 1-based `epoch`: the full `horizon` during
/// warm-up, then 1 step, growing by one every `curriculum_step` epochs.
pub fn curriculum_horizon(epoch: usize, warmup_epochs: usize, curriculum_step: usize, horizon: usize) -> usize {
    if epoch <= warmup_epochs {
        return horizon;
    }
    let step = curriculum_step.max(1);
    horizon.min(1 + (epoch - warmup_epochs - 1) / step)
}

/// Learning rate for a 1-based `epoch`: the base rate times `lr_decay` for
/// every milestone strictly before `epoch`, optionally ramped linearly over
/// the warm-up epochs.
pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m < epoch).count();
    let mut lr = cfg.learning_rate * cfg.lr_decay.powi(passed as i32);
    if cfg.lr_warmup_ramp && cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs {
        lr *= epoch as f64 / cfg.warmup_epochs as f64;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_examples() {
        assert_eq!(curriculum_horizon(5, 20, 3, 12), 12);
        assert_eq!(curriculum_horizon(21, 20, 3, 12), 1);
        assert_eq!(curriculum_horizon(24, 20, 3, 12), 2);
        assert_eq!(curriculum_horizon(20 + 3 * 11 + 1, 20, 3, 12), 12);
        assert_eq!(curriculum_horizon(20 + 3 * 11, 20, 3, 12), 11);
        assert_eq!(curriculum_horizon(500, 20, 3, 12), 12);
        assert_eq!(curriculum_horizon(1, 0, 3, 12), 1);
    }

    #[test]
    fn step_decay_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(1, &cfg), 0.004);
        assert_eq!(learning_rate(50, &cfg), 0.004);
        assert_eq!(learning_rate(60, &cfg), 0.002);
        assert_eq!(learning_rate(100, &cfg), 0.001);
    }

    #[test]
    fn optional_ramp() {
        let cfg = TrainConfig { lr_warmup_ramp: true, warmup_epochs: 4, ..TrainConfig::default() };
        assert_eq!(learning_rate(1, &cfg), 0.001);
        assert_eq!(learning_rate(4, &cfg), 0.004);
        assert_eq!(learning_rate(5, &cfg), 0.004);
    }
}

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;

/// Step-decay learning rate: the base rate is multiplied by `drop_factor`
/// once for every drop point the epoch has reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub drop_factor: f64,
    /// Fractions of `epochs`, strictly increasing in (0, 1).
    pub drops: Vec<f64>,
    pub epochs: usize,
    pub batch: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Schedule {
            base_lr: cfg.lr,
            drop_factor: cfg.drop_factor,
            drops: cfg.drops.clone(),
            epochs: cfg.epochs,
            batch: cfg.batch,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .drops
            .iter()
            .filter(|&&f| epoch as f64 >= f * self.epochs as f64)
            .count();
        self.base_lr * self.drop_factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(epochs: usize) -> Schedule {
        Schedule::from_config(&TrainConfig {
            epochs,
            ..TrainConfig::default()
        })
    }

    #[test]
    fn eighty_epoch_examples() {
        let s = sched(80);
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(24), 1e-3);
        assert!((s.lr_at(25) - 2e-4).abs() < 1e-18);
        assert!((s.lr_at(30) - 2e-4).abs() < 1e-18);
        assert!((s.lr_at(60) - 1.6e-6).abs() < 1e-18);
        assert!((s.lr_at(79) - 1.6e-6).abs() < 1e-18);
    }

    #[test]
    fn never_increases() {
        for epochs in [1, 7, 25, 80] {
            let s = sched(epochs);
            let lrs: Vec<f64> = (0..epochs).map(|e| s.lr_at(e)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}

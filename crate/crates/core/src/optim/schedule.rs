use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch learning rate: linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default)]
    pub min_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(
                "learning rates must satisfy 0 ≤ min_lr ≤ base_lr, base_lr > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for 0-indexed `epoch`.
    ///
    /// `epoch == total_epochs` is accepted and names the end point of the
    /// schedule, where the cosine reaches `min_lr`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * ((epoch + 1) as f64 / self.warmup_epochs as f64));
        }
        let progress =
            (epoch - self.warmup_epochs) as f64 / (self.total_epochs - self.warmup_epochs) as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_length() -> Schedule {
        Schedule {
            base_lr: 0.001,
            warmup_epochs: 20,
            total_epochs: 1000,
            min_lr: 0.0,
        }
    }

    #[test]
    fn warmup_values() {
        let s = full_length();
        assert_eq!(s.lr_at(19).unwrap(), 0.001);
        assert!((s.lr_at(0).unwrap() - 0.001 / 20.0).abs() < 1e-19);
        assert_eq!(s.lr_at(510).unwrap(), 0.0005);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = full_length();
        let jump = (s.lr_at(19).unwrap() - s.lr_at(20).unwrap()).abs();
        assert!(jump <= s.base_lr / 20.0);
        assert!(s.lr_at(999).unwrap() >= s.min_lr);
    }

    #[test]
    fn no_warmup() {
        let s = Schedule {
            base_lr: 0.1,
            warmup_epochs: 0,
            total_epochs: 10,
            min_lr: 0.01,
        };
        assert_eq!(s.lr_at(0).unwrap(), 0.1);
        assert!(s.lr_at(9).unwrap() > 0.01);
        assert!(Schedule { warmup_epochs: 10, ..s }.validate().is_err());
    }
}

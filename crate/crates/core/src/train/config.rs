use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Epochs at which the step schedule divides the rate by ten.
pub const CIFAR_MILESTONES: [usize; 3] = [200, 300, 350];
pub const IMAGENET_DECAY: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    CifarStep,
    ImagenetExp,
    Constant,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::CifarStep => "cifar_step",
            Schedule::ImagenetExp => "imagenet_exp",
            Schedule::Constant => "constant",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar_step" => Ok(Schedule::CifarStep),
            "imagenet_exp" => Ok(Schedule::ImagenetExp),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Training(format!(
                "unknown schedule `{s}` (expected cifar_step, imagenet_exp or constant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub seed: u64,
    /// Pad-and-crop plus horizontal flip.
    pub augment: bool,
    /// Shuffle sample order every epoch.
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn cifar() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::CifarStep,
            base_lr: 0.1,
            total_epochs: 400,
            seed: 0,
            augment: true,
            shuffle: true,
        }
    }

    pub fn imagenet() -> Self {
        TrainConfig {
            batch_size: 96,
            momentum: 0.9,
            weight_decay: 4e-5,
            schedule: Schedule::ImagenetExp,
            base_lr: 0.045,
            total_epochs: 400,
            seed: 0,
            augment: true,
            shuffle: true,
        }
    }

    pub fn constant(lr: f64) -> Self {
        TrainConfig {
            schedule: Schedule::Constant,
            base_lr: lr,
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Training("batch_size must be at least 2 (batch norm needs a batch)".into()));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("base_lr", self.base_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Training(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Learning rate during `epoch` (0-based).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::CifarStep => {
            let drops = CIFAR_MILESTONES.iter().filter(|&&m| epoch >= m).count();
            cfg.base_lr / 10f64.powi(drops as i32)
        }
        Schedule::ImagenetExp => cfg.base_lr * IMAGENET_DECAY.powi(epoch as i32),
        Schedule::Constant => cfg.base_lr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = TrainConfig::cifar();
        assert_eq!(lr_at(&c, 0), 0.1);
        assert_eq!(lr_at(&c, 199), 0.1);
        assert_eq!(lr_at(&c, 200), 0.01);
        assert_eq!(lr_at(&c, 300), 0.001);
        assert_eq!(lr_at(&c, 350), 0.0001);
    }

    #[test]
    fn exponential_schedule() {
        let c = TrainConfig::imagenet();
        assert_eq!(lr_at(&c, 0), 0.045);
        assert!((lr_at(&c, 1) - 0.0441).abs() < 1e-15);
    }

    #[test]
    fn parse_and_validate() {
        assert_eq!("constant".parse::<Schedule>().unwrap(), Schedule::Constant);
        assert!("cosine".parse::<Schedule>().is_err());
        let mut c = TrainConfig::constant(0.05);
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}

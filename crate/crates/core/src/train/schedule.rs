use std::fmt;
use std::str::FromStr;

use super::loss::LossKind;
use crate::error::{Error, Result};

/// Learning rate for generator iteration `iter`: constant, then a linear
/// ramp to zero over the final `decay_last` iterations.
pub fn lr_at(iter: u64, total: u64, decay_last: u64, base_lr: f64) -> f64 {
    let window = decay_last.min(total);
    let start = total - window;
    if iter <= start || window == 0 {
        return base_lr;
    }
    base_lr * (total.saturating_sub(iter)) as f64 / window as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// lr 2e-4 for both nets, five D updates per G update, batches 64/128,
    /// SN on D only.
    Cifar,
    /// Two-time-scale rule: lr 1e-4 / 4e-4, 1:1 updates, batch 32, SN on
    /// both nets.
    Ttur,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Cifar => "cifar",
            Preset::Ttur => "ttur",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar" => Ok(Preset::Cifar),
            "ttur" => Ok(Preset::Ttur),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected cifar or ttur)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_dis: usize,
    pub batch_d: usize,
    pub batch_g: usize,
    pub total_iters: u64,
    pub decay_last: u64,
    pub sn_g: bool,
    pub sn_d: bool,
}

impl TrainConfig {
    pub const DECAY_LAST: u64 = 50_000;

    pub fn preset(preset: Preset) -> Self {
        let common = Self {
            loss: LossKind::Hinge,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            n_dis: 5,
            batch_d: 64,
            batch_g: 128,
            total_iters: 50_000,
            decay_last: Self::DECAY_LAST,
            sn_g: false,
            sn_d: true,
        };
        match preset {
            Preset::Cifar => common,
            Preset::Ttur => Self {
                lr_g: 1e-4,
                lr_d: 4e-4,
                n_dis: 1,
                batch_d: 32,
                batch_g: 32,
                total_iters: 300_000,
                sn_g: true,
                ..common
            },
        }
    }

    /// Shortens the run to `total` iterations, shrinking the decay window by
    /// the same factor.
    pub fn scaled_to(&self, total: u64) -> Self {
        let decay = (self.decay_last as u128 * total as u128 + self.total_iters as u128 / 2)
            / self.total_iters.max(1) as u128;
        Self {
            total_iters: total,
            decay_last: (decay as u64).min(total),
            ..self.clone()
        }
    }

    pub fn lr_g_at(&self, iter: u64) -> f64 {
        lr_at(iter, self.total_iters, self.decay_last, self.lr_g)
    }

    pub fn lr_d_at(&self, iter: u64) -> f64 {
        lr_at(iter, self.total_iters, self.decay_last, self.lr_d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_dis == 0 {
            return bad("n_dis must be at least 1");
        }
        if self.batch_d < 2 || self.batch_g < 2 {
            return bad("batch sizes must be at least 2 for batch statistics");
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

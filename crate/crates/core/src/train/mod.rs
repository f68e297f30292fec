//! Adversarial training: losses, optimizer, schedules, checkpoints.

mod adam;
pub mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState, ADAM_EPS};
pub use loss::LossKind;
pub use schedule::{lr_at, Preset, TrainConfig};
pub use trainer::{Counters, MetricsRow, StepRecord, Trainer, METRICS_HEADER};

#[cfg(test)]
mod tests;

//! Image datasets in `[-1, 1]`, epoch-shuffled batch sampling, and latent
//! noise.

mod cifar;
mod synth;

pub use cifar::{load_cifar10, parse_cifar10, CIFAR_RECORD};
pub use synth::{synth_dataset, SynthKind};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor};

/// Maps a byte to `b / 127.5 − 1`, so 0 → −1 and 255 → +1 exactly.
pub fn normalize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding half away from zero and clamping.
pub fn denormalize(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An in-memory labelled image set, `[3, res, res]` per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    resolution: usize,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        resolution: usize,
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = 3 * resolution * resolution;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} records of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ClassOutOfRange { id: bad, classes });
        }
        Ok(Self {
            resolution,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Pixels of record `idx`, channel-major.
    pub fn image(&self, idx: usize) -> &[f32] {
        let per = 3 * self.resolution * self.resolution;
        &self.pixels[idx * per..(idx + 1) * per]
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    /// Gathers records into `[b, 3, res, res]` plus their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "index {i} out of range for {} records",
                    self.len()
                )));
            }
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new([indices.len(), 3, r, r], data)?, labels))
    }

    /// The first `n` records (or all, if fewer).
    pub fn head<T: Real>(&self, n: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }
}

/// Position of a [`BatchSampler`], enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Draws mini-batches without replacement within an epoch; every epoch is a
/// fresh permutation determined by `(seed, epoch)`. Batches that run past the
/// end of an epoch continue into the next one.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    seed: u64,
    state: SamplerState,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        Self::resume(
            len,
            seed,
            SamplerState {
                epoch: 0,
                cursor: 0,
            },
        )
    }

    pub fn resume(len: usize, seed: u64, state: SamplerState) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        if state.cursor > len {
            return Err(Error::Data(format!(
                "sampler cursor {} beyond {len} records",
                state.cursor
            )));
        }
        Ok(Self {
            len,
            seed,
            state,
            order: permutation(len, seed, state.epoch),
        })
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.state.cursor == self.len {
                self.state.epoch += 1;
                self.state.cursor = 0;
                self.order = permutation(self.len, self.seed, self.state.epoch);
            }
            out.push(self.order[self.state.cursor]);
            self.state.cursor += 1;
        }
        out
    }
}

/// Stream offset separating epoch permutations from other uses of a seed.
const SHUFFLE_STREAM: u64 = 1 << 32;

pub fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = CounterRng::new(seed, SHUFFLE_STREAM + epoch);
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    idx
}

/// `[batch, z_dim]` standard-normal latents.
pub fn sample_latent<T: Real>(batch: usize, z_dim: usize, rng: &mut CounterRng) -> Tensor<T> {
    let mut raw = vec![0.0; batch * z_dim];
    rng.fill_normal(&mut raw);
    Tensor::from_fn([batch, z_dim], |i| T::of(raw[i]))
}

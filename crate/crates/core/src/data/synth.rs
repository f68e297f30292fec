//! Procedural class-conditional image sets for small training runs.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// A soft coloured disc whose position depends on the class.
    Blobs,
    /// A ring whose radius depends on the class.
    Rings,
    /// Sinusoidal stripes whose orientation depends on the class.
    Stripes,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Blobs, SynthKind::Rings, SynthKind::Stripes];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Rings => "rings",
            SynthKind::Stripes => "stripes",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic dataset {s:?}")))
    }
}

/// Fully saturated colour at hue `h ∈ [0, 1)`, channels in `[0, 1]`.
fn hue(h: f64) -> [f64; 3] {
    let x = 6.0 * h.rem_euclid(1.0);
    [
        ((x - 3.0).abs() - 1.0).clamp(0.0, 1.0),
        (2.0 - (x - 2.0).abs()).clamp(0.0, 1.0),
        (2.0 - (x - 4.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Record `i` has label `i % classes`; its jitter comes from a stream keyed by
/// `(seed, i)`, so every record is reproducible on its own.
pub fn synth_dataset(
    kind: SynthKind,
    resolution: usize,
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if ![8, 16, 32].contains(&resolution) {
        return Err(Error::UnsupportedResolution(resolution));
    }
    if classes == 0 {
        return Err(Error::Data(
            "synthetic dataset needs at least one class".into(),
        ));
    }
    let r = resolution as f64;
    let plane = resolution * resolution;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let frac = k as f64 / classes as f64;
        let mut rng = CounterRng::new(seed, i as u64);
        let mut jitter = |scale: f64| rng.uniform_range(-scale, scale);
        let color = hue(frac);
        let c = r / 2.0 - 0.5;
        let intensity: Box<dyn Fn(f64, f64) -> f64> = match kind {
            SynthKind::Blobs => {
                let angle = TAU * frac;
                let cx = c + 0.25 * r * angle.cos() + jitter(0.06 * r);
                let cy = c + 0.25 * r * angle.sin() + jitter(0.06 * r);
                let sigma = 0.16 * r * (1.0 + jitter(0.15));
                Box::new(move |x, y| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
            }
            SynthKind::Rings => {
                let span = (classes.max(2) - 1) as f64;
                let radius = r * (0.12 + 0.28 * k as f64 / span) + jitter(0.03 * r);
                let (cx, cy) = (c + jitter(0.05 * r), c + jitter(0.05 * r));
                let width = 0.07 * r;
                Box::new(move |x, y| {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    (-(d - radius).powi(2) / (2.0 * width * width)).exp()
                })
            }
            SynthKind::Stripes => {
                let theta = PI * frac + jitter(0.05);
                let period = r / 2.5;
                let phase = jitter(PI);
                Box::new(move |x, y| {
                    0.5 * (1.0 + (TAU * (x * theta.cos() + y * theta.sin()) / period + phase).sin())
                })
            }
        };
        for &ch in &color {
            for y in 0..resolution {
                for x in 0..resolution {
                    let v = -1.0 + intensity(x as f64, y as f64) * 2.0 * ch;
                    pixels.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(resolution, classes, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for kind in SynthKind::ALL {
            let a = synth_dataset(kind, 8, 3, 12, 5).unwrap();
            assert_eq!(a, synth_dataset(kind, 8, 3, 12, 5).unwrap());
            assert_ne!(a, synth_dataset(kind, 8, 3, 12, 6).unwrap());
        }
    }

    #[test]
    fn labels_balanced_and_pixels_in_range() {
        let ds = synth_dataset(SynthKind::Rings, 16, 4, 20, 1).unwrap();
        for k in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == k).count(), 5);
        }
        for i in 0..ds.len() {
            assert!(ds.image(i).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn class_means_are_separated() {
        for kind in SynthKind::ALL {
            for res in [8, 16, 32] {
                let k = 4;
                let ds = synth_dataset(kind, res, k, 80, 2).unwrap();
                let per = 3 * res * res;
                let mut means = vec![vec![0.0f64; per]; k];
                for i in 0..ds.len() {
                    for (m, &v) in means[ds.label(i)].iter_mut().zip(ds.image(i)) {
                        *m += v as f64 / (ds.len() / k) as f64;
                    }
                }
                for a in 0..k {
                    for b in a + 1..k {
                        let diff = means[a]
                            .iter()
                            .zip(&means[b])
                            .map(|(x, y)| (x - y).abs())
                            .sum::<f64>()
                            / per as f64;
                        assert!(diff > 0.1, "{kind} {res} classes {a},{b}: {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_inputs() {
        assert!(synth_dataset(SynthKind::Blobs, 64, 2, 4, 0).is_err());
        assert!(synth_dataset(SynthKind::Blobs, 8, 0, 4, 0).is_err());
        assert_eq!(hue(0.0), [1.0, 0.0, 0.0]);
        assert_eq!(hue(1.0 / 3.0), [0.0, 1.0, 0.0]);
        assert_eq!(hue(2.0 / 3.0), [0.0, 0.0, 1.0]);
    }
}

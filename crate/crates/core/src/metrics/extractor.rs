use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::kernels::{self, Padding};
use crate::tensor::Tensor;

use super::ClassPosterior;

/// Fixed, non-trainable map from images `[n, 3, r, r]` to features `[n, d]`,
/// with a linear classifier head for class posteriors.
pub trait FeatureExtractor {
    fn resolution(&self) -> usize;

    fn dim(&self) -> usize;

    fn head(&self) -> &LinearHead;

    fn features(&self, images: &Tensor<f64>) -> Result<Tensor<f64>>;

    fn posteriors(&self, features: &Tensor<f64>) -> Result<ClassPosterior> {
        ClassPosterior::from_logits(&self.head().logits(features)?)
    }
}

/// Affine map `features · W + b` to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LinearHead {
    pub fn random(dim: usize, classes: usize, rng: &mut CounterRng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let weight = Tensor::from_fn([dim, classes], |_| scale * rng.normal());
        Self {
            weight,
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut out = kernels::matmul(features, &self.weight)?;
        let k = self.classes();
        for row in out.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

fn check_images(images: &Tensor<f64>, resolution: usize) -> Result<usize> {
    let (n, c, h, w) = images.dims4("extractor")?;
    if c != 3 || h != resolution || w != resolution {
        return Err(Error::ShapeMismatch {
            op: "extractor",
            lhs: vec![n, 3, resolution, resolution],
            rhs: images.shape().to_vec(),
        });
    }
    Ok(n)
}

/// Per-channel mean, standard deviation, and the four quadrant means of raw
/// pixels: 18 features.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMoments {
    resolution: usize,
    head: LinearHead,
}

impl PixelMoments {
    pub const DIM: usize = 18;

    pub fn new(resolution: usize, classes: usize, seed: u64) -> Result<Self> {
        if resolution < 2 || !resolution.is_multiple_of(2) {
            return Err(Error::UnsupportedResolution(resolution));
        }
        let mut rng = CounterRng::new(seed, 0);
        Ok(Self {
            resolution,
            head: LinearHead::random(Self::DIM, classes, &mut rng),
        })
    }
}

impl FeatureExtractor for PixelMoments {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn head(&self) -> &LinearHead {
        &self.head
    }

    fn features(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = check_images(images, self.resolution)?;
        let r = self.resolution;
        let half = r / 2;
        let mut out = Vec::with_capacity(n * Self::DIM);
        for plane in images.data().chunks(r * r).collect::<Vec<_>>().chunks(3) {
            for p in plane {
                let mean = p.iter().sum::<f64>() / (r * r) as f64;
                let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r * r) as f64;
                out.push(mean);
                out.push(var.sqrt());
                for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let mut s = 0.0;
                    for y in qy * half..(qy + 1) * half {
                        s += p[y * r + qx * half..y * r + (qx + 1) * half]
                            .iter()
                            .sum::<f64>();
                    }
                    out.push(s / (half * half) as f64);
                }
            }
        }
        Tensor::new([n, Self::DIM], out)
    }
}

/// Three 3×3 conv + ReLU stages (16, 32, 64 channels; 2×2 average pooling
/// after the first two) and a global spatial mean: 64 features.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatures {
    resolution: usize,
    convs: Vec<(Tensor<f64>, Tensor<f64>)>,
    head: LinearHead,
}

impl ConvFeatures {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];
    pub const DEFAULT_SEED: u64 = 0x5eed;
    pub const DEFAULT_CLASSES: usize = 10;

    /// He-normal conv weights and zero biases drawn from `seed`.
    pub fn random(resolution: usize, classes: usize, seed: u64) -> Result<Self> {
        if resolution < 4 || !resolution.is_multiple_of(4) {
            return Err(Error::UnsupportedResolution(resolution));
        }
        let mut rng = CounterRng::new(seed, 0);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &c_out in &Self::WIDTHS {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let k = Tensor::from_fn([c_out, c_in, 3, 3], |_| std * rng.normal());
            convs.push((k, Tensor::zeros([c_out])));
            c_in = c_out;
        }
        let head = LinearHead::random(c_in, classes, &mut rng);
        Ok(Self {
            resolution,
            convs,
            head,
        })
    }

    pub fn default_for(resolution: usize) -> Result<Self> {
        Self::random(resolution, Self::DEFAULT_CLASSES, Self::DEFAULT_SEED)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set("kind", "conv_features");
        a.set("resolution", self.resolution);
        for (i, (k, b)) in self.convs.iter().enumerate() {
            a.push(format!("extractor.conv{i}.kernel"), k);
            a.push(format!("extractor.conv{i}.bias"), b);
        }
        a.push("extractor.head.weight", &self.head.weight);
        a.push("extractor.head.bias", &self.head.bias);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.get("kind")? != "conv_features" {
            return Err(Error::Checkpoint("not a conv feature extractor".into()));
        }
        let resolution: usize = a.parse("resolution")?;
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in Self::WIDTHS.iter().enumerate() {
            let k = a.tensor_shaped(&format!("extractor.conv{i}.kernel"), &[c_out, c_in, 3, 3])?;
            let b = a.tensor_shaped(&format!("extractor.conv{i}.bias"), &[c_out])?;
            convs.push((k, b));
            c_in = c_out;
        }
        let weight: Tensor<f64> = a.tensor("extractor.head.weight")?;
        let classes = weight.shape().get(1).copied().unwrap_or(0);
        let head = LinearHead {
            weight: a.tensor_shaped("extractor.head.weight", &[c_in, classes])?,
            bias: a.tensor_shaped("extractor.head.bias", &[classes])?,
        };
        Ok(Self {
            resolution,
            convs,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl FeatureExtractor for ConvFeatures {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn dim(&self) -> usize {
        Self::WIDTHS[2]
    }

    fn head(&self) -> &LinearHead {
        &self.head
    }

    fn features(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = check_images(images, self.resolution)?;
        let mut h = images.clone();
        for (i, (k, b)) in self.convs.iter().enumerate() {
            h = kernels::conv2d(&h, k, Some(b), Padding::Same)?.map(|v| v.max(0.0));
            if i + 1 < self.convs.len() {
                h = kernels::avgpool2x(&h)?;
            }
        }
        let pixels = (h.len() / (n * self.dim())) as f64;
        Ok(kernels::global_sum_pool(&h)?.map(|v| v / pixels))
    }
}

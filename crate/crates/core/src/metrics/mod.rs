//! Fréchet distance and Inception-style score over a pluggable extractor.

mod extractor;

pub use extractor::{ConvFeatures, FeatureExtractor, LinearHead, PixelMoments};

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor};

/// Eigenvalues below `-NEG_EIGEN_TOL` (scaled by the spectrum when it
/// exceeds 1) mark a matrix as indefinite.
pub const NEG_EIGEN_TOL: f64 = 1e-8;
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features: [n, d]`.
pub fn gaussian_stats(features: &Tensor<f64>) -> Result<GaussianStats> {
    let (n, d) = features.dims2("gaussian_stats")?;
    if n < 2 {
        return Err(Error::Stats(format!("need at least 2 samples, got {n}")));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Stats(format!(
            "sqrtm of a non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::Stats("sqrtm of a non-symmetric matrix".into()));
    }
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < -NEG_EIGEN_TOL * top {
            return Err(Error::NotPsd(*l));
        }
        *l = l.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    let mut s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// `‖μp−μq‖² + tr(Cp + Cq − 2·(Cp^½ Cq Cp^½)^½)`.
///
/// The cross term is the sum of singular values of `Cp^½ Cq^½`, whose
/// squares are the eigenvalues of `Cp^½ Cq Cp^½`.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() || p.cov.shape() != q.cov.shape() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: vec![p.dim()],
            rhs: vec![q.dim()],
        });
    }
    let cross = (sqrtm_psd(&p.cov)? * sqrtm_psd(&q.cov)?)
        .singular_values()
        .sum();
    let mean_term = (&p.mean - &q.mean).norm_squared();
    Ok(mean_term + p.cov.trace() + q.cov.trace() - 2.0 * cross)
}

/// Rows of `p(l | x)` over `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    probs: Vec<f64>,
    k: usize,
}

impl ClassPosterior {
    pub const ROW_TOL: f64 = 1e-9;

    pub fn new(probs: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || probs.is_empty() || !probs.len().is_multiple_of(k) {
            return Err(Error::Stats(format!(
                "{} probabilities do not form rows of {k}",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(k).enumerate() {
            if row.iter().any(|p| p.is_nan() || *p < 0.0) {
                return Err(Error::Stats(format!("row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOL {
                return Err(Error::Stats(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { probs, k })
    }

    /// Row-wise softmax of `logits: [n, k]`.
    pub fn from_logits(logits: &Tensor<f64>) -> Result<Self> {
        let (_, k) = logits.dims2("softmax")?;
        let mut probs = logits.data().to_vec();
        for row in probs.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self::new(probs, k)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.k)
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new([self.len(), self.k], self.probs.clone()).expect("shape matches")
    }
}

/// `exp(E_x KL(p(l|x) ‖ p(l)))` with `p(l)` the column mean.
pub fn inception_score(post: &ClassPosterior) -> f64 {
    let n = post.len() as f64;
    let mut marginal = vec![0.0; post.k];
    for row in post.rows() {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n;
        }
    }
    let mut kl = 0.0;
    for row in post.rows() {
        for (p, m) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
    }
    (kl / n).exp()
}

/// Something that yields batches of images in `[-1, 1]`.
pub trait ImageSource {
    fn resolution(&self) -> usize;

    fn sample(&mut self, n: usize, rng: &mut CounterRng) -> Result<Tensor<f64>>;
}

/// Hands out dataset images in order, wrapping around.
pub struct DatasetSource<'a> {
    data: &'a Dataset,
    cursor: usize,
}

impl<'a> DatasetSource<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self { data, cursor: 0 }
    }
}

impl ImageSource for DatasetSource<'_> {
    fn resolution(&self) -> usize {
        self.data.resolution()
    }

    fn sample(&mut self, n: usize, _rng: &mut CounterRng) -> Result<Tensor<f64>> {
        let idx: Vec<usize> = (0..n)
            .map(|i| (self.cursor + i) % self.data.len())
            .collect();
        self.cursor = (self.cursor + n) % self.data.len();
        Ok(self.data.batch(&idx)?.0)
    }
}

/// Samples a generator with standard-normal latents and, when conditional,
/// uniformly drawn labels.
pub struct GeneratorSource<'a, T: Real> {
    pub generator: &'a mut Generator<T>,
    /// Use batch statistics rather than running statistics in BN layers.
    pub train_bn: bool,
}

impl<T: Real> ImageSource for GeneratorSource<'_, T> {
    fn resolution(&self) -> usize {
        self.generator.spec.resolution
    }

    fn sample(&mut self, n: usize, rng: &mut CounterRng) -> Result<Tensor<f64>> {
        let z = crate::data::sample_latent::<T>(n, self.generator.spec.z_dim, rng);
        let labels: Option<Vec<usize>> = self
            .generator
            .spec
            .classes
            .map(|k| (0..n).map(|_| rng.below(k)).collect());
        let x = self
            .generator
            .generate(&z, labels.as_deref(), self.train_bn)?;
        Ok(x.cast())
    }
}

/// Feature matrix `[n, d]` for `n` images drawn from `source` in batches.
pub fn extract(
    source: &mut dyn ImageSource,
    extractor: &dyn FeatureExtractor,
    n: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<Tensor<f64>> {
    if source.resolution() != extractor.resolution() {
        return Err(Error::Stats(format!(
            "extractor expects {0}x{0} images, source produces {1}x{1}",
            extractor.resolution(),
            source.resolution()
        )));
    }
    let batch = batch.max(1);
    let mut rows = Vec::with_capacity(n * extractor.dim());
    let mut done = 0;
    while done < n {
        let b = batch.min(n - done);
        let images = source.sample(b, rng)?;
        rows.extend_from_slice(extractor.features(&images)?.data());
        done += b;
    }
    Tensor::new([n, extractor.dim()], rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub fid: f64,
    pub is: f64,
}

/// Draws `n_samples` images, then scores them against `real` statistics.
pub fn evaluate(
    source: &mut dyn ImageSource,
    extractor: &dyn FeatureExtractor,
    real: &GaussianStats,
    n_samples: usize,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<Scores> {
    let features = extract(source, extractor, n_samples, batch, rng)?;
    let fake = gaussian_stats(&features)?;
    let fid = frechet_distance(real, &fake)?;
    let is = inception_score(&extractor.posteriors(&features)?);
    Ok(Scores { fid, is })
}

/// Statistics of the first `n` dataset images (all of them if `n` is larger).
pub fn reference_stats(
    data: &Dataset,
    extractor: &dyn FeatureExtractor,
    n: usize,
    batch: usize,
) -> Result<GaussianStats> {
    let n = n.min(data.len());
    let mut rng = CounterRng::new(0, 0);
    let features = extract(&mut DatasetSource::new(data), extractor, n, batch, &mut rng)?;
    gaussian_stats(&features)
}

/// Writes a matrix as CSV, one row per line, shortest round-trip formatting.
pub fn write_csv(path: impl AsRef<Path>, m: &Tensor<f64>) -> Result<()> {
    let path = path.as_ref();
    let (_, cols) = m.dims2("write_csv")?;
    let mut out = String::new();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;

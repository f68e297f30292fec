//! Flat `key = value` run configuration.
//!
//! Every key has a default; unknown and repeated keys are errors. Setting
//! `preset` resets all `train.*` keys to that preset before any other
//! `train.*` key is applied, whatever the line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::blocks::{ShortcutKind, ShortcutNorm};
use crate::data::{load_cifar10, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::metrics::{ConvFeatures, FeatureExtractor, PixelMoments};
use crate::model::{DiscriminatorSpec, GeneratorSpec};
use crate::train::{LossKind, Preset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth(SynthKind),
    Cifar10,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Synth(k) => k.as_str(),
            DataSource::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cifar10" {
            return Ok(DataSource::Cifar10);
        }
        s.parse().map(DataSource::Synth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    /// Fixed-seed random CNN, 64 features.
    Conv,
    /// Raw pixel moments, 18 features.
    Moments,
    /// CNN weights read from `eval.extractor_path`.
    File,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::Conv => "conv",
            ExtractorKind::Moments => "moments",
            ExtractorKind::File => "file",
        }
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ExtractorKind::Conv),
            "moments" => Ok(ExtractorKind::Moments),
            "file" => Ok(ExtractorKind::File),
            _ => Err(Error::Config(format!("unknown extractor {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub out_dir: PathBuf,

    pub data_source: DataSource,
    pub data_dir: PathBuf,
    pub resolution: usize,
    pub data_classes: usize,
    pub data_size: usize,
    pub data_seed: u64,
    pub conditional: bool,

    pub shortcut: ShortcutKind,
    pub g_width: usize,
    pub z_dim: usize,
    pub embed_dim: usize,
    pub conditional_bn: bool,
    pub shortcut_norm: ShortcutNorm,
    pub d_width: usize,

    pub train: TrainConfig,

    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval_real: usize,
    pub eval_batch: usize,
    pub eval_train_bn: bool,
    pub extractor: ExtractorKind,
    pub extractor_seed: u64,
    pub extractor_path: PathBuf,

    pub ckpt_every: u64,
    pub sample_every: u64,
    pub sample_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Cifar,
            out_dir: PathBuf::from("runs/default"),
            data_source: DataSource::Synth(SynthKind::Blobs),
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            resolution: 32,
            data_classes: 10,
            data_size: 10_000,
            data_seed: 0,
            conditional: false,
            shortcut: ShortcutKind::Gated,
            g_width: 0,
            z_dim: 128,
            embed_dim: 128,
            conditional_bn: true,
            shortcut_norm: ShortcutNorm::Plain,
            d_width: 0,
            train: TrainConfig::preset(Preset::Cifar),
            eval_every: 5_000,
            eval_samples: 5_000,
            eval_real: 10_000,
            eval_batch: 100,
            eval_train_bn: false,
            extractor: ExtractorKind::Conv,
            extractor_seed: ConvFeatures::DEFAULT_SEED,
            extractor_path: PathBuf::from("extractor.bin"),
            ckpt_every: 10_000,
            sample_every: 5_000,
            sample_grid: 8,
        }
    }
}

/// Keys in emission order with their one-line documentation.
const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for weights, batch order, and latents"),
    (
        "preset",
        "cifar | ttur; resets every train.* key to that preset",
    ),
    (
        "out_dir",
        "directory for metrics.csv, checkpoints, and sample grids",
    ),
    ("data.source", "blobs | rings | stripes | cifar10"),
    ("data.dir", "directory holding data_batch_*.bin for cifar10"),
    ("data.resolution", "image side length"),
    ("data.classes", "classes of a synthetic dataset"),
    ("data.size", "records in a synthetic dataset"),
    ("data.seed", "seed of a synthetic dataset"),
    (
        "model.conditional",
        "class-conditional G (cBN on embeddings) and projection D",
    ),
    (
        "g.shortcut",
        "identity | gated | egs | sog | egsconv | sogconv",
    ),
    (
        "g.width",
        "uniform block width; 0 selects the published layout",
    ),
    ("g.z_dim", "latent dimension"),
    ("g.embed_dim", "class embedding dimension"),
    (
        "g.conditional_bn",
        "predict block BN affine parameters from the latent",
    ),
    (
        "g.shortcut_norm",
        "plain | conditional normalization of the gate input",
    ),
    (
        "d.width",
        "uniform block width; 0 selects the published layout",
    ),
    ("train.loss", "hinge | standard"),
    ("train.lr_g", "generator learning rate"),
    ("train.lr_d", "discriminator learning rate"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.n_dis", "discriminator updates per generator update"),
    ("train.batch_d", "discriminator real (and fake) batch size"),
    ("train.batch_g", "generator batch size"),
    ("train.iters", "generator iterations"),
    (
        "train.decay_last",
        "final iterations over which learning rates fall linearly to 0",
    ),
    ("train.sn_g", "spectral normalization in the generator"),
    ("train.sn_d", "spectral normalization in the discriminator"),
    (
        "eval.every",
        "FID/IS every this many iterations and at 0; 0 disables",
    ),
    ("eval.samples", "generated samples per evaluation"),
    ("eval.real", "real images for the reference statistics"),
    (
        "eval.batch",
        "batch size for sampling and feature extraction",
    ),
    (
        "eval.train_bn",
        "sample with batch statistics instead of running statistics",
    ),
    ("eval.extractor", "conv | moments | file"),
    (
        "eval.extractor_seed",
        "seed of the random extractor and classifier head",
    ),
    ("eval.extractor_path", "weights for eval.extractor = file"),
    (
        "ckpt.every",
        "checkpoint every this many iterations (and at the end); 0 disables",
    ),
    (
        "sample.every",
        "sample grid every this many iterations (and at the end); 0 disables",
    ),
    ("sample.grid", "sample grid side, in images"),
];

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{raw}` for `{key}` (expected true or false)"
        ))),
    }
}

/// Splits config text into `(key, value)` pairs, dropping blank lines and
/// `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Builds from defaults plus `pairs`. Each key may appear once.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            if map.insert(k.as_str(), v.as_str()).is_some() {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
        }
        let mut cfg = Self::default();
        if let Some(p) = map.remove("preset") {
            cfg.set("preset", p)?;
        }
        for (k, _) in KEYS {
            if let Some(v) = map.get(k) {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merges `overrides` over `base` (later pairs win) and builds.
    pub fn with_overrides(
        base: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut merged: Vec<(String, String)> = Vec::new();
        for (k, v) in base.iter().chain(overrides) {
            merged.retain(|(key, _)| key != k);
            merged.push((k.clone(), v.clone()));
        }
        Self::from_pairs(&merged)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, raw)?,
            "preset" => {
                self.preset = raw.parse()?;
                self.train = TrainConfig::preset(self.preset);
            }
            "out_dir" => self.out_dir = PathBuf::from(raw),
            "data.source" => self.data_source = raw.parse()?,
            "data.dir" => self.data_dir = PathBuf::from(raw),
            "data.resolution" => self.resolution = parse(key, raw)?,
            "data.classes" => self.data_classes = parse(key, raw)?,
            "data.size" => self.data_size = parse(key, raw)?,
            "data.seed" => self.data_seed = parse(key, raw)?,
            "model.conditional" => self.conditional = parse_bool(key, raw)?,
            "g.shortcut" => self.shortcut = raw.parse()?,
            "g.width" => self.g_width = parse(key, raw)?,
            "g.z_dim" => self.z_dim = parse(key, raw)?,
            "g.embed_dim" => self.embed_dim = parse(key, raw)?,
            "g.conditional_bn" => self.conditional_bn = parse_bool(key, raw)?,
            "g.shortcut_norm" => self.shortcut_norm = raw.parse()?,
            "d.width" => self.d_width = parse(key, raw)?,
            "train.loss" => t.loss = raw.parse::<LossKind>()?,
            "train.lr_g" => t.lr_g = parse(key, raw)?,
            "train.lr_d" => t.lr_d = parse(key, raw)?,
            "train.beta1" => t.beta1 = parse(key, raw)?,
            "train.beta2" => t.beta2 = parse(key, raw)?,
            "train.n_dis" => t.n_dis = parse(key, raw)?,
            "train.batch_d" => t.batch_d = parse(key, raw)?,
            "train.batch_g" => t.batch_g = parse(key, raw)?,
            "train.iters" => t.total_iters = parse(key, raw)?,
            "train.decay_last" => t.decay_last = parse(key, raw)?,
            "train.sn_g" => t.sn_g = parse_bool(key, raw)?,
            "train.sn_d" => t.sn_d = parse_bool(key, raw)?,
            "eval.every" => self.eval_every = parse(key, raw)?,
            "eval.samples" => self.eval_samples = parse(key, raw)?,
            "eval.real" => self.eval_real = parse(key, raw)?,
            "eval.batch" => self.eval_batch = parse(key, raw)?,
            "eval.train_bn" => self.eval_train_bn = parse_bool(key, raw)?,
            "eval.extractor" => self.extractor = raw.parse()?,
            "eval.extractor_seed" => self.extractor_seed = parse(key, raw)?,
            "eval.extractor_path" => self.extractor_path = PathBuf::from(raw),
            "ckpt.every" => self.ckpt_every = parse(key, raw)?,
            "sample.every" => self.sample_every = parse(key, raw)?,
            "sample.grid" => self.sample_grid = parse(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &PathBuf| p.display().to_string();
        Some(match key {
            "seed" => self.seed.to_string(),
            "preset" => self.preset.to_string(),
            "out_dir" => path(&self.out_dir),
            "data.source" => self.data_source.as_str().to_string(),
            "data.dir" => path(&self.data_dir),
            "data.resolution" => self.resolution.to_string(),
            "data.classes" => self.data_classes.to_string(),
            "data.size" => self.data_size.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "model.conditional" => self.conditional.to_string(),
            "g.shortcut" => self.shortcut.to_string(),
            "g.width" => self.g_width.to_string(),
            "g.z_dim" => self.z_dim.to_string(),
            "g.embed_dim" => self.embed_dim.to_string(),
            "g.conditional_bn" => self.conditional_bn.to_string(),
            "g.shortcut_norm" => self.shortcut_norm.to_string(),
            "d.width" => self.d_width.to_string(),
            "train.loss" => t.loss.to_string(),
            "train.lr_g" => t.lr_g.to_string(),
            "train.lr_d" => t.lr_d.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.n_dis" => t.n_dis.to_string(),
            "train.batch_d" => t.batch_d.to_string(),
            "train.batch_g" => t.batch_g.to_string(),
            "train.iters" => t.total_iters.to_string(),
            "train.decay_last" => t.decay_last.to_string(),
            "train.sn_g" => t.sn_g.to_string(),
            "train.sn_d" => t.sn_d.to_string(),
            "eval.every" => self.eval_every.to_string(),
            "eval.samples" => self.eval_samples.to_string(),
            "eval.real" => self.eval_real.to_string(),
            "eval.batch" => self.eval_batch.to_string(),
            "eval.train_bn" => self.eval_train_bn.to_string(),
            "eval.extractor" => self.extractor.as_str().to_string(),
            "eval.extractor_seed" => self.extractor_seed.to_string(),
            "eval.extractor_path" => path(&self.extractor_path),
            "ckpt.every" => self.ckpt_every.to_string(),
            "sample.every" => self.sample_every.to_string(),
            "sample.grid" => self.sample_grid.to_string(),
            _ => return None,
        })
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        Self::keys()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    /// Every key with its documentation comment.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator_spec()?;
        self.discriminator_spec()?;
        if self.conditional && self.data_classes == 0 {
            return Err(Error::Config("conditional models need classes".into()));
        }
        if self.eval_every > 0 && (self.eval_samples < 2 || self.eval_real < 2) {
            return Err(Error::Config("evaluation needs at least 2 samples".into()));
        }
        if self.sample_grid == 0 {
            return Err(Error::Config("sample.grid must be positive".into()));
        }
        Ok(())
    }

    fn classes(&self) -> Option<usize> {
        self.conditional.then_some(self.data_classes)
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        let mut g = if self.g_width == 0 {
            GeneratorSpec::standard(self.resolution, self.shortcut)?
        } else {
            GeneratorSpec::scaled(self.resolution, self.g_width, self.shortcut)?
        };
        g.z_dim = self.z_dim;
        g.embed_dim = self.embed_dim;
        g.conditional_bn = self.conditional_bn;
        g.shortcut_norm = self.shortcut_norm;
        g.classes = self.classes();
        g.sn = self.train.sn_g;
        g.validate()?;
        Ok(g)
    }

    pub fn discriminator_spec(&self) -> Result<DiscriminatorSpec> {
        let mut d = if self.d_width == 0 {
            DiscriminatorSpec::standard(self.resolution)?
        } else {
            DiscriminatorSpec::scaled(self.resolution, self.d_width)?
        };
        d.classes = self.classes();
        d.sn = self.train.sn_d;
        d.validate()?;
        Ok(d)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match self.data_source {
            DataSource::Synth(kind) => synth_dataset(
                kind,
                self.resolution,
                self.data_classes,
                self.data_size,
                self.data_seed,
            )?,
            DataSource::Cifar10 => load_cifar10(&self.data_dir)?,
        };
        if data.resolution() != self.resolution {
            return Err(Error::UnsupportedResolution(self.resolution));
        }
        if self.conditional && data.classes() != self.data_classes {
            return Err(Error::Config(format!(
                "data.classes = {} but the dataset has {} classes",
                self.data_classes,
                data.classes()
            )));
        }
        Ok(data)
    }

    pub fn load_extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self.extractor {
            ExtractorKind::Conv => Box::new(ConvFeatures::random(
                self.resolution,
                ConvFeatures::DEFAULT_CLASSES,
                self.extractor_seed,
            )?),
            ExtractorKind::Moments => Box::new(PixelMoments::new(
                self.resolution,
                ConvFeatures::DEFAULT_CLASSES,
                self.extractor_seed,
            )?),
            ExtractorKind::File => Box::new(ConvFeatures::load(&self.extractor_path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_parse_emit_is_identical() {
        let text = RunConfig::default().emit();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, RunConfig::default());
        assert_eq!(again.emit(), text);

        let mut custom = RunConfig::default();
        custom.set("preset", "ttur").unwrap();
        custom.set("train.lr_g", "0.00012345").unwrap();
        custom.set("g.shortcut", "sogconv").unwrap();
        custom.set("data.resolution", "16").unwrap();
        custom.set("g.width", "8").unwrap();
        custom.set("d.width", "8").unwrap();
        let text = custom.emit();
        assert_eq!(RunConfig::parse(&text).unwrap().emit(), text);
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.pairs() {
            let mut c = cfg.clone();
            c.set(&k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
        assert_eq!(cfg.pairs().len(), KEYS.len());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let err = RunConfig::parse("lr = 1").unwrap_err();
        assert!(err.to_string().contains("unknown key `lr`"));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("train.sn_g = yes").is_err());
    }

    #[test]
    fn preset_applies_before_train_keys_in_any_order() {
        let a = RunConfig::parse("train.lr_g = 0.5\npreset = ttur").unwrap();
        let b = RunConfig::parse("preset = ttur\ntrain.lr_g = 0.5").unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.lr_g, a.train.lr_d, a.train.n_dis), (0.5, 4e-4, 1));
    }

    #[test]
    fn comments_and_overrides() {
        let base = parse_pairs("# header\nseed = 3   # trailing\n\ng.shortcut = egs\n").unwrap();
        let cfg = RunConfig::with_overrides(&base, &[parse_override("seed=9").unwrap()]).unwrap();
        assert_eq!((cfg.seed, cfg.shortcut), (9, ShortcutKind::Egs));
        assert!(parse_override("seed").is_err());
    }

    #[test]
    fn specs_follow_config() {
        let mut c = RunConfig::parse("data.resolution = 8\ng.width = 4\nd.width = 6\nmodel.conditional = true\ndata.classes = 3\npreset = ttur").unwrap();
        let g = c.generator_spec().unwrap();
        assert_eq!(
            (g.stem, g.widths.clone(), g.classes, g.sn),
            (4, vec![4], Some(3), true)
        );
        let d = c.discriminator_spec().unwrap();
        assert_eq!((d.blocks[0].width, d.classes), (6, Some(3)));
        let data = c.load_dataset().unwrap();
        assert_eq!((data.resolution(), data.classes()), (8, 3));
        assert_eq!(c.load_extractor().unwrap().dim(), 64);
        c.extractor = ExtractorKind::Moments;
        assert_eq!(c.load_extractor().unwrap().dim(), 18);
        assert!(RunConfig::parse("data.resolution = 12").is_err());
    }
}

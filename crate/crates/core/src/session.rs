//! Whole runs driven by a [`RunConfig`]: training with periodic evaluation,
//! checkpoints and sample grids, plus sampling and scoring from checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::archive::Archive;
use crate::config::RunConfig;
use crate::data::{sample_latent, Dataset};
use crate::error::{Error, Result};
use crate::image::write_ppm_grid;
use crate::metrics::{
    evaluate, reference_stats, DatasetSource, FeatureExtractor, GaussianStats, GeneratorSource,
    Scores,
};
use crate::model::{Generator, Model};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::train::{Counters, MetricsRow, Trainer, METRICS_HEADER};

/// Streams for evaluation latents and sample-grid latents; both restart at
/// every use so that scores and grids are comparable across iterations.
const EVAL_STREAM: u64 = 201;
const SAMPLE_STREAM: u64 = 202;

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn checkpoint_path(out: &Path, iter: u64) -> PathBuf {
    out.join(format!("ckpt_{iter}.bin"))
}

pub fn samples_path(out: &Path, iter: u64) -> PathBuf {
    out.join(format!("samples_{iter}.ppm"))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Rows written by this invocation.
    pub rows: Vec<MetricsRow>,
    pub iter: u64,
    pub counters: Counters,
}

struct Evaluator {
    extractor: Box<dyn FeatureExtractor>,
    real: GaussianStats,
}

impl Evaluator {
    fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let extractor = cfg.load_extractor()?;
        let real = reference_stats(data, extractor.as_ref(), cfg.eval_real, cfg.eval_batch)?;
        Ok(Self { extractor, real })
    }

    fn score(&self, cfg: &RunConfig, g: &mut Generator<f32>) -> Result<Scores> {
        let mut rng = CounterRng::new(cfg.seed, EVAL_STREAM);
        let mut source = GeneratorSource {
            generator: g,
            train_bn: cfg.eval_train_bn,
        };
        evaluate(
            &mut source,
            self.extractor.as_ref(),
            &self.real,
            cfg.eval_samples,
            cfg.eval_batch,
            &mut rng,
        )
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Opens `metrics.csv` for appending. A fresh run starts a new file; a
/// resumed run keeps the rows up to `iter` and drops the rest.
fn open_metrics(out: &Path, resume_iter: Option<u64>) -> Result<File> {
    let path = metrics_path(out);
    let mut text = format!("{METRICS_HEADER}\n");
    if let Some(k) = resume_iter {
        if path.exists() {
            let old = io(&path, fs::read_to_string(&path))?;
            for line in old.lines().skip(1) {
                if MetricsRow::parse(line)?.iter <= k {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    io(&path, fs::write(&path, text))?;
    io(&path, OpenOptions::new().append(true).open(&path))
}

/// Config keys stored in checkpoint headers carry this prefix.
const CONFIG_PREFIX: &str = "config.";

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, trainer: &mut Trainer<f32>) -> Result<()> {
    let mut a = trainer.to_archive();
    for (k, v) in cfg.pairs() {
        a.set(&format!("{CONFIG_PREFIX}{k}"), v);
    }
    a.save(path)
}

/// The run configuration stored in a checkpoint.
pub fn checkpoint_config(a: &Archive) -> Result<RunConfig> {
    let pairs: Vec<(String, String)> = a
        .header
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(CONFIG_PREFIX)
                .map(|k| (k.to_string(), v.clone()))
        })
        .collect();
    RunConfig::from_pairs(&pairs)
}

/// Generator weights and buffers from a checkpoint.
pub fn load_generator(a: &Archive) -> Result<(RunConfig, Generator<f32>)> {
    let cfg = checkpoint_config(a)?;
    let mut g = Generator::new(cfg.generator_spec()?, cfg.seed)?;
    for p in g.params.iter_mut() {
        p.value = a.tensor_shaped(&p.name, p.value.shape())?;
    }
    for b in g.buffers() {
        let t: Tensor<f32> = a.tensor_shaped(&b.name, &[b.data.len()])?;
        *b.data = t.into_data();
    }
    Ok((cfg, g))
}

/// Trains per `cfg`, writing `metrics.csv`, `ckpt_<iter>.bin`, and
/// `samples_<iter>.ppm` under `cfg.out_dir`. With `resume`, state is
/// restored from that checkpoint first. `on_row` sees every row written.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    let out = cfg.out_dir.as_path();
    io(out, fs::create_dir_all(out))?;
    let data = cfg.load_dataset()?;
    let mut trainer = Trainer::<f32>::new(
        cfg.train.clone(),
        cfg.generator_spec()?,
        cfg.discriminator_spec()?,
        &data,
        cfg.seed,
    )?;
    if let Some(path) = resume {
        trainer.restore(&Archive::load(path)?, &data)?;
    }
    let resume_iter = resume.map(|_| trainer.iter);
    let mut csv = open_metrics(out, resume_iter)?;
    let evaluator = if cfg.eval_every > 0 {
        Some(Evaluator::new(cfg, &data)?)
    } else {
        None
    };
    let metrics = metrics_path(out);
    let mut rows = Vec::new();
    let mut emit = |row: MetricsRow, csv: &mut File| -> Result<()> {
        io(&metrics, writeln!(csv, "{}", row.to_csv()))?;
        on_row(&row);
        rows.push(row);
        Ok(())
    };

    if let (Some(ev), None) = (&evaluator, resume_iter) {
        let s = ev.score(cfg, &mut trainer.g)?;
        let row = MetricsRow {
            iter: 0,
            fid: Some(s.fid),
            is: Some(s.is),
            ..MetricsRow::default()
        };
        emit(row, &mut csv)?;
    }

    let total = cfg.train.total_iters;
    let due = |every: u64, it: u64| every > 0 && (it.is_multiple_of(every) || it == total);
    while trainer.iter < total {
        let rec = trainer.step(&data)?;
        if !(rec.loss_d.is_finite() && rec.loss_g.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite loss at iteration {}",
                rec.iter
            )));
        }
        let mut row = MetricsRow::from(rec);
        let it = rec.iter;
        if let Some(ev) = &evaluator {
            if due(cfg.eval_every, it) {
                let s = ev.score(cfg, &mut trainer.g)?;
                row.fid = Some(s.fid);
                row.is = Some(s.is);
            }
        }
        emit(row, &mut csv)?;
        if due(cfg.sample_every, it) {
            let images = sample_grid_images(cfg, &mut trainer.g)?;
            write_ppm_grid(samples_path(out, it), &images, cfg.sample_grid)?;
        }
        if due(cfg.ckpt_every, it) {
            save_checkpoint(&checkpoint_path(out, it), cfg, &mut trainer)?;
        }
    }
    Ok(RunSummary {
        rows,
        iter: trainer.iter,
        counters: trainer.counters,
    })
}

fn sample_grid_images(cfg: &RunConfig, g: &mut Generator<f32>) -> Result<Tensor<f64>> {
    let n = cfg.sample_grid * cfg.sample_grid;
    sample(g, n, cfg.seed, cfg.eval_train_bn)
}

/// `n` images from fixed-seed latents; class labels cycle through `0..K`
/// for conditional generators.
pub fn sample(g: &mut Generator<f32>, n: usize, seed: u64, train_bn: bool) -> Result<Tensor<f64>> {
    let mut rng = CounterRng::new(seed, SAMPLE_STREAM);
    let z = sample_latent::<f32>(n, g.spec.z_dim, &mut rng);
    let labels: Option<Vec<usize>> = g.spec.classes.map(|k| (0..n).map(|i| i % k).collect());
    Ok(g.generate(&z, labels.as_deref(), train_bn)?.cast())
}

/// FID/IS of a checkpoint's generator against `cfg`'s dataset.
pub fn eval_checkpoint(cfg: &RunConfig, g: &mut Generator<f32>) -> Result<Scores> {
    let data = cfg.load_dataset()?;
    Evaluator::new(cfg, &data)?.score(cfg, g)
}

/// FID/IS of the dataset against itself, for checking the pipeline.
pub fn eval_pass_through(cfg: &RunConfig) -> Result<Scores> {
    let data = cfg.load_dataset()?;
    let ev = Evaluator::new(cfg, &data)?;
    let mut rng = CounterRng::new(cfg.seed, EVAL_STREAM);
    let n = cfg.eval_real.min(data.len());
    evaluate(
        &mut DatasetSource::new(&data),
        ev.extractor.as_ref(),
        &ev.real,
        n,
        cfg.eval_batch,
        &mut rng,
    )
}

/// `iter,fid,is` for every evaluated row of a metrics file, for plotting.
pub fn eval_curves(metrics_csv: &str) -> Result<String> {
    let mut out = String::from("iter,fid,is\n");
    for line in metrics_csv.lines().skip(1) {
        let row = MetricsRow::parse(line)?;
        if let (Some(fid), Some(is)) = (row.fid, row.is) {
            out.push_str(&format!("{},{fid},{is}\n", row.iter));
        }
    }
    Ok(out)
}

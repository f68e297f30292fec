use super::adam::{adam_step, AdamState};
use super::loss::{d_loss, g_loss};
use super::schedule::TrainConfig;
use crate::archive::Archive;
use crate::data::{sample_latent, BatchSampler, Dataset, SamplerState};
use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Model};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{CounterRng, RngState};
use crate::tensor::{Real, Tape, Tensor};

/// RNG stream for latents and sampled labels during training.
const TRAIN_STREAM: u64 = 103;

pub const METRICS_HEADER: &str = "iter,loss_d,loss_g,lr_g,lr_d,fid,is";

/// Update and batch tallies since iteration 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub d_updates: u64,
    pub g_updates: u64,
    pub real_batches: u64,
    pub fake_batches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Generator updates completed, including this one.
    pub iter: u64,
    /// Mean discriminator loss over the step's D updates.
    pub loss_d: f64,
    pub loss_g: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// One line of `metrics.csv`; blank fields are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_d: Option<f64>,
    pub loss_g: Option<f64>,
    pub lr_g: Option<f64>,
    pub lr_d: Option<f64>,
    pub fid: Option<f64>,
    pub is: Option<f64>,
}

impl From<StepRecord> for MetricsRow {
    fn from(r: StepRecord) -> Self {
        Self {
            iter: r.iter,
            loss_d: Some(r.loss_d),
            loss_g: Some(r.loss_g),
            lr_g: Some(r.lr_g),
            lr_d: Some(r.lr_d),
            fid: None,
            is: None,
        }
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            f(self.loss_d),
            f(self.loss_g),
            f(self.lr_g),
            f(self.lr_d),
            f(self.fid),
            f(self.is)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!("metrics row needs 7 fields: `{line}`")));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::Data(format!("bad number `{s}`")))
        };
        Ok(Self {
            iter: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad iteration `{}`", fields[0])))?,
            loss_d: num(fields[1])?,
            loss_g: num(fields[2])?,
            lr_g: num(fields[3])?,
            lr_d: num(fields[4])?,
            fid: num(fields[5])?,
            is: num(fields[6])?,
        })
    }
}

/// Generator, discriminator, both optimizers, and every piece of state
/// needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub g: Generator<T>,
    pub d: Discriminator<T>,
    pub opt_g: AdamState<T>,
    pub opt_d: AdamState<T>,
    pub iter: u64,
    pub counters: Counters,
    seed: u64,
    sampler: BatchSampler,
    rng: CounterRng,
}

impl<T: Real> Trainer<T> {
    /// Builds both networks from `seed`. SN placement follows `cfg`,
    /// overriding the specs.
    pub fn new(
        cfg: TrainConfig,
        mut g_spec: GeneratorSpec,
        mut d_spec: DiscriminatorSpec,
        data: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if g_spec.classes != d_spec.classes {
            return Err(Error::Spec(format!(
                "generator classes {:?} differ from discriminator classes {:?}",
                g_spec.classes, d_spec.classes
            )));
        }
        if g_spec.resolution != data.resolution() || d_spec.resolution != data.resolution() {
            return Err(Error::UnsupportedResolution(data.resolution()));
        }
        if let Some(k) = g_spec.classes {
            if k != data.classes() {
                return Err(Error::Data(format!(
                    "dataset has {} classes, models expect {k}",
                    data.classes()
                )));
            }
        }
        g_spec.sn = cfg.sn_g;
        d_spec.sn = cfg.sn_d;
        let g = Generator::new(g_spec, seed)?;
        let d = Discriminator::new(d_spec, seed)?;
        let opt_g = AdamState::new(&g.params, cfg.beta1, cfg.beta2);
        let opt_d = AdamState::new(&d.params, cfg.beta1, cfg.beta2);
        Ok(Self {
            sampler: BatchSampler::new(data.len(), seed)?,
            rng: CounterRng::new(seed, TRAIN_STREAM),
            cfg,
            g,
            d,
            opt_g,
            opt_d,
            iter: 0,
            counters: Counters::default(),
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `n_dis` discriminator updates, each on a fresh real batch and fresh
    /// latents, then one generator update.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let lr_g = self.cfg.lr_g_at(self.iter);
        let lr_d = self.cfg.lr_d_at(self.iter);
        let mut loss_d = 0.0;
        for _ in 0..self.cfg.n_dis {
            loss_d += self.d_step(data, lr_d)?;
        }
        loss_d /= self.cfg.n_dis as f64;
        let loss_g = self.g_step(lr_g)?;
        self.iter += 1;
        Ok(StepRecord {
            iter: self.iter,
            loss_d,
            loss_g,
            lr_g,
            lr_d,
        })
    }

    fn sample_labels(&mut self, n: usize) -> Option<Vec<usize>> {
        let k = self.g.spec.classes?;
        Some((0..n).map(|_| self.rng.below(k)).collect())
    }

    fn d_step(&mut self, data: &Dataset, lr: f64) -> Result<f64> {
        let b = self.cfg.batch_d;
        let idx = self.sampler.next_indices(b);
        let (real, real_labels) = data.batch::<T>(&idx)?;
        let z = sample_latent::<T>(b, self.g.spec.z_dim, &mut self.rng);
        let fake_labels = self.sample_labels(b);
        let fake = {
            let mut tape = Tape::new();
            let bind = self.g.params.bind(&mut tape);
            let z = tape.constant(z);
            let x = self
                .g
                .forward(&mut Ctx::train(&mut tape), &bind, z, fake_labels.as_deref())?;
            tape.value(x).clone()
        };
        let labels = fake_labels.map(|f| [real_labels, f].concat());

        let mut tape = Tape::new();
        let bind = self.d.params.bind(&mut tape);
        let real = tape.constant(real);
        let fake = tape.constant(fake);
        let x = tape.concat_rows(real, fake)?;
        let logits = self
            .d
            .forward(&mut Ctx::train(&mut tape), &bind, x, labels.as_deref())?;
        let on_real = tape.slice_rows(logits, 0, b)?;
        let on_fake = tape.slice_rows(logits, b, b)?;
        let loss = d_loss(&mut tape, self.cfg.loss, on_real, on_fake)?;
        let grads = tape.backward(loss)?;
        self.d.params.store_grads(&bind, &grads);
        adam_step(&mut self.d.params, &mut self.opt_d, lr);
        self.counters.d_updates += 1;
        self.counters.real_batches += 1;
        self.counters.fake_batches += 1;
        Ok(tape.value(loss).item().f64())
    }

    fn g_step(&mut self, lr: f64) -> Result<f64> {
        let b = self.cfg.batch_g;
        let z = sample_latent::<T>(b, self.g.spec.z_dim, &mut self.rng);
        let labels = self.sample_labels(b);
        let mut tape = Tape::new();
        let g_bind = self.g.params.bind(&mut tape);
        let d_bind = self.d.params.bind(&mut tape);
        let mut ctx = Ctx::train(&mut tape);
        let z = ctx.tape.constant(z);
        let x = self.g.forward(&mut ctx, &g_bind, z, labels.as_deref())?;
        let logits = self.d.forward(&mut ctx, &d_bind, x, labels.as_deref())?;
        let loss = g_loss(&mut tape, self.cfg.loss, logits);
        let grads = tape.backward(loss)?;
        self.g.params.store_grads(&g_bind, &grads);
        adam_step(&mut self.g.params, &mut self.opt_g, lr);
        self.counters.g_updates += 1;
        self.counters.fake_batches += 1;
        Ok(tape.value(loss).item().f64())
    }

    /// Parameters, buffers, optimizer moments, and loop state. Callers add
    /// their own header keys (typically the run configuration).
    pub fn to_archive(&mut self) -> Archive {
        let mut a = Archive::new();
        a.set("state.iter", self.iter);
        let rng = self.rng.state();
        a.set("state.rng.seed", rng.seed);
        a.set("state.rng.stream", rng.stream);
        a.set("state.rng.word_pos", rng.word_pos);
        let s = self.sampler.state();
        a.set("state.sampler.epoch", s.epoch);
        a.set("state.sampler.cursor", s.cursor);
        a.set("state.seed", self.seed);
        let c = self.counters;
        a.set("state.d_updates", c.d_updates);
        a.set("state.g_updates", c.g_updates);
        a.set("state.real_batches", c.real_batches);
        a.set("state.fake_batches", c.fake_batches);
        a.set("state.opt_g.t", self.opt_g.t);
        a.set("state.opt_d.t", self.opt_d.t);

        push_model(&mut a, &mut self.g);
        push_model(&mut a, &mut self.d);
        push_moments(&mut a, "opt_g", &self.g.params, &self.opt_g);
        push_moments(&mut a, "opt_d", &self.d.params, &self.opt_d);
        a
    }

    /// Overwrites all state from an archive written by [`Self::to_archive`]
    /// for the same architecture. Nothing is modified on error.
    pub fn restore(&mut self, a: &Archive, data: &Dataset) -> Result<()> {
        let mut next = self.clone();
        next.iter = a.parse("state.iter")?;
        next.rng = CounterRng::restore(RngState {
            seed: a.parse("state.rng.seed")?,
            stream: a.parse("state.rng.stream")?,
            word_pos: a.parse("state.rng.word_pos")?,
        });
        next.seed = a.parse("state.seed")?;
        next.sampler = BatchSampler::resume(
            data.len(),
            next.seed,
            SamplerState {
                epoch: a.parse("state.sampler.epoch")?,
                cursor: a.parse("state.sampler.cursor")?,
            },
        )?;
        next.counters = Counters {
            d_updates: a.parse("state.d_updates")?,
            g_updates: a.parse("state.g_updates")?,
            real_batches: a.parse("state.real_batches")?,
            fake_batches: a.parse("state.fake_batches")?,
        };
        next.opt_g.t = a.parse("state.opt_g.t")?;
        next.opt_d.t = a.parse("state.opt_d.t")?;
        load_model(a, &mut next.g)?;
        load_model(a, &mut next.d)?;
        load_moments(a, "opt_g", &next.g.params, &mut next.opt_g)?;
        load_moments(a, "opt_d", &next.d.params, &mut next.opt_d)?;
        *self = next;
        Ok(())
    }
}

fn push_model<T: Real, M: Model<T>>(a: &mut Archive, m: &mut M) {
    for p in m.params().iter() {
        a.push(p.name.clone(), &p.value);
    }
    for b in m.buffers() {
        let t = Tensor::new([b.data.len()], b.data.clone()).expect("1-d buffer");
        a.push(b.name, &t);
    }
}

fn load_model<T: Real, M: Model<T>>(a: &Archive, m: &mut M) -> Result<()> {
    for p in m.params_mut().iter_mut() {
        p.value = a.tensor_shaped(&p.name, p.value.shape())?;
    }
    for b in m.buffers() {
        let t: Tensor<T> = a.tensor_shaped(&b.name, &[b.data.len()])?;
        *b.data = t.into_data();
    }
    Ok(())
}

fn push_moments<T: Real>(a: &mut Archive, prefix: &str, params: &ParamStore<T>, s: &AdamState<T>) {
    for ((p, m), v) in params.iter().zip(&s.m).zip(&s.v) {
        a.push(format!("{prefix}.m.{}", p.name), m);
        a.push(format!("{prefix}.v.{}", p.name), v);
    }
}

fn load_moments<T: Real>(
    a: &Archive,
    prefix: &str,
    params: &ParamStore<T>,
    s: &mut AdamState<T>,
) -> Result<()> {
    for ((p, m), v) in params.iter().zip(&mut s.m).zip(&mut s.v) {
        *m = a.tensor_shaped(&format!("{prefix}.m.{}", p.name), p.value.shape())?;
        *v = a.tensor_shaped(&format!("{prefix}.v.{}", p.name), p.value.shape())?;
    }
    Ok(())
}

//! Central finite-difference verification of the reverse-mode gradients of
//! every primitive, layer, block, and the assembled networks.
//!
//! Each case maps a list of input tensors to an output; the checked scalar
//! is `⟨out, R⟩` for a fixed random projection `R`. Analytic gradients come
//! from one backward pass; numerical ones from `(L(x+h) − L(x−h)) / 2h` on a
//! random subset of input elements. A sample whose ±h evaluations change
//! the sign of any ReLU input straddles a kink, where the function is not
//! differentiable; such samples are skipped and replaced.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::blocks::{BlockConfig, DiscBlock, GenBlock, Resample, ShortcutKind, ShortcutNorm};
use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Model};
use crate::nn::{
    BatchNorm, Binding, ConditionalBatchNorm, Conv2d, Ctx, Dense, Embedding, Init, ParamStore,
    SpectralNormState,
};
use crate::rng::CounterRng;
use crate::tensor::kernels::Padding;
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::train::loss::{d_loss, g_loss, LossKind};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error, so that gradients
/// which are zero up to rounding do not produce spurious failures.
pub const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Module {
    Tensor,
    Nn,
    Blocks,
    Model,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Tensor, Module::Nn, Module::Blocks, Module::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Tensor => "tensor",
            Module::Nn => "nn",
            Module::Blocks => "blocks",
            Module::Model => "model",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
    /// Corrupts the backward rule of one primitive, to prove the suite
    /// catches it.
    pub fault: Option<OpKind>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: STEP,
            tolerance: TOLERANCE,
            floor: DENOM_FLOOR,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub module: Module,
    pub max_rel_err: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped because their ±h evaluations straddle a ReLU kink.
    pub skipped: usize,
    /// Primitives exercised by the case.
    pub ops: Vec<OpKind>,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

type Forward = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>;

#[derive(Debug, Clone, Copy)]
enum Budget {
    /// Up to `n` elements of every perturbed input.
    PerInput(usize),
    /// `n` elements drawn from all perturbed inputs together.
    Total(usize),
}

pub struct Case {
    pub name: String,
    pub module: Module,
    inputs: Vec<Tensor<f64>>,
    perturb: Range<usize>,
    budget: Budget,
    forward: Forward,
}

impl Case {
    fn new(
        module: Module,
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        forward: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        let n = inputs.len();
        Self {
            name: name.into(),
            module,
            inputs,
            perturb: 0..n,
            budget: Budget::PerInput(24),
            forward: Box::new(forward),
        }
    }

    fn total(mut self, n: usize, perturb: Range<usize>) -> Self {
        self.budget = Budget::Total(n);
        self.perturb = perturb;
        self
    }

    fn evaluate(
        &mut self,
        inputs: &[Tensor<f64>],
        projection: &Tensor<f64>,
        fault: Option<OpKind>,
    ) -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.forward)(&mut tape, &leaves)?;
        let p = tape.constant(projection.reshape(tape.shape(out).to_vec())?);
        let prod = tape.mul(out, p)?;
        let loss = tape.sum(prod);
        Ok((tape, leaves, loss))
    }

    /// Runs the check and reports the worst relative error.
    pub fn check(&mut self, opts: &Options) -> Result<CheckReport> {
        let mut rng = CounterRng::new(opts.seed, fnv(&self.name));
        let inputs = self.inputs.clone();

        // The projection needs the output shape, so probe once.
        let mut probe = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
        let out = (self.forward)(&mut probe, &leaves)?;
        let projection = Tensor::from_fn(probe.shape(out), |_| rng.normal());

        let (tape, leaves, loss) = self.evaluate(&inputs, &projection, opts.fault)?;
        let pattern = tape.relu_pattern();
        let grads = tape.backward(loss)?;

        let mut candidates: Vec<(usize, usize)> = Vec::new();
        let mut quotas: Vec<usize> = Vec::new();
        for i in self.perturb.clone() {
            let mut idx: Vec<usize> = (0..inputs[i].len()).collect();
            rng.shuffle(&mut idx);
            candidates.extend(idx.into_iter().map(|e| (i, e)));
        }
        match self.budget {
            Budget::PerInput(n) => quotas.extend(self.perturb.clone().map(|_| n)),
            Budget::Total(_) => rng.shuffle(&mut candidates),
        }

        let mut report = CheckReport {
            name: self.name.clone(),
            module: self.module,
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            ops: tape.op_kinds(),
        };
        let mut taken = vec![0usize; inputs.len()];
        for (i, e) in candidates {
            let full = match self.budget {
                Budget::PerInput(_) => taken[i] >= quotas[i - self.perturb.start],
                Budget::Total(n) => report.checked >= n,
            };
            if full {
                continue;
            }
            let mut shifted = inputs.clone();
            let x0 = inputs[i].data()[e];
            shifted[i].data_mut()[e] = x0 + opts.step;
            let (plus, _, lp) = self.evaluate(&shifted, &projection, None)?;
            shifted[i].data_mut()[e] = x0 - opts.step;
            let (minus, _, lm) = self.evaluate(&shifted, &projection, None)?;
            if plus.relu_pattern() != pattern || minus.relu_pattern() != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.value(lp).item() - minus.value(lm).item()) / (2.0 * opts.step);
            let analytic = grads.wrt(leaves[i]).data()[e];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
            taken[i] += 1;
        }
        Ok(report)
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Checks every case of the given modules.
pub fn run(modules: &[Module], opts: &Options) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for mut case in cases(opts.seed)? {
        if modules.contains(&case.module) {
            out.push(case.check(opts)?);
        }
    }
    Ok(out)
}

struct Inputs(CounterRng);

impl Inputs {
    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.normal())
    }

    /// Values with magnitude in `[0.2, 1.2]`, away from the ReLU kink.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.uniform_range(0.2, 1.2);
            if self.0.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.uniform_range(0.5, 2.0))
    }
}

fn params_of(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.value.clone()).collect()
}

/// The full registry of cases, grouped by module.
pub fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut out = tensor_cases(seed);
    out.extend(nn_cases(seed)?);
    out.extend(block_cases(seed)?);
    out.extend(model_cases(seed)?);
    Ok(out)
}

fn tensor_cases(seed: u64) -> Vec<Case> {
    let mut r = Inputs(CounterRng::new(seed, 1));
    let t = Module::Tensor;
    let mut v = vec![
        Case::new(
            t,
            "add",
            vec![r.normal(&[2, 3]), r.normal(&[2, 3])],
            |tp, x| tp.add(x[0], x[1]),
        ),
        Case::new(
            t,
            "sub",
            vec![r.normal(&[2, 3]), r.normal(&[2, 3])],
            |tp, x| tp.sub(x[0], x[1]),
        ),
        Case::new(
            t,
            "mul",
            vec![r.normal(&[2, 3]), r.normal(&[2, 3])],
            |tp, x| tp.mul(x[0], x[1]),
        ),
        Case::new(t, "add_scalar", vec![r.normal(&[5])], |tp, x| {
            Ok(tp.add_scalar(x[0], 0.7))
        }),
        Case::new(t, "scale", vec![r.normal(&[5])], |tp, x| {
            Ok(tp.scale(x[0], -1.3))
        }),
        Case::new(t, "one_minus", vec![r.normal(&[5])], |tp, x| {
            Ok(tp.one_minus(x[0]))
        }),
        Case::new(
            t,
            "matmul",
            vec![r.normal(&[3, 4]), r.normal(&[4, 2])],
            |tp, x| tp.matmul(x[0], x[1]),
        ),
        Case::new(
            t,
            "add_row_bias",
            vec![r.normal(&[3, 4]), r.normal(&[4])],
            |tp, x| tp.add_row_bias(x[0], x[1]),
        ),
        Case::new(
            t,
            "conv2d_3x3_same",
            vec![
                r.normal(&[2, 3, 5, 5]),
                r.normal(&[2, 3, 3, 3]),
                r.normal(&[2]),
            ],
            |tp, x| tp.conv2d(x[0], x[1], Some(x[2]), Padding::Same),
        ),
        Case::new(
            t,
            "conv2d_3x3_valid",
            vec![r.normal(&[1, 2, 4, 5]), r.normal(&[3, 2, 3, 3])],
            |tp, x| tp.conv2d(x[0], x[1], None, Padding::Valid),
        ),
        Case::new(
            t,
            "conv2d_1x1",
            vec![
                r.normal(&[2, 3, 4, 4]),
                r.normal(&[4, 3, 1, 1]),
                r.normal(&[4]),
            ],
            |tp, x| tp.conv2d(x[0], x[1], Some(x[2]), Padding::Same),
        ),
        Case::new(
            t,
            "concat_channels",
            vec![r.normal(&[2, 2, 3, 3]), r.normal(&[2, 3, 3, 3])],
            |tp, x| tp.concat_channels(x[0], x[1]),
        ),
        Case::new(t, "slice_rows", vec![r.normal(&[4, 3])], |tp, x| {
            tp.slice_rows(x[0], 1, 2)
        }),
        Case::new(
            t,
            "upsample_nearest2x",
            vec![r.normal(&[2, 2, 3, 3])],
            |tp, x| tp.upsample_nearest2x(x[0]),
        ),
        Case::new(t, "avgpool2x", vec![r.normal(&[2, 2, 4, 4])], |tp, x| {
            tp.avgpool2x(x[0])
        }),
        Case::new(
            t,
            "global_sum_pool",
            vec![r.normal(&[2, 3, 4, 4])],
            |tp, x| tp.global_sum_pool(x[0]),
        ),
        Case::new(t, "relu", vec![r.off_zero(&[3, 4])], |tp, x| {
            Ok(tp.relu(x[0]))
        }),
        Case::new(t, "sigmoid", vec![r.normal(&[3, 4])], |tp, x| {
            Ok(tp.sigmoid(x[0]))
        }),
        Case::new(
            t,
            "tanh",
            vec![r.normal(&[3, 4])],
            |tp, x| Ok(tp.tanh(x[0])),
        ),
        Case::new(t, "log", vec![r.positive(&[3, 4])], |tp, x| {
            Ok(tp.log_floor(x[0], 1e-12))
        }),
        Case::new(t, "sum", vec![r.normal(&[3, 4])], |tp, x| Ok(tp.sum(x[0]))),
        Case::new(
            t,
            "mean",
            vec![r.normal(&[3, 4])],
            |tp, x| Ok(tp.mean(x[0])),
        ),
        Case::new(t, "row_sum", vec![r.normal(&[3, 4])], |tp, x| {
            tp.row_sum(x[0])
        }),
        Case::new(t, "reshape", vec![r.normal(&[2, 6])], |tp, x| {
            tp.reshape(x[0], [3, 2, 2])
        }),
        Case::new(t, "standardize", vec![r.normal(&[3, 2, 2, 2])], |tp, x| {
            Ok(tp.standardize(x[0], 1e-5)?.0)
        }),
        Case::new(
            t,
            "channel_affine_shared",
            vec![r.normal(&[2, 3, 2, 2]), r.normal(&[3]), r.normal(&[3])],
            |tp, x| tp.channel_affine(x[0], x[1], x[2]),
        ),
        Case::new(
            t,
            "channel_affine_per_sample",
            vec![
                r.normal(&[2, 3, 2, 2]),
                r.normal(&[2, 3]),
                r.normal(&[2, 3]),
            ],
            |tp, x| tp.channel_affine(x[0], x[1], x[2]),
        ),
        Case::new(t, "gather_rows", vec![r.normal(&[4, 3])], |tp, x| {
            tp.gather_rows(x[0], &[2, 0, 2])
        }),
    ];
    let w = r.normal(&[3, 4]);
    let mut state = SpectralNormState::new(3, 4, &mut r.0);
    for _ in 0..5 {
        state.power_iterate(&w);
    }
    v.push(Case::new(t, "spectral_div", vec![w], move |tp, x| {
        let mut ctx = Ctx::frozen(tp);
        state.normalize(&mut ctx, x[0])
    }));
    v
}

/// Wraps a layer whose parameters live in `store`: inputs are the
/// parameters followed by `data`.
fn layer_case(
    module: Module,
    name: &str,
    store: &ParamStore<f64>,
    data: Vec<Tensor<f64>>,
    mut f: impl FnMut(&mut Ctx<'_, f64>, &Binding, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let n = store.len();
    let mut inputs = params_of(store);
    inputs.extend(data);
    Case::new(module, name, inputs, move |tp, x| {
        let bind = Binding::from_vars(x[..n].to_vec());
        let mut ctx = Ctx::frozen(tp);
        f(&mut ctx, &bind, &x[n..])
    })
}

fn nn_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = Inputs(CounterRng::new(seed, 2));
    let m = Module::Nn;
    let g = Init::GlorotUniform;
    let mut v = Vec::new();

    for sn in [false, true] {
        let mut s = ParamStore::new();
        let mut dense = Dense::new(&mut s, "fc", 4, 3, true, g, sn, &mut r.0)?;
        if let Some(st) = &mut dense.sn {
            for _ in 0..5 {
                st.power_iterate(&s.get(dense.weight).value);
            }
        }
        let name = if sn { "dense_sn" } else { "dense" };
        v.push(layer_case(
            m,
            name,
            &s,
            vec![r.normal(&[2, 4])],
            move |c, b, x| dense.forward(c, b, x[0]),
        ));

        let mut s = ParamStore::new();
        let mut conv = Conv2d::new(&mut s, "conv", 2, 3, 3, g, sn, &mut r.0)?;
        if let Some(st) = &mut conv.sn {
            for _ in 0..5 {
                st.power_iterate(&s.get(conv.kernel).value);
            }
        }
        let name = if sn { "conv_sn" } else { "conv" };
        v.push(layer_case(
            m,
            name,
            &s,
            vec![r.normal(&[2, 2, 3, 3])],
            move |c, b, x| conv.forward(c, b, x[0]),
        ));

        let mut s = ParamStore::new();
        let mut emb = Embedding::new(&mut s, "embed", 4, 3, g, sn, &mut r.0)?;
        if let Some(st) = &mut emb.sn {
            for _ in 0..5 {
                st.power_iterate(&s.get(emb.table).value);
            }
        }
        let name = if sn { "embedding_sn" } else { "embedding" };
        v.push(layer_case(m, name, &s, vec![], move |c, b, _| {
            emb.forward(c, b, &[3, 1, 3])
        }));
    }

    let mut s = ParamStore::new();
    let mut bn = BatchNorm::new(&mut s, "bn", 3, true)?;
    for p in s.iter_mut() {
        p.value = p.value.map(|a| a + 0.3);
    }
    v.push(layer_case(
        m,
        "batch_norm",
        &s,
        vec![r.normal(&[2, 3, 2, 2])],
        move |c, b, x| bn.forward(c, b, x[0]),
    ));

    let mut s = ParamStore::new();
    let mut bn = BatchNorm::new(&mut s, "bn", 3, true)?;
    bn.state.running_mean = vec![0.1, -0.2, 0.3];
    bn.state.running_var = vec![0.5, 1.5, 2.0];
    v.push(layer_case(
        m,
        "batch_norm_eval",
        &s,
        vec![r.normal(&[2, 3, 2, 2])],
        move |c, b, x| {
            c.train = false;
            bn.forward(c, b, x[0])
        },
    ));

    let mut s = ParamStore::new();
    let mut cbn = ConditionalBatchNorm::new(&mut s, "cbn", 3, 4, &mut r.0)?;
    jitter(&mut s, &mut r.0, 0.5);
    v.push(layer_case(
        m,
        "conditional_batch_norm",
        &s,
        vec![r.normal(&[2, 3, 2, 2]), r.normal(&[2, 4])],
        move |c, b, x| cbn.forward(c, b, x[0], x[1]),
    ));

    for kind in [LossKind::Hinge, LossKind::Standard] {
        v.push(Case::new(
            m,
            format!("{kind}_loss_d"),
            vec![r.normal(&[4, 1]), r.normal(&[4, 1])],
            move |tp, x| d_loss(tp, kind, x[0], x[1]),
        ));
        v.push(Case::new(
            m,
            format!("{kind}_loss_g"),
            vec![r.normal(&[4, 1])],
            move |tp, x| Ok(g_loss(tp, kind, x[0])),
        ));
    }
    Ok(v)
}

/// Perturbs every parameter away from its initial value so that zero-init
/// layers (cBN sources, biases) take part in the check.
fn jitter(store: &mut ParamStore<f64>, rng: &mut CounterRng, scale: f64) {
    for p in store.iter_mut() {
        for a in p.value.data_mut() {
            *a += scale * rng.normal();
        }
    }
}

fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = Inputs(CounterRng::new(seed, 3));
    let m = Module::Blocks;
    let mut v = Vec::new();
    let cond_dim = 3;
    let mut variants: Vec<(String, BlockConfig)> = ShortcutKind::ALL
        .into_iter()
        .map(|k| (format!("gen_block_{k}"), BlockConfig::up(4, 3, k)))
        .collect();
    variants.push((
        "gen_block_gated_same_width".into(),
        BlockConfig::up(3, 3, ShortcutKind::Gated),
    ));
    variants.push((
        "gen_block_gated_conditional_shortcut_bn".into(),
        BlockConfig {
            shortcut_norm: ShortcutNorm::Conditional,
            ..BlockConfig::up(3, 3, ShortcutKind::Gated)
        },
    ));
    variants.push((
        "gen_block_egs_no_resample".into(),
        BlockConfig {
            resample: Resample::None,
            ..BlockConfig::up(3, 3, ShortcutKind::Egs)
        },
    ));
    for (name, cfg) in variants {
        let mut s = ParamStore::new();
        let mut block = GenBlock::new(&mut s, "b", cfg, cond_dim, false, &mut r.0)?;
        jitter(&mut s, &mut r.0, 0.2);
        let data = vec![r.normal(&[2, cfg.c_i, 2, 2]), r.normal(&[2, cond_dim])];
        v.push(layer_case(m, &name, &s, data, move |c, b, x| {
            block.forward(c, b, x[0], Some(x[1]))
        }));
    }
    for (name, c_i, c_o, down, pre) in [
        ("disc_block_first", 3, 4, true, false),
        ("disc_block_down", 4, 4, true, true),
        ("disc_block_plain", 4, 4, false, true),
    ] {
        let mut s = ParamStore::new();
        let mut block = DiscBlock::new(&mut s, "d", c_i, c_o, down, pre, true, &mut r.0)?;
        for conv in block.convs_mut() {
            let w = s.get(conv.kernel).value.clone();
            for _ in 0..5 {
                conv.sn.as_mut().expect("sn enabled").power_iterate(&w);
            }
        }
        let data = vec![r.normal(&[2, c_i, 4, 4])];
        v.push(layer_case(m, name, &s, data, move |c, b, x| {
            block.forward(c, b, x[0])
        }));
    }
    Ok(v)
}

fn model_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = Inputs(CounterRng::new(seed, 4));
    let m = Module::Model;
    let mut v = Vec::new();
    for (name, kind, classes, loss) in [
        (
            "generator_hinge",
            ShortcutKind::Gated,
            None,
            LossKind::Hinge,
        ),
        (
            "generator_hinge_identity",
            ShortcutKind::Identity,
            None,
            LossKind::Hinge,
        ),
        (
            "conditional_generator_standard",
            ShortcutKind::SogConv,
            Some(3),
            LossKind::Standard,
        ),
    ] {
        let gspec = GeneratorSpec {
            z_dim: 6,
            embed_dim: 4,
            classes,
            ..GeneratorSpec::scaled(8, 3, kind)?
        };
        let mut dspec = DiscriminatorSpec::scaled(8, 3)?;
        dspec.classes = classes;
        let mut gen = Generator::<f64>::new(gspec, seed)?;
        let mut disc = Discriminator::<f64>::new(dspec, seed)?;
        jitter(&mut gen.params, &mut r.0, 0.05);
        disc.warm_up_sn(10);
        let (ng, nd) = (gen.params.len(), disc.params.len());
        let mut inputs = params_of(&gen.params);
        inputs.extend(params_of(&disc.params));
        inputs.push(r.normal(&[4, 6]));
        inputs.push(r.normal(&[4, 3, 8, 8]).map(|a| a.tanh()));
        let labels: Option<Vec<usize>> = classes.map(|k| (0..4).map(|i| i % k).collect());

        // Generator objective through the discriminator.
        let mut g1 = gen.clone();
        let mut d1 = disc.clone();
        let l1 = labels.clone();
        v.push(
            Case::new(m, name, inputs.clone(), move |tp, x| {
                let bg = Binding::from_vars(x[..ng].to_vec());
                let bd = Binding::from_vars(x[ng..ng + nd].to_vec());
                let mut ctx = Ctx::frozen(tp);
                let fake = g1.forward(&mut ctx, &bg, x[ng + nd], l1.as_deref())?;
                let logits = d1.forward(&mut ctx, &bd, fake, l1.as_deref())?;
                Ok(g_loss(ctx.tape, loss, logits))
            })
            .total(10, 0..ng),
        );

        // Discriminator objective on a concatenated real/fake batch.
        let (mut g2, mut d2) = (gen, disc);
        v.push(
            Case::new(m, format!("{name}_disc"), inputs, move |tp, x| {
                let bg = Binding::from_vars(x[..ng].to_vec());
                let bd = Binding::from_vars(x[ng..ng + nd].to_vec());
                let mut ctx = Ctx::frozen(tp);
                let fake = g2.forward(&mut ctx, &bg, x[ng + nd], labels.as_deref())?;
                let batch = ctx.tape.shape(fake)[0];
                let joint = ctx.tape.concat_rows(x[ng + nd + 1], fake)?;
                let joint_labels = labels.as_ref().map(|l| [l.as_slice(), l].concat());
                let logits = d2.forward(&mut ctx, &bd, joint, joint_labels.as_deref())?;
                let real = ctx.tape.slice_rows(logits, 0, batch)?;
                let fake = ctx.tape.slice_rows(logits, batch, batch)?;
                d_loss(ctx.tape, loss, real, fake)
            })
            .total(10, ng..ng + nd),
        );
    }
    Ok(v)
}

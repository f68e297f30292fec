//! Generator residual blocks with interchangeable shortcuts, and the
//! discriminator down-block.

mod shortcut;

pub use shortcut::{GateMix, GateOutputs, GatedShortcut, GatingShortcut};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, BatchNormState, Binding, Buffer, ConditionalBatchNorm, Conv2d, Ctx, Init, ParamStore,
};
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShortcutKind {
    Identity,
    Gated,
    Egs,
    Sog,
    EgsConv,
    SogConv,
}

impl ShortcutKind {
    pub const ALL: [ShortcutKind; 6] = [
        ShortcutKind::Identity,
        ShortcutKind::Gated,
        ShortcutKind::Egs,
        ShortcutKind::Sog,
        ShortcutKind::EgsConv,
        ShortcutKind::SogConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShortcutKind::Identity => "identity",
            ShortcutKind::Gated => "gated",
            ShortcutKind::Egs => "egs",
            ShortcutKind::Sog => "sog",
            ShortcutKind::EgsConv => "egsconv",
            ShortcutKind::SogConv => "sogconv",
        }
    }
}

impl fmt::Display for ShortcutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShortcutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShortcutKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shortcut {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Up,
    Down,
    None,
}

/// Normalization applied to `f_i` before it enters a gating shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutNorm {
    /// Non-affine standardization.
    Plain,
    /// Conditioned on the same vector as the main path.
    Conditional,
}

impl ShortcutNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            ShortcutNorm::Plain => "plain",
            ShortcutNorm::Conditional => "conditional",
        }
    }
}

impl fmt::Display for ShortcutNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShortcutNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ShortcutNorm::Plain),
            "conditional" => Ok(ShortcutNorm::Conditional),
            _ => Err(Error::Config(format!("unknown shortcut norm {s:?}"))),
        }
    }
}

/// Channel counts and wiring of one generator block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub c_i: usize,
    pub c_c: usize,
    pub c_g: usize,
    pub c_r: usize,
    pub c_o: usize,
    pub resample: Resample,
    pub shortcut: ShortcutKind,
    /// Main-path BN affine parameters predicted from the conditioning vector.
    pub conditional: bool,
    pub shortcut_norm: ShortcutNorm,
}

impl BlockConfig {
    /// Up-sampling block `c_i → c_o` with `c_c = c_g = c_r = c_o`.
    pub fn up(c_i: usize, c_o: usize, shortcut: ShortcutKind) -> Self {
        Self {
            c_i,
            c_c: c_o,
            c_g: c_o,
            c_r: c_o,
            c_o,
            resample: Resample::Up,
            shortcut,
            conditional: true,
            shortcut_norm: ShortcutNorm::Plain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.resample == Resample::Down {
            return bad("generator blocks cannot down-sample".into());
        }
        match self.shortcut {
            ShortcutKind::Gated
                if !(self.c_g == self.c_r && self.c_r == self.c_o && self.c_o == self.c_c) =>
            {
                bad(format!(
                    "gated shortcut needs c_c = c_g = c_r = c_o, got {self:?}"
                ))
            }
            ShortcutKind::Identity | ShortcutKind::Egs | ShortcutKind::Sog
                if self.c_c != self.c_o =>
            {
                bad(format!(
                    "{} shortcut needs c_c = c_o, got {self:?}",
                    self.shortcut
                ))
            }
            ShortcutKind::Egs
            | ShortcutKind::Sog
            | ShortcutKind::EgsConv
            | ShortcutKind::SogConv
                if self.c_g != self.c_c =>
            {
                bad(format!(
                    "{} shortcut needs c_g = c_c, got {self:?}",
                    self.shortcut
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Norm<T> {
    Plain(BatchNorm<T>),
    Conditional(Box<ConditionalBatchNorm<T>>),
}

impl<T: Real> Norm<T> {
    fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_dim: Option<usize>,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Ok(match cond_dim {
            Some(d) => Norm::Conditional(Box::new(ConditionalBatchNorm::new(
                store, name, channels, d, rng,
            )?)),
            None => Norm::Plain(BatchNorm::new(store, name, channels, true)?),
        })
    }

    fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        match self {
            Norm::Plain(bn) => bn.buffers(out),
            Norm::Conditional(cbn) => cbn.buffers(out),
        }
    }

    fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        match self {
            Norm::Plain(bn) => bn.forward(ctx, bind, x),
            Norm::Conditional(cbn) => {
                let cond = cond.ok_or_else(|| {
                    Error::Spec("conditional block called without a condition".into())
                })?;
                cbn.forward(ctx, bind, x, cond)
            }
        }
    }
}

/// Pre-activation main path:
/// `BN → ReLU → [up] → 3×3 conv → BN → ReLU → 3×3 conv`.
#[derive(Debug, Clone)]
pub struct MainPath<T> {
    norm1: Norm<T>,
    pub conv1: Conv2d<T>,
    norm2: Norm<T>,
    pub conv2: Conv2d<T>,
    upsample: bool,
}

impl<T: Real> MainPath<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BlockConfig,
        cond_dim: usize,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let cond = cfg.conditional.then_some(cond_dim);
        let g = Init::GlorotUniform;
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.bn1"), cfg.c_i, cond, rng)?,
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                cfg.c_i,
                cfg.c_c,
                3,
                g,
                sn,
                rng,
            )?,
            norm2: Norm::new(store, &format!("{name}.bn2"), cfg.c_c, cond, rng)?,
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                cfg.c_c,
                cfg.c_c,
                3,
                g,
                sn,
                rng,
            )?,
            upsample: cfg.resample == Resample::Up,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        self.norm1.buffers(out);
        self.conv1.buffers(out);
        self.norm2.buffers(out);
        self.conv2.buffers(out);
    }

    /// Returns `f_c` at the post-resample spatial size.
    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let c_i = ctx.tape.shape(f_i).get(1).copied();
        if c_i != Some(self.conv1.c_in) {
            return Err(Error::ShapeMismatch {
                op: "main_path",
                lhs: ctx.tape.shape(f_i).to_vec(),
                rhs: vec![self.conv1.c_in],
            });
        }
        let h = self.norm1.forward(ctx, bind, f_i, cond)?;
        let mut h = ctx.tape.relu(h);
        if self.upsample {
            h = ctx.tape.upsample_nearest2x(h)?;
        }
        let h = self.conv1.forward(ctx, bind, h)?;
        let h = self.norm2.forward(ctx, bind, h, cond)?;
        let h = ctx.tape.relu(h);
        self.conv2.forward(ctx, bind, h)
    }
}

#[derive(Debug, Clone)]
enum ShortcutPath<T> {
    Identity(Option<Conv2d<T>>),
    Gated(GatedShortcut<T>),
    Gating(GatingShortcut<T>),
}

/// Features captured during one block forward, for inspection.
#[derive(Debug, Clone)]
pub struct GatedShortcutTrace<T> {
    /// Block input as seen by the shortcut (after BN and resizing for the
    /// gating variants).
    pub f_i: Tensor<T>,
    pub f_c: Tensor<T>,
    pub f_g: Option<Tensor<T>>,
    pub f_r: Option<Tensor<T>>,
    pub f_o: Tensor<T>,
}

/// Generator residual block: main path plus one shortcut variant.
#[derive(Debug, Clone)]
pub struct GenBlock<T> {
    pub cfg: BlockConfig,
    pub main: MainPath<T>,
    shortcut: ShortcutPath<T>,
    shortcut_bn: Option<Norm<T>>,
}

impl<T: Real> GenBlock<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BlockConfig,
        cond_dim: usize,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let main = MainPath::new(store, &format!("{name}.main"), &cfg, cond_dim, sn, rng)?;
        let sc = format!("{name}.shortcut");
        let g = Init::GlorotUniform;
        let shortcut = match cfg.shortcut {
            ShortcutKind::Identity => ShortcutPath::Identity(if cfg.c_i != cfg.c_o {
                Some(Conv2d::new(
                    store,
                    &format!("{sc}.conv"),
                    cfg.c_i,
                    cfg.c_o,
                    1,
                    g,
                    sn,
                    rng,
                )?)
            } else {
                None
            }),
            ShortcutKind::Gated => ShortcutPath::Gated(GatedShortcut::new(
                store, &sc, cfg.c_i, cfg.c_c, cfg.c_o, sn, rng,
            )?),
            kind => {
                let mix = match kind {
                    ShortcutKind::Egs | ShortcutKind::EgsConv => GateMix::Exclusive,
                    _ => GateMix::ShortcutOnly,
                };
                let out = matches!(kind, ShortcutKind::EgsConv | ShortcutKind::SogConv)
                    .then_some(cfg.c_o);
                ShortcutPath::Gating(GatingShortcut::new(
                    store, &sc, mix, cfg.c_i, cfg.c_c, out, sn, rng,
                )?)
            }
        };
        let shortcut_bn = match (cfg.shortcut, cfg.shortcut_norm) {
            (ShortcutKind::Identity, _) => None,
            (_, ShortcutNorm::Plain) => Some(Norm::Plain(BatchNorm {
                name: format!("{sc}.bn"),
                state: BatchNormState::new(cfg.c_i),
                gain: None,
                bias: None,
            })),
            (_, ShortcutNorm::Conditional) => Some(Norm::new(
                store,
                &format!("{sc}.bn"),
                cfg.c_i,
                Some(cond_dim),
                rng,
            )?),
        };
        Ok(Self {
            cfg,
            main,
            shortcut,
            shortcut_bn,
        })
    }

    /// BN running statistics and SN estimates, in a fixed order.
    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        self.main.buffers(out);
        match &mut self.shortcut {
            ShortcutPath::Identity(conv) => {
                if let Some(conv) = conv {
                    conv.buffers(out);
                }
            }
            ShortcutPath::Gated(g) => {
                for conv in [&mut g.w_g, &mut g.w_r, &mut g.w_o] {
                    conv.buffers(out);
                }
            }
            ShortcutPath::Gating(g) => {
                g.gate.buffers(out);
                for conv in [&mut g.align, &mut g.out].into_iter().flatten() {
                    conv.buffers(out);
                }
            }
        }
        if let Some(bn) = &mut self.shortcut_bn {
            bn.buffers(out);
        }
    }

    /// Every convolution of the block, main path first.
    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = vec![&mut self.main.conv1, &mut self.main.conv2];
        match &mut self.shortcut {
            ShortcutPath::Identity(conv) => out.extend(conv.as_mut()),
            ShortcutPath::Gated(g) => out.extend([&mut g.w_g, &mut g.w_r, &mut g.w_o]),
            ShortcutPath::Gating(g) => {
                out.push(&mut g.gate);
                out.extend(g.align.as_mut());
                out.extend(g.out.as_mut());
            }
        }
        out
    }

    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let (out, _) = self.forward_parts(ctx, bind, f_i, cond)?;
        Ok(out)
    }

    /// Forward pass that also returns the intermediate features.
    pub fn forward_traced(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        cond: Option<Var>,
    ) -> Result<(Var, GatedShortcutTrace<T>)> {
        let (out, parts) = self.forward_parts(ctx, bind, f_i, cond)?;
        let value = |v: Var| ctx.tape.value(v).clone();
        let trace = GatedShortcutTrace {
            f_i: value(parts.f_i),
            f_c: value(parts.f_c),
            f_g: parts.gate.map(|g| value(g.f_g)),
            f_r: parts.gate.and_then(|g| g.f_r).map(value),
            f_o: value(out),
        };
        Ok((out, trace))
    }

    fn forward_parts(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Parts)> {
        let f_c = self.main.forward(ctx, bind, f_i, cond)?;
        let up = self.cfg.resample == Resample::Up;
        match &mut self.shortcut {
            ShortcutPath::Identity(conv) => {
                let mut s = if up {
                    ctx.tape.upsample_nearest2x(f_i)?
                } else {
                    f_i
                };
                if let Some(conv) = conv {
                    s = conv.forward(ctx, bind, s)?;
                }
                let out = ctx.tape.add(s, f_c)?;
                Ok((
                    out,
                    Parts {
                        f_i: s,
                        f_c,
                        gate: None,
                    },
                ))
            }
            path => {
                let bn = self.shortcut_bn.as_mut().expect("gating shortcut has a BN");
                let normed = bn.forward(ctx, bind, f_i, cond)?;
                let f_i = resize_to(ctx, normed, f_c)?;
                let gate = match path {
                    ShortcutPath::Gated(g) => g.forward(ctx, bind, f_i, f_c)?,
                    ShortcutPath::Gating(g) => g.forward(ctx, bind, f_i, f_c)?,
                    ShortcutPath::Identity(_) => unreachable!(),
                };
                Ok((
                    gate.f_o,
                    Parts {
                        f_i,
                        f_c,
                        gate: Some(gate),
                    },
                ))
            }
        }
    }
}

struct Parts {
    f_i: Var,
    f_c: Var,
    gate: Option<GateOutputs>,
}

/// Nearest-neighbor resize of `x` to the spatial extent of `like`.
fn resize_to<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, like: Var) -> Result<Var> {
    let (xs, ls) = (ctx.tape.shape(x).to_vec(), ctx.tape.shape(like).to_vec());
    let (hx, hl) = ((xs[2], xs[3]), (ls[2], ls[3]));
    if hx == hl {
        Ok(x)
    } else if (2 * hx.0, 2 * hx.1) == hl {
        ctx.tape.upsample_nearest2x(x)
    } else {
        Err(Error::ShapeMismatch {
            op: "shortcut resize",
            lhs: xs,
            rhs: ls,
        })
    }
}

/// Discriminator residual block:
/// `[ReLU] → 3×3 conv → ReLU → 3×3 conv → [avgpool]`, plus a shortcut that
/// is the identity or a 1×1 conv followed by the same pooling.
#[derive(Debug, Clone)]
pub struct DiscBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub down: bool,
    /// ReLU before the first conv; off for the block that sees raw images.
    pub preactivate: bool,
}

impl<T: Real> DiscBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_i: usize,
        c_o: usize,
        down: bool,
        preactivate: bool,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let g = Init::GlorotUniform;
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_i, c_o, 3, g, sn, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_o, c_o, 3, g, sn, rng)?,
            shortcut: if c_i != c_o || down {
                Some(Conv2d::new(
                    store,
                    &format!("{name}.shortcut"),
                    c_i,
                    c_o,
                    1,
                    g,
                    sn,
                    rng,
                )?)
            } else {
                None
            },
            down,
            preactivate,
        })
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, bind: &Binding, f_i: Var) -> Result<Var> {
        let mut h = if self.preactivate {
            ctx.tape.relu(f_i)
        } else {
            f_i
        };
        h = self.conv1.forward(ctx, bind, h)?;
        h = ctx.tape.relu(h);
        h = self.conv2.forward(ctx, bind, h)?;
        let mut s = match &mut self.shortcut {
            Some(conv) => conv.forward(ctx, bind, f_i)?,
            None => f_i,
        };
        if self.down {
            h = ctx.tape.avgpool2x(h)?;
            s = ctx.tape.avgpool2x(s)?;
        }
        ctx.tape.add(h, s)
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        self.conv1.buffers(out);
        self.conv2.buffers(out);
        if let Some(conv) = &mut self.shortcut {
            conv.buffers(out);
        }
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = vec![&mut self.conv1, &mut self.conv2];
        out.extend(self.shortcut.as_mut());
        out
    }
}

#[cfg(test)]
mod tests;

//! Shortcut variants that merge a block's input `f_i` with its
//! convolutional feature `f_c`.
//!
//! All gating variants see `f_i` after standardization and nearest-neighbor
//! resizing to the spatial size of `f_c`; the gate is always computed from
//! the channel concatenation `(f_c, f_i)`.

use crate::error::Result;
use crate::nn::{Binding, Conv2d, Ctx, Init, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{Real, Var};

/// Intermediate features of one gated forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateOutputs {
    pub f_g: Var,
    pub f_r: Option<Var>,
    pub f_o: Var,
}

/// The gated shortcut:
///
/// ```text
/// f_g = σ(W_g * [f_c, f_i])
/// f_r = W_r * [f_c, f_i]
/// f_o = W_o * (f_g ⊗ f_c + (1 − f_g) ⊗ f_r)
/// ```
///
/// with `W_g`, `W_r`, `W_o` 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct GatedShortcut<T> {
    pub w_g: Conv2d<T>,
    pub w_r: Conv2d<T>,
    pub w_o: Conv2d<T>,
}

impl<T: Real> GatedShortcut<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_i: usize,
        c_c: usize,
        c_o: usize,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let joint = c_c + c_i;
        Ok(Self {
            w_g: Conv2d::new(
                store,
                &format!("{name}.Wg"),
                joint,
                c_o,
                1,
                Init::GlorotUniform,
                sn,
                rng,
            )?,
            w_r: Conv2d::new(
                store,
                &format!("{name}.Wr"),
                joint,
                c_o,
                1,
                Init::GlorotUniform,
                sn,
                rng,
            )?,
            w_o: Conv2d::new(
                store,
                &format!("{name}.Wo"),
                c_o,
                c_o,
                1,
                Init::GlorotUniform,
                sn,
                rng,
            )?,
        })
    }

    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        f_c: Var,
    ) -> Result<GateOutputs> {
        let joint = ctx.tape.concat_channels(f_c, f_i)?;
        let logits = self.w_g.forward(ctx, bind, joint)?;
        let f_g = ctx.tape.sigmoid(logits);
        let f_r = self.w_r.forward(ctx, bind, joint)?;
        let kept = ctx.tape.mul(f_g, f_c)?;
        let closed = ctx.tape.one_minus(f_g);
        let refined = ctx.tape.mul(closed, f_r)?;
        let blend = ctx.tape.add(kept, refined)?;
        let f_o = self.w_o.forward(ctx, bind, blend)?;
        Ok(GateOutputs {
            f_g,
            f_r: Some(f_r),
            f_o,
        })
    }
}

/// How the gate mixes the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMix {
    /// `f_g ⊗ f_i + (1 − f_g) ⊗ f_c`
    Exclusive,
    /// `f_g ⊗ f_i + f_c`
    ShortcutOnly,
}

/// Exclusive gating (EGS) and shortcut-only gating (SOG), optionally
/// followed by a 1×1 output convolution.
#[derive(Debug, Clone)]
pub struct GatingShortcut<T> {
    pub mix: GateMix,
    pub gate: Conv2d<T>,
    /// Aligns `f_i` to `c_c` channels when they differ.
    pub align: Option<Conv2d<T>>,
    pub out: Option<Conv2d<T>>,
}

impl<T: Real> GatingShortcut<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        mix: GateMix,
        c_i: usize,
        c_c: usize,
        c_o: Option<usize>,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let gate = Conv2d::new(
            store,
            &format!("{name}.Wg"),
            c_c + c_i,
            c_c,
            1,
            Init::GlorotUniform,
            sn,
            rng,
        )?;
        let align = if c_i != c_c {
            Some(Conv2d::new(
                store,
                &format!("{name}.align"),
                c_i,
                c_c,
                1,
                Init::GlorotUniform,
                sn,
                rng,
            )?)
        } else {
            None
        };
        let out = match c_o {
            Some(c_o) => Some(Conv2d::new(
                store,
                &format!("{name}.Wo"),
                c_c,
                c_o,
                1,
                Init::GlorotUniform,
                sn,
                rng,
            )?),
            None => None,
        };
        Ok(Self {
            mix,
            gate,
            align,
            out,
        })
    }

    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        f_i: Var,
        f_c: Var,
    ) -> Result<GateOutputs> {
        let joint = ctx.tape.concat_channels(f_c, f_i)?;
        let logits = self.gate.forward(ctx, bind, joint)?;
        let f_g = ctx.tape.sigmoid(logits);
        let skip = match &mut self.align {
            Some(conv) => conv.forward(ctx, bind, f_i)?,
            None => f_i,
        };
        let gated_skip = ctx.tape.mul(f_g, skip)?;
        let main = match self.mix {
            GateMix::Exclusive => {
                let closed = ctx.tape.one_minus(f_g);
                ctx.tape.mul(closed, f_c)?
            }
            GateMix::ShortcutOnly => f_c,
        };
        let mixed = ctx.tape.add(gated_skip, main)?;
        let f_o = match &mut self.out {
            Some(conv) => conv.forward(ctx, bind, mixed)?,
            None => mixed,
        };
        Ok(GateOutputs {
            f_g,
            f_r: None,
            f_o,
        })
    }
}

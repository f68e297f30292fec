use super::{Binding, Buffer, Ctx, Dense, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn buffers<'a>(&'a mut self, name: &str, out: &mut Vec<Buffer<'a, T>>) {
        out.push(Buffer::new(
            format!("{name}.running_mean"),
            &mut self.running_mean,
        ));
        out.push(Buffer::new(
            format!("{name}.running_var"),
            &mut self.running_var,
        ));
    }

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(BN_MOMENTUM),
            eps: T::of(BN_EPS),
        }
    }

    /// Standardizes `x` per channel: batch statistics in train mode, running
    /// statistics in eval mode.
    pub fn standardize(&mut self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.running_mean.len() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: vec![self.running_mean.len()],
            });
        }
        if !ctx.train {
            let scale: Vec<T> = self
                .running_var
                .iter()
                .map(|&v| (v + self.eps).sqrt().recip())
                .collect();
            let shift: Vec<T> = self
                .running_mean
                .iter()
                .zip(&scale)
                .map(|(&m, &s)| -m * s)
                .collect();
            let c = scale.len();
            let scale = ctx.tape.constant(Tensor::new([c], scale)?);
            let shift = ctx.tape.constant(Tensor::new([c], shift)?);
            return ctx.tape.channel_affine(x, scale, shift);
        }
        let count: usize = shape[0] * shape[2..].iter().product::<usize>();
        if count < 2 {
            return Err(Error::SingletonBatch);
        }
        let (out, mean, var) = ctx.tape.standardize(x, self.eps)?;
        if ctx.update_state {
            let m = self.momentum;
            let unbias = T::of(count as f64 / (count - 1) as f64);
            for (r, &b) in self.running_mean.iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.running_var.iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
        Ok(out)
    }
}

/// Batch normalization with an optional learned per-channel affine.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub name: String,
    pub state: BatchNormState<T>,
    pub gain: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        affine: bool,
    ) -> Result<Self> {
        let (gain, bias) = if affine {
            (
                Some(store.add(format!("{name}.gain"), Tensor::ones([channels]))?),
                Some(store.add(format!("{name}.bias"), Tensor::zeros([channels]))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            name: name.to_string(),
            state: BatchNormState::new(channels),
            gain,
            bias,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        self.state.buffers(&self.name, out);
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, bind: &Binding, x: Var) -> Result<Var> {
        let xhat = self.state.standardize(ctx, x)?;
        match (self.gain, self.bias) {
            (Some(g), Some(b)) => ctx.tape.channel_affine(xhat, bind[g], bind[b]),
            _ => Ok(xhat),
        }
    }
}

/// Dense maps from a conditioning vector to per-channel `(Δγ, β)`; the
/// applied gain is `1 + Δγ`.
#[derive(Debug, Clone)]
pub struct ConditionalAffineSource<T> {
    pub gain: Dense<T>,
    pub bias: Dense<T>,
}

impl<T: Real> ConditionalAffineSource<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cond_dim: usize,
        channels: usize,
        init: Init,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Ok(Self {
            gain: Dense::new(
                store,
                &format!("{name}.gain"),
                cond_dim,
                channels,
                true,
                init,
                false,
                rng,
            )?,
            bias: Dense::new(
                store,
                &format!("{name}.bias"),
                cond_dim,
                channels,
                true,
                init,
                false,
                rng,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gain.d_out
    }

    /// `(γ, β)`, each `[b, channels]`.
    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let dg = self.gain.forward(ctx, bind, cond)?;
        let gamma = ctx.tape.add_scalar(dg, T::one());
        let beta = self.bias.forward(ctx, bind, cond)?;
        Ok((gamma, beta))
    }
}

/// Batch norm whose affine parameters are predicted per sample from a
/// conditioning vector (noise, or noise plus class embedding).
#[derive(Debug, Clone)]
pub struct ConditionalBatchNorm<T> {
    pub name: String,
    pub state: BatchNormState<T>,
    pub source: ConditionalAffineSource<T>,
}

impl<T: Real> ConditionalBatchNorm<T> {
    /// The source starts at zero so the layer begins as plain standardization.
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_dim: usize,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            state: BatchNormState::new(channels),
            source: ConditionalAffineSource::new(
                store,
                name,
                cond_dim,
                channels,
                Init::Zeros,
                rng,
            )?,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        self.state.buffers(&self.name, out);
    }

    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        let (xb, cb) = (ctx.tape.shape(x)[0], ctx.tape.shape(cond)[0]);
        if xb != cb {
            return Err(Error::ShapeMismatch {
                op: "conditional_batch_norm",
                lhs: ctx.tape.shape(x).to_vec(),
                rhs: ctx.tape.shape(cond).to_vec(),
            });
        }
        let xhat = self.state.standardize(ctx, x)?;
        let (gamma, beta) = self.source.forward(ctx, bind, cond)?;
        ctx.tape.channel_affine(xhat, gamma, beta)
    }
}

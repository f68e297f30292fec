//! Generator and discriminator assembly.
//!
//! The generator is `FC → reshape 4×4 → up-blocks → BN → ReLU → 3×3 conv →
//! tanh`; the discriminator is a stack of down-blocks followed by `ReLU →
//! global sum → dense 1`, with an optional projection term for class labels.

use crate::blocks::{BlockConfig, DiscBlock, GenBlock, ShortcutKind, ShortcutNorm};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Binding, Buffer, Conv2d, Ctx, Dense, Embedding, Init, ParamStore, SnLayer,
};
use crate::rng::CounterRng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// RNG streams used for weight initialization.
const GENERATOR_STREAM: u64 = 101;
const DISCRIMINATOR_STREAM: u64 = 102;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub z_dim: usize,
    /// Channels of the 4×4 map produced by the FC layer.
    pub stem: usize,
    /// Output channels of each up-block; `resolution = 4 · 2^len`.
    pub widths: Vec<usize>,
    pub shortcut: ShortcutKind,
    /// Number of classes for a class-conditional generator.
    pub classes: Option<usize>,
    pub embed_dim: usize,
    /// Block BN affine predicted from the conditioning vector.
    pub conditional_bn: bool,
    pub shortcut_norm: ShortcutNorm,
    pub sn: bool,
}

impl GeneratorSpec {
    /// The published layouts: 32 → three 256-wide blocks, 128 → five blocks
    /// `[512, 512, 256, 128, 64]`.
    pub fn standard(resolution: usize, shortcut: ShortcutKind) -> Result<Self> {
        let (stem, widths) = match resolution {
            32 => (256, vec![256; 3]),
            128 => (512, vec![512, 512, 256, 128, 64]),
            r => return Err(Error::UnsupportedResolution(r)),
        };
        Ok(Self {
            resolution,
            z_dim: 128,
            stem,
            widths,
            shortcut,
            classes: None,
            embed_dim: 128,
            conditional_bn: true,
            shortcut_norm: ShortcutNorm::Plain,
            sn: false,
        })
    }

    /// Uniform-width generator for small resolutions (8, 16, 32, ...).
    pub fn scaled(resolution: usize, width: usize, shortcut: ShortcutKind) -> Result<Self> {
        let blocks = up_blocks(resolution)?;
        Ok(Self {
            stem: width,
            widths: vec![width; blocks],
            resolution,
            ..Self::standard(32, shortcut)?
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.z_dim + self.classes.map_or(0, |_| self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if up_blocks(self.resolution)? != self.widths.len() {
            return Err(Error::Spec(format!(
                "resolution {} needs {} up-blocks, got {}",
                self.resolution,
                up_blocks(self.resolution)?,
                self.widths.len()
            )));
        }
        if self.z_dim == 0 || self.stem == 0 || self.widths.contains(&0) {
            return Err(Error::Spec(
                "generator widths and z_dim must be positive".into(),
            ));
        }
        if self.classes == Some(0) {
            return Err(Error::Spec("class count must be positive".into()));
        }
        if self.classes.is_some() && !self.conditional_bn {
            return Err(Error::Spec(
                "class-conditional generator requires conditional BN".into(),
            ));
        }
        Ok(())
    }
}

/// Number of 2× up-blocks from 4×4 to `resolution`.
fn up_blocks(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::UnsupportedResolution(resolution));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscLayer {
    pub width: usize,
    pub down: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    pub blocks: Vec<DiscLayer>,
    pub sn: bool,
    /// Classes for the projection term.
    pub classes: Option<usize>,
}

impl DiscriminatorSpec {
    /// 32 → `[down128, down128, 128, 128]`;
    /// 128 → `[down64, down128, down256, down512, down512, 512]`.
    pub fn standard(resolution: usize) -> Result<Self> {
        let layout: &[(usize, bool)] = match resolution {
            32 => &[(128, true), (128, true), (128, false), (128, false)],
            128 => &[
                (64, true),
                (128, true),
                (256, true),
                (512, true),
                (512, true),
                (512, false),
            ],
            r => return Err(Error::UnsupportedResolution(r)),
        };
        Ok(Self {
            resolution,
            blocks: layout
                .iter()
                .map(|&(width, down)| DiscLayer { width, down })
                .collect(),
            sn: true,
            classes: None,
        })
    }

    /// The 32×32 layout at a uniform width, for small resolutions.
    pub fn scaled(resolution: usize, width: usize) -> Result<Self> {
        up_blocks(resolution)?;
        let mut spec = Self::standard(32)?;
        spec.resolution = resolution;
        for b in &mut spec.blocks {
            b.width = width;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.width == 0) {
            return Err(Error::Spec(
                "discriminator needs at least one block of positive width".into(),
            ));
        }
        let downs = self.blocks.iter().filter(|b| b.down).count();
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << downs) {
            return Err(Error::UnsupportedResolution(self.resolution));
        }
        if self.classes == Some(0) {
            return Err(Error::Spec("class count must be positive".into()));
        }
        Ok(())
    }
}

/// Shared surface of both networks: named parameters plus the non-trainable
/// buffers that a checkpoint has to carry.
pub trait Model<T: Real> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// BN running statistics and SN estimates, in a fixed order.
    fn buffers(&mut self) -> Vec<Buffer<'_, T>>;
    fn sn_layers(&mut self) -> Vec<SnLayer<'_, T>>;

    fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Parameter counts grouped by layer (parameter name without its last
    /// component), in registration order.
    fn layer_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params().iter() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match out.last_mut() {
                Some((name, n)) if name == layer => *n += p.value.len(),
                _ => out.push((layer.to_string(), p.value.len())),
            }
        }
        out
    }

    /// Advances every spectral-norm estimate `iters` times against the
    /// current weights without running a forward pass.
    fn warm_up_sn(&mut self, iters: usize) {
        let weights: Vec<Tensor<T>> = {
            let ids: Vec<_> = self.sn_layers().iter().map(|l| l.weight).collect();
            ids.into_iter()
                .map(|id| self.params().get(id).value.clone())
                .collect()
        };
        for (layer, w) in self.sn_layers().into_iter().zip(&weights) {
            for _ in 0..iters {
                layer.state.power_iterate(w);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<T>,
    pub fc: Dense<T>,
    pub blocks: Vec<GenBlock<T>>,
    pub bn: BatchNorm<T>,
    pub out: Conv2d<T>,
    pub embed: Option<Embedding<T>>,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = CounterRng::new(seed, GENERATOR_STREAM);
        let mut params = ParamStore::new();
        let store = &mut params;
        let g = Init::GlorotUniform;
        let fc = Dense::new(
            store,
            "g.fc",
            spec.z_dim,
            16 * spec.stem,
            true,
            g,
            spec.sn,
            &mut rng,
        )?;
        let mut blocks = Vec::with_capacity(spec.widths.len());
        let mut c_i = spec.stem;
        for (k, &c_o) in spec.widths.iter().enumerate() {
            let cfg = BlockConfig {
                conditional: spec.conditional_bn,
                shortcut_norm: spec.shortcut_norm,
                ..BlockConfig::up(c_i, c_o, spec.shortcut)
            };
            let name = format!("g.block{}", k + 1);
            blocks.push(GenBlock::new(
                store,
                &name,
                cfg,
                spec.cond_dim(),
                spec.sn,
                &mut rng,
            )?);
            c_i = c_o;
        }
        let bn = BatchNorm::new(store, "g.bn", c_i, true)?;
        let out = Conv2d::new(store, "g.out", c_i, 3, 3, g, spec.sn, &mut rng)?;
        // Created last so the remaining weights match the unconditional
        // generator built from the same seed.
        let embed = match spec.classes {
            Some(k) => Some(Embedding::new(
                store,
                "g.embed",
                k,
                spec.embed_dim,
                g,
                spec.sn,
                &mut rng,
            )?),
            None => None,
        };
        Ok(Self {
            spec,
            params,
            fc,
            blocks,
            bn,
            out,
            embed,
        })
    }

    /// `z: [b, z_dim]` → images `[b, 3, res, res]` in `[−1, 1]`.
    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        z: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let zs = ctx.tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.spec.z_dim {
            return Err(Error::ShapeMismatch {
                op: "generator",
                lhs: zs,
                rhs: vec![self.spec.z_dim],
            });
        }
        let b = zs[0];
        let cond = match (&mut self.embed, labels) {
            (Some(embed), Some(labels)) => {
                check_labels(labels, b)?;
                let y = embed.forward(ctx, bind, labels)?;
                ctx.tape.concat_channels(z, y)?
            }
            (None, None) => z,
            (Some(_), None) => {
                return Err(Error::Spec("conditional generator needs labels".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Spec("unconditional generator given labels".into()))
            }
        };
        let h = self.fc.forward(ctx, bind, z)?;
        let mut h = ctx.tape.reshape(h, [b, self.spec.stem, 4, 4])?;
        for block in &mut self.blocks {
            h = block.forward(ctx, bind, h, Some(cond))?;
        }
        let h = self.bn.forward(ctx, bind, h)?;
        let h = ctx.tape.relu(h);
        let h = self.out.forward(ctx, bind, h)?;
        Ok(ctx.tape.tanh(h))
    }

    /// Runs a forward on a fresh tape without touching BN or SN state.
    /// `train` selects batch statistics; otherwise running statistics.
    pub fn generate(
        &mut self,
        z: &Tensor<T>,
        labels: Option<&[usize]>,
        train: bool,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let z = tape.constant(z.clone());
        let mut ctx = if train {
            Ctx::frozen(&mut tape)
        } else {
            Ctx::eval(&mut tape)
        };
        let x = self.forward(&mut ctx, &bind, z, labels)?;
        Ok(tape.value(x).clone())
    }
}

fn check_labels(labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![labels.len()],
            rhs: vec![batch],
        });
    }
    Ok(())
}

impl<T: Real> Model<T> for Generator<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn buffers(&mut self) -> Vec<Buffer<'_, T>> {
        let mut out = Vec::new();
        self.fc.buffers(&mut out);
        for b in &mut self.blocks {
            b.buffers(&mut out);
        }
        self.bn.buffers(&mut out);
        self.out.buffers(&mut out);
        if let Some(e) = &mut self.embed {
            e.buffers(&mut out);
        }
        out
    }

    fn sn_layers(&mut self) -> Vec<SnLayer<'_, T>> {
        let mut out: Vec<SnLayer<'_, T>> = self.fc.sn_layer().into_iter().collect();
        for b in &mut self.blocks {
            out.extend(b.convs_mut().into_iter().filter_map(|c| c.sn_layer()));
        }
        out.extend(self.out.sn_layer());
        if let Some(e) = &mut self.embed {
            out.extend(e.sn_layer());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore<T>,
    pub blocks: Vec<DiscBlock<T>>,
    pub dense: Dense<T>,
    pub embed: Option<Embedding<T>>,
}

/// Discriminator logit split into its unconditional part and the projection
/// term `⟨embed(y), φ(x)⟩`.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    pub base: Var,
    pub projection: Option<Var>,
    pub logit: Var,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = CounterRng::new(seed, DISCRIMINATOR_STREAM);
        let mut params = ParamStore::new();
        let store = &mut params;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut c_i = 3;
        for (k, layer) in spec.blocks.iter().enumerate() {
            let name = format!("d.block{}", k + 1);
            blocks.push(DiscBlock::new(
                store,
                &name,
                c_i,
                layer.width,
                layer.down,
                k > 0,
                spec.sn,
                &mut rng,
            )?);
            c_i = layer.width;
        }
        let g = Init::GlorotUniform;
        let dense = Dense::new(store, "d.dense", c_i, 1, true, g, spec.sn, &mut rng)?;
        let embed = match spec.classes {
            Some(k) => Some(Embedding::new(
                store, "d.embed", k, c_i, g, spec.sn, &mut rng,
            )?),
            None => None,
        };
        Ok(Self {
            spec,
            params,
            blocks,
            dense,
            embed,
        })
    }

    /// Images `[b, 3, res, res]` → logits `[b, 1]`.
    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        x: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        Ok(self.forward_parts(ctx, bind, x, labels)?.logit)
    }

    pub fn forward_parts(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        x: Var,
        labels: Option<&[usize]>,
    ) -> Result<DiscOutput> {
        let xs = ctx.tape.shape(x).to_vec();
        let res = self.spec.resolution;
        if xs.len() != 4 || xs[1..] != [3, res, res] {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                lhs: xs,
                rhs: vec![3, res, res],
            });
        }
        let mut h = x;
        for block in &mut self.blocks {
            h = block.forward(ctx, bind, h)?;
        }
        let h = ctx.tape.relu(h);
        let phi = ctx.tape.global_sum_pool(h)?;
        let base = self.dense.forward(ctx, bind, phi)?;
        let projection = match (&mut self.embed, labels) {
            (Some(embed), Some(labels)) => {
                check_labels(labels, xs[0])?;
                let e = embed.forward(ctx, bind, labels)?;
                let prod = ctx.tape.mul(e, phi)?;
                Some(ctx.tape.row_sum(prod)?)
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Spec("projection discriminator needs labels".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Spec(
                    "unconditional discriminator given labels".into(),
                ))
            }
        };
        let logit = match projection {
            Some(p) => ctx.tape.add(base, p)?,
            None => base,
        };
        Ok(DiscOutput {
            base,
            projection,
            logit,
        })
    }
}

impl<T: Real> Model<T> for Discriminator<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn buffers(&mut self) -> Vec<Buffer<'_, T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            b.buffers(&mut out);
        }
        self.dense.buffers(&mut out);
        if let Some(e) = &mut self.embed {
            e.buffers(&mut out);
        }
        out
    }

    fn sn_layers(&mut self) -> Vec<SnLayer<'_, T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.convs_mut().into_iter().filter_map(|c| c.sn_layer()));
        }
        out.extend(self.dense.sn_layer());
        if let Some(e) = &mut self.embed {
            out.extend(e.sn_layer());
        }
        out
    }
}

#[cfg(test)]
mod tests;

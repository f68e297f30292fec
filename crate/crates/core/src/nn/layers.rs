use super::{Binding, Buffer, Ctx, Init, ParamId, ParamStore, SpectralNormState};
use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor::kernels::Padding;
use crate::tensor::{Real, Var};

fn weight<T: Real>(
    ctx: &mut Ctx<'_, T>,
    bind: &Binding,
    id: ParamId,
    sn: &mut Option<SpectralNormState<T>>,
) -> Result<Var> {
    match sn {
        Some(state) => state.normalize(ctx, bind[id]),
        None => Ok(bind[id]),
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn: Option<SpectralNormState<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Real> Dense<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let w = init.tensor(&[d_in, d_out], d_in, d_out, rng);
        let sn = sn.then(|| SpectralNormState::for_weight(&w, d_in, d_out, rng));
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                crate::tensor::Tensor::zeros([d_out]),
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            sn,
            d_in,
            d_out,
        })
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, bind: &Binding, x: Var) -> Result<Var> {
        let w = weight(ctx, bind, self.weight, &mut self.sn)?;
        super::dense(ctx.tape, x, w, self.bias.map(|b| bind[b]))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub sn: Option<SpectralNormState<T>>,
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        init: Init,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let taps = size * size;
        let k = init.tensor(&[c_out, c_in, size, size], c_in * taps, c_out * taps, rng);
        let sn = sn.then(|| SpectralNormState::for_weight(&k, c_out, c_in * taps, rng));
        let kernel = store.add(format!("{name}.kernel"), k)?;
        let bias = Some(store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::zeros([c_out]),
        )?);
        Ok(Self {
            name: name.to_string(),
            kernel,
            bias,
            sn,
            c_in,
            c_out,
            size,
        })
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, bind: &Binding, x: Var) -> Result<Var> {
        let k = weight(ctx, bind, self.kernel, &mut self.sn)?;
        ctx.tape
            .conv2d(x, k, self.bias.map(|b| bind[b]), Padding::Same)
    }
}

/// Class embedding table `[classes, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub name: String,
    pub table: ParamId,
    pub sn: Option<SpectralNormState<T>>,
    pub classes: usize,
    pub dim: usize,
}

impl<T: Real> Embedding<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        classes: usize,
        dim: usize,
        init: Init,
        sn: bool,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let t = init.tensor(&[classes, dim], classes, dim, rng);
        let sn = sn.then(|| SpectralNormState::for_weight(&t, classes, dim, rng));
        let table = store.add(format!("{name}.table"), t)?;
        Ok(Self {
            name: name.to_string(),
            table,
            sn,
            classes,
            dim,
        })
    }

    pub fn forward(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        bind: &Binding,
        labels: &[usize],
    ) -> Result<Var> {
        let t = weight(ctx, bind, self.table, &mut self.sn)?;
        super::embed_label(ctx.tape, labels, t)
    }
}

/// A weight under spectral normalization together with its estimator.
pub struct SnLayer<'a, T> {
    pub name: &'a str,
    pub weight: ParamId,
    pub state: &'a mut SpectralNormState<T>,
}

impl<T: Real> Dense<T> {
    pub fn sn_layer(&mut self) -> Option<SnLayer<'_, T>> {
        let (name, weight) = (&self.name, self.weight);
        self.sn.as_mut().map(|state| SnLayer {
            name,
            weight,
            state,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        if let Some(sn) = &mut self.sn {
            sn.buffers(&self.name, out);
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn sn_layer(&mut self) -> Option<SnLayer<'_, T>> {
        let (name, weight) = (&self.name, self.kernel);
        self.sn.as_mut().map(|state| SnLayer {
            name,
            weight,
            state,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        if let Some(sn) = &mut self.sn {
            sn.buffers(&self.name, out);
        }
    }
}

impl<T: Real> Embedding<T> {
    pub fn sn_layer(&mut self) -> Option<SnLayer<'_, T>> {
        let (name, weight) = (&self.name, self.table);
        self.sn.as_mut().map(|state| SnLayer {
            name,
            weight,
            state,
        })
    }

    pub fn buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        if let Some(sn) = &mut self.sn {
            sn.buffers(&self.name, out);
        }
    }
}

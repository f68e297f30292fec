use super::{Buffer, Ctx};
use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor, Var};

/// Lower bound on the singular-value estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent power-iteration estimate of the leading singular pair of a
/// weight viewed as a `[rows, cols]` matrix (rows = output units).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub iterations: usize,
    /// Estimate used by the most recent forward.
    pub sigma: T,
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Normalizes `x` in place; keeps `prev` when `x` is numerically zero so the
/// estimate stays a unit vector.
fn normalize_into<T: Real>(x: Vec<T>, prev: &mut [T]) {
    let n = norm(&x);
    if n > T::of(SIGMA_FLOOR) {
        for (p, a) in prev.iter_mut().zip(x) {
            *p = a / n;
        }
    }
}

impl<T: Real> SpectralNormState<T> {
    pub fn new(rows: usize, cols: usize, rng: &mut CounterRng) -> Self {
        let mut random_unit = |n: usize| {
            let mut raw = vec![0.0; n];
            rng.fill_normal(&mut raw);
            let s = raw
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(SIGMA_FLOOR);
            raw.into_iter().map(|a| T::of(a / s)).collect::<Vec<_>>()
        };
        let u = random_unit(rows);
        let v = random_unit(cols);
        Self {
            u,
            v,
            iterations: 1,
            sigma: T::one(),
        }
    }

    /// A random start advanced once against `w`, so that `uᵀWv > 0` even
    /// before the first state-updating forward.
    pub fn for_weight(w: &Tensor<T>, rows: usize, cols: usize, rng: &mut CounterRng) -> Self {
        let mut s = Self::new(rows, cols, rng);
        s.power_iterate(w);
        s
    }

    pub fn buffers<'a>(&'a mut self, layer: &str, out: &mut Vec<Buffer<'a, T>>) {
        out.push(Buffer::new(format!("{layer}.sn_u"), &mut self.u));
        out.push(Buffer::new(format!("{layer}.sn_v"), &mut self.v));
    }

    /// One or more power-iteration updates `v ← Wᵀu/‖·‖, u ← Wv/‖·‖`.
    pub fn power_iterate(&mut self, w: &Tensor<T>) {
        let (rows, cols) = (self.u.len(), self.v.len());
        debug_assert_eq!(rows * cols, w.len());
        let m = w.data();
        for _ in 0..self.iterations {
            let mut wt_u = vec![T::zero(); cols];
            T::gemm(1, rows, cols, &self.u, false, m, false, &mut wt_u, false);
            normalize_into(wt_u, &mut self.v);
            let mut w_v = vec![T::zero(); rows];
            T::gemm(rows, cols, 1, m, false, &self.v, false, &mut w_v, false);
            normalize_into(w_v, &mut self.u);
        }
    }

    /// Rank-one `u vᵀ` laid out like the weight.
    fn direction(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let mut d = Vec::with_capacity(self.u.len() * self.v.len());
        for &a in &self.u {
            d.extend(self.v.iter().map(|&b| a * b));
        }
        Tensor::new(shape, d)
    }

    /// Returns `W / σ̂`, `σ̂ = uᵀWv`, advancing the estimate first when the
    /// context allows state updates. Gradients flow into `W` through both
    /// the numerator and `σ̂`.
    pub fn normalize(&mut self, ctx: &mut Ctx<'_, T>, w: Var) -> Result<Var> {
        if ctx.update_state {
            self.power_iterate(ctx.tape.value(w));
        }
        let direction = self.direction(ctx.tape.shape(w))?;
        let (out, sigma) = ctx.tape.spectral_div(w, direction, T::of(SIGMA_FLOOR))?;
        self.sigma = sigma;
        Ok(out)
    }
}

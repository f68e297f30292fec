use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first and second moments of Adam, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter from its stored `grad`.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1, b2, c1, c2) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2));
    let (lr, eps, one) = (T::of(lr), T::of(state.eps), T::one());
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let mi = &mut m.data_mut()[i];
            let vi = &mut v.data_mut()[i];
            *mi = b1 * *mi + (one - b1) * g[i];
            *vi = b2 * *vi + (one - b2) * g[i] * g[i];
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        s.iter_mut().next().unwrap().grad = Tensor::new([g.len()], g.to_vec()).unwrap();
    }

    /// Plain scalar Adam, written independently of the tensor code.
    fn reference(mut w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        w
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut s = store(&[0.5, -1.0]);
        let mut st = AdamState::new(&s, 0.0, 0.9);
        for _ in 0..3 {
            adam_step(&mut s, &mut st, 0.1);
        }
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5, -1.0]);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0]);
        set_grad(&mut s, &[1.0]);
        let mut st = AdamState::new(&s, 0.0, 0.9);
        adam_step(&mut s, &mut st, 2e-4);
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w + 2e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn matches_scalar_reference() {
        for (b1, b2) in [(0.0, 0.9), (0.5, 0.999)] {
            let grads = [0.3, 0.3, -1.2, 0.05, 2.0];
            let mut s = store(&[1.0, 1.0]);
            let mut st = AdamState::new(&s, b1, b2);
            for g in grads {
                set_grad(&mut s, &[g, g]);
                adam_step(&mut s, &mut st, 1e-2);
            }
            let expect = reference(1.0, &grads, 1e-2, b1, b2);
            for &w in s.iter().next().unwrap().value.data() {
                assert!((w - expect).abs() < 1e-14, "{w} vs {expect}");
            }
            assert!(st.v[0].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn quadratic_loss_decreases_after_warm_up() {
        // L = (w − 3)², 200 steps at β = (0, 0.9)
        let mut s = store(&[0.0]);
        let mut st = AdamState::new(&s, 0.0, 0.9);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let w = s.iter().next().unwrap().value.data()[0];
            losses.push((w - 3.0).powi(2));
            set_grad(&mut s, &[2.0 * (w - 3.0)]);
            adam_step(&mut s, &mut st, 1e-2);
        }
        for pair in losses[5..].windows(2) {
            assert!(pair[1] < pair[0], "{pair:?}");
        }
    }
}

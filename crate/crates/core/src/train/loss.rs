//! Adversarial objectives, on plain slices (for reporting and oracles) and on
//! tape variables (for training).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Floor inside the logarithms of the standard loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Hinge,
    Standard,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::Standard => "standard",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "standard" => Ok(LossKind::Standard),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(L_D, L_G)` with `L_D = E[max(0, 1 − d_real)] + E[max(0, 1 + d_fake)]`
/// and `L_G = −E[d_fake]`, on raw logits.
pub fn hinge_loss(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let l_d = mean(d_real.iter().map(|&r| (1.0 - r).max(0.0)))
        + mean(d_fake.iter().map(|&f| (1.0 + f).max(0.0)));
    let l_g = -mean(d_fake.iter().copied());
    (l_d, l_g)
}

/// `(L_D, L_G)` of the original minimax objective with the non-saturating
/// generator loss; logits pass through a sigmoid first.
pub fn standard_loss(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let log = |p: f64| p.max(LOG_FLOOR).ln();
    let l_d = -mean(d_real.iter().map(|&r| log(sigmoid(r))))
        - mean(d_fake.iter().map(|&f| log(1.0 - sigmoid(f))));
    let l_g = -mean(d_fake.iter().map(|&f| log(sigmoid(f))));
    (l_d, l_g)
}

pub fn loss(kind: LossKind, d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    match kind {
        LossKind::Hinge => hinge_loss(d_real, d_fake),
        LossKind::Standard => standard_loss(d_real, d_fake),
    }
}

/// Discriminator loss on tape logits `[b, 1]`.
pub fn d_loss<T: Real>(tape: &mut Tape<T>, kind: LossKind, real: Var, fake: Var) -> Result<Var> {
    let (a, b) = match kind {
        LossKind::Hinge => {
            let r = tape.one_minus(real);
            let f = tape.add_scalar(fake, T::one());
            (tape.relu(r), tape.relu(f))
        }
        LossKind::Standard => {
            let floor = T::of(LOG_FLOOR);
            let pr = tape.sigmoid(real);
            let pf = tape.sigmoid(fake);
            let qf = tape.one_minus(pf);
            let lr = tape.log_floor(pr, floor);
            let lf = tape.log_floor(qf, floor);
            (tape.scale(lr, -T::one()), tape.scale(lf, -T::one()))
        }
    };
    let (a, b) = (tape.mean(a), tape.mean(b));
    tape.add(a, b)
}

/// Generator loss on tape logits of generated samples.
pub fn g_loss<T: Real>(tape: &mut Tape<T>, kind: LossKind, fake: Var) -> Var {
    let per_sample = match kind {
        LossKind::Hinge => fake,
        LossKind::Standard => {
            let p = tape.sigmoid(fake);
            tape.log_floor(p, T::of(LOG_FLOOR))
        }
    };
    let m = tape.mean(per_sample);
    tape.scale(m, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hinge_hand_values() {
        assert_eq!(hinge_loss(&[1.0], &[-1.0]).0, 0.0);
        assert_eq!(hinge_loss(&[0.0], &[0.0]).0, 2.0);
        assert_eq!(hinge_loss(&[0.0], &[0.5]).1, -0.5);
    }

    #[test]
    fn standard_hand_values() {
        let (l_d, _) = standard_loss(&[0.0, 0.0], &[0.0]);
        assert!((l_d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let (l_d, l_g) = standard_loss(&[40.0], &[-40.0]);
        assert!(l_d < 1e-12);
        assert!(standard_loss(&[0.0], &[40.0]).1 < 1e-12);
        assert!((l_g + LOG_FLOOR.ln()).abs() < 1e-9);
        // fully saturated logits hit the floor instead of producing inf
        let (l_d, _) = standard_loss(&[-800.0], &[0.0]);
        assert!((l_d - (-LOG_FLOOR.ln() + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn tape_losses_match_slice_versions() {
        let real = [0.3, -1.2, 2.0];
        let fake = [-0.4, 1.5, 0.1];
        for kind in [LossKind::Hinge, LossKind::Standard] {
            let mut tape = Tape::<f64>::new();
            let r = tape.leaf(Tensor::from_f64([3, 1], &real).unwrap());
            let f = tape.leaf(Tensor::from_f64([3, 1], &fake).unwrap());
            let ld = d_loss(&mut tape, kind, r, f).unwrap();
            let lg = g_loss(&mut tape, kind, f);
            let (ed, eg) = loss(kind, &real, &fake);
            assert!((tape.value(ld).item() - ed).abs() < 1e-12, "{kind}");
            assert!((tape.value(lg).item() - eg).abs() < 1e-12, "{kind}");
        }
    }
}

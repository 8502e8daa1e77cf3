//! Guidance losses and their analytic gradients.
//!
//! All gradients are taken with respect to the clean estimate `x0_hat`; the
//! noise prediction is treated as a constant. Losses are raw sums over the
//! governing masks, so any normalisation is folded into the guidance scale.

mod color;
mod fidelity;
mod smoothness;

pub use color::{color_transfer, color_transfer_with, loss_color, masked_moments, ColorSpace, TransferOptions};
pub use fidelity::loss_fidelity;
pub use smoothness::{edge_magnitude, loss_smoothness};

use std::fmt;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Which guidance terms are active at a timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// `t > T1`: fidelity + smoothness.
    Restoration,
    /// `t <= T1`: fidelity + smoothness + color.
    RestorationColor,
}

impl Stage {
    pub fn at(t: usize, t1: usize) -> Self {
        if t > t1 {
            Stage::Restoration
        } else {
            Stage::RestorationColor
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Restoration => "I",
            Stage::RestorationColor => "II",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A loss value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Term<S> {
    pub value: S,
    pub grad: ImageTensor<S>,
}

impl<S: Scalar> From<(S, ImageTensor<S>)> for Term<S> {
    fn from((value, grad): (S, ImageTensor<S>)) -> Self {
        Self { value, grad }
    }
}

/// Inputs to [`assemble_gradient`].
#[derive(Debug, Clone)]
pub struct LossParts<S> {
    pub fidelity: Term<S>,
    pub smoothness: Term<S>,
    /// `None` until the color target exists.
    pub color: Option<Term<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<S> {
    pub stage: Stage,
    pub l1: S,
    pub l2: S,
    pub l3: S,
    pub l3_active: bool,
    /// L2 norms of each term's gradient (0 for inactive terms).
    pub grad_norms: [S; 3],
    /// Gradient of the active sum.
    pub grad: ImageTensor<S>,
}

/// Stage I: `grad = dL1 + dL2`; stage II adds `dL3` when present.
pub fn assemble_gradient<S: Scalar>(stage: Stage, parts: &LossParts<S>) -> Result<LossReport<S>> {
    let mut grad = parts.fidelity.grad.add(&parts.smoothness.grad)?;
    let (l3, g3, l3_active) = match (stage, &parts.color) {
        (Stage::RestorationColor, Some(term)) => {
            grad = grad.add(&term.grad)?;
            (term.value, term.grad.norm_l2(), true)
        }
        _ => (S::zero(), S::zero(), false),
    };
    Ok(LossReport {
        stage,
        l1: parts.fidelity.value,
        l2: parts.smoothness.value,
        l3,
        l3_active,
        grad_norms: [parts.fidelity.grad.norm_l2(), parts.smoothness.grad.norm_l2(), g3],
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_term(rng: &mut ChaCha8Rng) -> Term<f64> {
        Term {
            value: rng.random_range(0.0..5.0),
            grad: ImageTensor::from_fn(3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap(),
        }
    }

    #[test]
    fn stage_boundary() {
        assert_eq!(Stage::at(401, 400), Stage::Restoration);
        assert_eq!(Stage::at(400, 400), Stage::RestorationColor);
        assert_eq!(Stage::at(1, 0), Stage::Restoration);
    }

    #[test]
    fn stage_one_ignores_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = LossParts {
            fidelity: random_term(&mut rng),
            smoothness: random_term(&mut rng),
            color: Some(random_term(&mut rng)),
        };
        let r = assemble_gradient(Stage::Restoration, &parts).unwrap();
        assert!(!r.l3_active);
        assert_eq!(r.l3, 0.0);
        assert_eq!(r.grad_norms[2], 0.0);
        assert_eq!(r.grad, parts.fidelity.grad.add(&parts.smoothness.grad).unwrap());
    }

    #[test]
    fn all_zero_parts_give_zero_grad() {
        let zero = Term {
            value: 0.0,
            grad: ImageTensor::<f64>::zeros(1, 2, 2).unwrap(),
        };
        let parts = LossParts {
            fidelity: zero.clone(),
            smoothness: zero.clone(),
            color: Some(zero),
        };
        let r = assemble_gradient(Stage::RestorationColor, &parts).unwrap();
        assert!(r.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_two_sums_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts = LossParts {
            fidelity: random_term(&mut rng),
            smoothness: random_term(&mut rng),
            color: Some(random_term(&mut rng)),
        };
        let r = assemble_gradient(Stage::RestorationColor, &parts).unwrap();
        assert!(r.l3_active);
        let c = parts.color.as_ref().unwrap();
        for k in 0..r.grad.len() {
            let expected = parts.fidelity.grad.data()[k] + parts.smoothness.grad.data()[k] + c.grad.data()[k];
            assert!((r.grad.data()[k] - expected).abs() < 1e-15);
        }
    }
}

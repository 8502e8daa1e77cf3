//! The noise-prediction contract and its backends.
//!
//! Two closed-form backends (diagonal Gaussian and Gaussian mixture priors)
//! make the whole sampler exactly checkable; [`RemoteDenoiser`] forwards to an
//! external process speaking the `SSDN` wire protocol.

mod gaussian;
mod gmm;
mod remote;
pub mod server;
pub mod wire;

pub use gaussian::{gaussian_predict_eps, DiagonalGaussianModel, GaussianDenoiser};
pub use gmm::{gmm_predict_eps, GaussianMixtureModel, GmmDenoiser};
pub use remote::{Endpoint, RemoteDenoiser};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

/// Predicts the noise `eps` contained in `xt` at step `t`.
///
/// Implementations must return a tensor of the input's shape and be
/// deterministic for a fixed `(xt, t)`.
pub trait Denoiser<S: Scalar> {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>>;
}

impl<S: Scalar, D: Denoiser<S> + ?Sized> Denoiser<S> for &mut D {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>> {
        (**self).predict_eps(xt, t, sched)
    }
}

impl<S: Scalar, D: Denoiser<S> + ?Sized> Denoiser<S> for Box<D> {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>> {
        (**self).predict_eps(xt, t, sched)
    }
}

/// Converts a clean-image estimate into the matching noise prediction,
/// `(xt - sqrt(ab) x0) / sqrt(1 - ab)`; zeros when `ab = 1`.
pub(crate) fn eps_from_x0<S: Scalar>(
    xt: &ImageTensor<S>,
    x0: &ImageTensor<S>,
    alpha_bar: S,
) -> Result<ImageTensor<S>> {
    if alpha_bar >= S::one() {
        return Ok(xt.map(|_| S::zero()));
    }
    let a = alpha_bar.sqrt();
    let inv = S::one() / (S::one() - alpha_bar).sqrt();
    xt.zip_map(x0, |x, m| (x - a * m) * inv)
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

use super::{eps_from_x0, Denoiser};

/// Data prior `N(mean, diag(var))` over images.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussianModel<S> {
    mean: ImageTensor<S>,
    var: ImageTensor<S>,
}

impl<S: Scalar> DiagonalGaussianModel<S> {
    pub fn new(mean: ImageTensor<S>, var: ImageTensor<S>) -> Result<Self> {
        mean.ensure_same_shape(&var, "gaussian model mean/var")?;
        if var.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::invalid("gaussian model variances must be nonnegative"));
        }
        Ok(Self { mean, var })
    }

    /// Standard normal prior of the given shape.
    pub fn standard(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            ImageTensor::zeros(channels, height, width)?,
            ImageTensor::filled(channels, height, width, S::one())?,
        )
    }

    pub fn mean(&self) -> &ImageTensor<S> {
        &self.mean
    }

    pub fn var(&self) -> &ImageTensor<S> {
        &self.var
    }

    /// `E[x0 | xt] = mu + sqrt(ab) var / (ab var + 1 - ab) (xt - sqrt(ab) mu)`.
    pub fn posterior_mean(&self, xt: &ImageTensor<S>, alpha_bar: S) -> Result<ImageTensor<S>> {
        self.mean.ensure_same_shape(xt, "gaussian denoiser input")?;
        let a = alpha_bar.sqrt();
        let one_minus = S::one() - alpha_bar;
        let data = xt
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.var.data())
            .map(|((&x, &m), &v)| {
                let denom = alpha_bar * v + one_minus;
                if denom <= S::zero() {
                    // alpha_bar = 1 with a point-mass prior: xt is the data point
                    return if v > S::zero() { x } else { m };
                }
                m + a * v / denom * (x - a * m)
            })
            .collect();
        let (c, h, w) = xt.shape();
        Ok(ImageTensor::from_parts(c, h, w, data))
    }

    /// `log N(xt; sqrt(ab) mu, ab var + (1 - ab) I)`, accumulated in f64.
    pub fn log_likelihood(&self, xt: &ImageTensor<S>, alpha_bar: S) -> Result<f64> {
        self.mean.ensure_same_shape(xt, "gaussian likelihood input")?;
        let ab = alpha_bar.as_f64();
        let a = ab.sqrt();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut acc = 0.0;
        for ((&x, &m), &v) in xt.data().iter().zip(self.mean.data()).zip(self.var.data()) {
            let s2 = ab * v.as_f64() + (1.0 - ab);
            let d = x.as_f64() - a * m.as_f64();
            if s2 <= 0.0 {
                if d != 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                continue;
            }
            acc -= 0.5 * (ln_2pi + s2.ln() + d * d / s2);
        }
        Ok(acc)
    }
}

/// Exact noise prediction under a diagonal Gaussian prior.
///
/// Returns zeros at `alpha_bar = 1`, where the noise is undefined.
pub fn gaussian_predict_eps<S: Scalar>(
    model: &DiagonalGaussianModel<S>,
    xt: &ImageTensor<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ImageTensor<S>> {
    model.mean.ensure_same_shape(xt, "gaussian denoiser input")?;
    let ab = sched.alpha_bar(t);
    if ab >= S::one() {
        return Ok(xt.map(|_| S::zero()));
    }
    let x0 = model.posterior_mean(xt, ab)?;
    eps_from_x0(xt, &x0, ab)
}

/// [`Denoiser`] adapter over a [`DiagonalGaussianModel`].
#[derive(Debug, Clone)]
pub struct GaussianDenoiser<S> {
    pub model: DiagonalGaussianModel<S>,
}

impl<S: Scalar> GaussianDenoiser<S> {
    pub fn new(model: DiagonalGaussianModel<S>) -> Self {
        Self { model }
    }
}

impl<S: Scalar> Denoiser<S> for GaussianDenoiser<S> {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>> {
        gaussian_predict_eps(&self.model, xt, t, sched)
    }
}

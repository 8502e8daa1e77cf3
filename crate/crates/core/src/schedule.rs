//! Variance schedule and the closed-form DDPM quantities built on it.
//!
//! Timesteps run `t = 1..=T`; `alpha_bar(0) = 1` by convention, so the last
//! reverse step (`t = 1`) has zero posterior variance.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `{beta_t, alpha_t, alpha_bar_t}` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    betas: Vec<S>,
    /// Length `T + 1`, `alpha_bars[0] = 1`.
    alpha_bars: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Linear betas from `beta_start` to `beta_end`, endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(&betas)
    }

    /// The default linear schedule (`1e-4 -> 0.02`) stretched to `steps`
    /// steps so that `alpha_bar(T)` stays near its 1000-step value.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let k = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        Self::linear(
            steps,
            (DEFAULT_BETA_START * k).min(0.999),
            (DEFAULT_BETA_END * k).min(0.999),
        )
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        let mut acc = 1.0f64;
        alpha_bars.push(S::one());
        for b in betas {
            acc *= 1.0 - b;
            if !(acc > 0.0) {
                return Err(Error::invalid("alpha_bar underflowed to zero"));
            }
            alpha_bars.push(S::lit(acc));
        }
        Ok(Self {
            betas: betas.iter().map(|&b| S::lit(b)).collect(),
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// `beta_t`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> S {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        S::one() - self.betas[t - 1]
    }

    /// `alpha_bar_t`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bars[t]
    }

    /// `tilde beta_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> S {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        self.beta(t) * (S::one() - ab_prev) / (S::one() - ab)
    }
}

/// Mean and isotropic variance of the reverse transition at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments<S> {
    pub mean: ImageTensor<S>,
    pub variance_scale: S,
}

/// Closed-form forward sample `sqrt(ab) x0 + sqrt(1 - ab) eps`.
///
/// `t = 0` is accepted and returns `x0` (no noise).
pub fn q_sample<S: Scalar>(
    x0: &ImageTensor<S>,
    t: usize,
    eps: &ImageTensor<S>,
    sched: &NoiseSchedule<S>,
) -> Result<ImageTensor<S>> {
    if t > sched.steps() {
        return Err(Error::invalid(format!("timestep {t} outside 0..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One forward step from level `t - 1` to level `t`: `sqrt(a_t) x + sqrt(b_t) eps`.
pub fn renoise_step<S: Scalar>(
    x_prev: &ImageTensor<S>,
    t: usize,
    eps: &ImageTensor<S>,
    sched: &NoiseSchedule<S>,
) -> Result<ImageTensor<S>> {
    sched.check_step(t)?;
    let (a, b) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
    x_prev.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean-image estimate `xt / sqrt(ab) - eps_hat sqrt((1 - ab) / ab)`.
pub fn predict_x0<S: Scalar>(
    xt: &ImageTensor<S>,
    eps_hat: &ImageTensor<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ImageTensor<S>> {
    if t > sched.steps() {
        return Err(Error::invalid(format!("timestep {t} outside 0..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let inv = S::one() / ab.sqrt();
    let k = ((S::one() - ab) / ab).sqrt();
    xt.zip_map(eps_hat, |x, e| x * inv - e * k)
}

/// Reverse-transition moments given the predicted noise.
pub fn posterior<S: Scalar>(
    xt: &ImageTensor<S>,
    eps_hat: &ImageTensor<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<PosteriorMoments<S>> {
    sched.check_step(t)?;
    let alpha = sched.alpha(t);
    let coef = (S::one() - alpha) / (S::one() - sched.alpha_bar(t)).sqrt();
    let inv = S::one() / alpha.sqrt();
    let mean = xt.zip_map(eps_hat, |x, e| inv * (x - e * coef))?;
    Ok(PosteriorMoments {
        mean,
        variance_scale: sched.posterior_variance(t),
    })
}

/// `mean - s * var * grad + sqrt(var) * noise`.
///
/// With `s = 0` the shift is skipped entirely, so the result is bitwise
/// identical to the unguided draw.
pub fn guided_transition<S: Scalar>(
    moments: &PosteriorMoments<S>,
    grad: &ImageTensor<S>,
    s: S,
    noise: &ImageTensor<S>,
) -> Result<ImageTensor<S>> {
    let var = moments.variance_scale;
    if var < S::zero() {
        return Err(Error::invalid(format!("negative variance scale {var}")));
    }
    moments.mean.ensure_same_shape(grad, "guidance gradient")?;
    moments.mean.ensure_same_shape(noise, "transition noise")?;
    let sd = var.sqrt();
    let shift = s * var;
    let data = moments
        .mean
        .data()
        .iter()
        .zip(grad.data())
        .zip(noise.data())
        .map(|((&m, &g), &n)| {
            let m = if shift == S::zero() { m } else { m - shift * g };
            if sd == S::zero() {
                m
            } else {
                m + sd * n
            }
        })
        .collect();
    let (c, h, w) = moments.mean.shape();
    Ok(ImageTensor::from_parts(c, h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn img(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(1, 2, 2, v).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_decreases_to_below_1e_4() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::<f64>::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.75]).unwrap();
        let x0 = img(0.3);
        assert_eq!(q_sample(&x0, 0, &img(5.0), &s).unwrap(), x0);
        let xt = q_sample(&img(1.0), 1, &img(0.0), &s).unwrap();
        assert!(xt.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.5]).unwrap();
        let x0 = ImageTensor::filled(1, 1, 1, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let e = ImageTensor::filled(1, 1, 1, StandardNormal.sample(&mut rng)).unwrap();
                q_sample(&x0, 1, &e, &s).unwrap().data()[0]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 0.5).abs() < 0.01, "var {var}");
        assert!((mean - 0.4 * 0.5f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn predict_x0_examples() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.75]).unwrap();
        let x0 = predict_x0(&img(0.5), &img(0.0), 1, &s).unwrap();
        assert!(x0.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(predict_x0(&img(0.7), &img(3.0), 0, &s).unwrap(), img(0.7));
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.1, 0.2]).unwrap();
        let m1 = posterior(&img(0.3), &img(0.1), 1, &s).unwrap();
        assert_eq!(m1.variance_scale, 0.0);
        let m2 = posterior(&img(0.3), &img(0.0), 2, &s).unwrap();
        assert!((m2.variance_scale - 0.2 * 0.1 / 0.28).abs() < 1e-15);
        assert!((m2.variance_scale - 0.0714286).abs() < 1e-6);
        assert!(m2.mean.data().iter().all(|&v| (v - 0.3 / 0.8f64.sqrt()).abs() < 1e-15));
        assert!(posterior(&img(0.3), &img(0.0), 3, &s).is_err());
        assert!(posterior(&img(0.3), &img(0.0), 0, &s).is_err());
    }

    #[test]
    fn variance_scale_nonnegative_and_zero_only_at_one() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!((2..=1000).all(|t| s.posterior_variance(t) > 0.0));
    }

    #[test]
    fn guided_transition_examples() {
        let mean = img(0.2);
        let m = PosteriorMoments {
            mean: mean.clone(),
            variance_scale: 0.01,
        };
        let noise = img(0.7);
        let unguided = guided_transition(&m, &img(0.0), 0.0, &noise).unwrap();
        assert_eq!(guided_transition(&m, &img(9.0), 0.0, &noise).unwrap(), unguided);

        let det = PosteriorMoments {
            mean: mean.clone(),
            variance_scale: 0.0,
        };
        assert_eq!(guided_transition(&det, &img(5.0), 3.0, &noise).unwrap(), mean);

        let out = guided_transition(&m, &img(1.0), 3.5e-3, &img(0.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - (0.2 - 3.5e-5)).abs() < 1e-15));

        let neg = PosteriorMoments {
            mean,
            variance_scale: -1.0,
        };
        assert!(guided_transition(&neg, &img(0.0), 0.0, &noise).is_err());
        assert!(guided_transition(&m, &ImageTensor::zeros(1, 3, 3).unwrap(), 0.0, &noise).is_err());
    }
}

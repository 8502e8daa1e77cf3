use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

use super::gaussian::{gaussian_predict_eps, DiagonalGaussianModel};
use super::{eps_from_x0, Denoiser};

/// Mixture of diagonal Gaussian priors with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel<S> {
    weights: Vec<f64>,
    components: Vec<DiagonalGaussianModel<S>>,
}

impl<S: Scalar> GaussianMixtureModel<S> {
    pub fn new(components: Vec<(f64, DiagonalGaussianModel<S>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let total: f64 = components.iter().map(|(w, _)| *w).sum();
        if components.iter().any(|(w, _)| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights must be positive and sum to 1 (sum = {total})"
            )));
        }
        let shape = components[0].1.mean().shape();
        if components.iter().any(|(_, c)| c.mean().shape() != shape) {
            return Err(Error::shape("mixture components disagree on image shape"));
        }
        let (weights, components) = components.into_iter().unzip();
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagonalGaussianModel<S>] {
        &self.components
    }

    /// Posterior component probabilities given `xt`, via log-sum-exp.
    pub fn responsibilities(&self, xt: &ImageTensor<S>, alpha_bar: S) -> Result<Vec<f64>> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| c.log_likelihood(xt, alpha_bar).map(|ll| w.ln() + ll))
            .collect::<Result<_>>()?;
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // every component rules xt out; fall back to the prior weights
            return Ok(self.weights.clone());
        }
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(logs.iter().map(|l| (l - max).exp() / total).collect())
    }

    /// `E[x0 | xt] = sum_k r_k(xt) E[x0 | xt, k]`.
    pub fn posterior_mean(&self, xt: &ImageTensor<S>, alpha_bar: S) -> Result<ImageTensor<S>> {
        let resp = self.responsibilities(xt, alpha_bar)?;
        let mut acc = vec![S::zero(); xt.len()];
        for (r, c) in resp.iter().zip(&self.components) {
            let r = S::lit(*r);
            let m = c.posterior_mean(xt, alpha_bar)?;
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += r * *v;
            }
        }
        let (ch, h, w) = xt.shape();
        Ok(ImageTensor::from_parts(ch, h, w, acc))
    }
}

/// Exact noise prediction under a Gaussian-mixture prior.
pub fn gmm_predict_eps<S: Scalar>(
    model: &GaussianMixtureModel<S>,
    xt: &ImageTensor<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<ImageTensor<S>> {
    if model.components.len() == 1 {
        return gaussian_predict_eps(&model.components[0], xt, t, sched);
    }
    model.components[0].mean().ensure_same_shape(xt, "mixture denoiser input")?;
    let ab = sched.alpha_bar(t);
    if ab >= S::one() {
        return Ok(xt.map(|_| S::zero()));
    }
    let x0 = model.posterior_mean(xt, ab)?;
    eps_from_x0(xt, &x0, ab)
}

#[derive(Debug, Clone)]
pub struct GmmDenoiser<S> {
    pub model: GaussianMixtureModel<S>,
}

impl<S: Scalar> GmmDenoiser<S> {
    pub fn new(model: GaussianMixtureModel<S>) -> Self {
        Self { model }
    }
}

impl<S: Scalar> Denoiser<S> for GmmDenoiser<S> {
    fn predict_eps(
        &mut self,
        xt: &ImageTensor<S>,
        t: usize,
        sched: &NoiseSchedule<S>,
    ) -> Result<ImageTensor<S>> {
        gmm_predict_eps(&self.model, xt, t, sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::predict_x0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(1, 2, 2, v).unwrap()
    }

    fn component(mu: f64, var: f64) -> DiagonalGaussianModel<f64> {
        DiagonalGaussianModel::new(filled(mu), filled(var)).unwrap()
    }

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn single_component_is_bitwise_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DiagonalGaussianModel::new(
            ImageTensor::from_fn(1, 2, 2, |_, _, _| rng.random_range(-0.5..0.5)).unwrap(),
            ImageTensor::from_fn(1, 2, 2, |_, _, _| rng.random_range(0.1..1.0)).unwrap(),
        )
        .unwrap();
        let gmm = GaussianMixtureModel::new(vec![(1.0, g.clone())]).unwrap();
        let s = sched();
        for t in [1, 37, 100] {
            let xt = ImageTensor::from_fn(1, 2, 2, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
            let a = gmm_predict_eps(&gmm, &xt, t, &s).unwrap();
            let b = gaussian_predict_eps(&g, &xt, t, &s).unwrap();
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn symmetric_components_cancel_at_origin() {
        let gmm = GaussianMixtureModel::new(vec![(0.5, component(0.6, 0.1)), (0.5, component(-0.6, 0.1))]).unwrap();
        let s = sched();
        let xt = filled(0.0);
        let r = gmm.responsibilities(&xt, s.alpha_bar(40)).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        let x0 = gmm.posterior_mean(&xt, s.alpha_bar(40)).unwrap();
        assert!(x0.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn far_basin_matches_that_component() {
        let (c0, c1) = (component(0.6, 0.05), component(-0.6, 0.05));
        let gmm = GaussianMixtureModel::new(vec![(0.3, c0.clone()), (0.7, c1)]).unwrap();
        let s = sched();
        let t = 5;
        let ab = s.alpha_bar(t);
        let xt = filled(0.6 * ab.sqrt() + 0.1);
        // oracle: direct likelihood ratio of the two components
        let l0 = gmm.components()[0].log_likelihood(&xt, ab).unwrap() + 0.3f64.ln();
        let l1 = gmm.components()[1].log_likelihood(&xt, ab).unwrap() + 0.7f64.ln();
        let r1 = 1.0 / (1.0 + (l0 - l1).exp());
        assert!(r1 < 1e-8, "r1 = {r1}");
        let eps = gmm_predict_eps(&gmm, &xt, t, &s).unwrap();
        let x0 = predict_x0(&xt, &eps, t, &s).unwrap();
        let target = c0.posterior_mean(&xt, ab).unwrap();
        for (a, b) in x0.data().iter().zip(target.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn continuity_as_weight_tends_to_one() {
        let (c0, c1) = (component(0.2, 0.3), component(-0.4, 0.2));
        let s = sched();
        let xt = filled(-0.1);
        let single = gaussian_predict_eps(&c0, &xt, 50, &s).unwrap();
        let mut prev = f64::INFINITY;
        for eps_w in [1e-1, 1e-3, 1e-6, 1e-9] {
            let gmm = GaussianMixtureModel::new(vec![(1.0 - eps_w, c0.clone()), (eps_w, c1.clone())]).unwrap();
            let out = gmm_predict_eps(&gmm, &xt, 50, &s).unwrap();
            let gap = out.sub(&single).unwrap().sum_abs();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let gmm = GaussianMixtureModel::new(vec![(0.5, component(0.9, 1e-4)), (0.5, component(-0.9, 1e-4))]).unwrap();
        let s = sched();
        let xt = filled(1e4);
        let eps = gmm_predict_eps(&gmm, &xt, 2, &s).unwrap();
        assert!(eps.is_finite());
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(GaussianMixtureModel::new(vec![(0.5, component(0.0, 1.0))]).is_err());
        assert!(GaussianMixtureModel::<f64>::new(vec![]).is_err());
        assert!(GaussianMixtureModel::new(vec![(1.2, component(0.0, 1.0)), (-0.2, component(0.0, 1.0))]).is_err());
    }
}

//! Closed-form noise predictors for isotropic Gaussian-mixture data.
//!
//! For data `x0 ~ Σ π_k N(μ_k, σ_k² I)` the noisy marginal at step `t` is again
//! a mixture with means `√ᾱ_t μ_k` and variances `s_k² = ᾱ_t σ_k² + 1 − ᾱ_t`,
//! and the optimal noise prediction is known exactly. Plugging it into the
//! sampler gives a model whose output distribution is known in advance.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::Denoiser;
use crate::schedule::NoiseSchedule;
use crate::textcond::PromptEmbedding;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance `σ²`.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::Config("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::Config(format!("component mean has {} dims, expected {dim}", c.mean.len())));
            }
            if c.variance.is_nan() || c.variance <= 0.0 {
                return Err(Error::Config(format!("component variance {} is not positive", c.variance)));
            }
            if c.weight.is_nan() || c.weight < 0.0 {
                return Err(Error::Config(format!("component weight {} is negative", c.weight)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(alloc::vec![GaussianComponent { weight: 1.0, mean, variance }])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::single(alloc::vec![0.0; dim], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Per-dimension mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = alloc::vec![0.0; self.dim];
        for c in &self.components {
            for (acc, mu) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight * mu;
            }
        }
        m
    }

    /// Per-dimension variance (law of total variance).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut v = alloc::vec![0.0; self.dim];
        for c in &self.components {
            for ((acc, mu), m) in v.iter_mut().zip(&c.mean).zip(&mean) {
                *acc += c.weight * (c.variance + (mu - m) * (mu - m));
            }
        }
        v
    }
}

/// Mixture followed by `x_t` at step `t`.
pub fn gmm_marginal(t: usize, s: &NoiseSchedule, g: &GaussianMixture) -> Result<GaussianMixture> {
    let ab = s.alpha_bar(t)?;
    let r = libm::sqrt(ab);
    let components = g
        .components
        .iter()
        .map(|c| GaussianComponent {
            weight: c.weight,
            mean: c.mean.iter().map(|m| r * m).collect(),
            variance: ab * c.variance + 1.0 - ab,
        })
        .collect();
    Ok(GaussianMixture { components, dim: g.dim })
}

/// Exact minimiser of the noise-prediction loss for mixture data.
///
/// Uses the per-component form `ε = Σ_k r_k·√(1−ᾱ)(x − √ᾱ μ_k)/s_k²`, which is
/// algebraically `(x − √ᾱ·E[x0|x])/√(1−ᾱ)` but stays finite at `ᾱ = 1`.
/// Responsibilities `r_k` are computed in log space.
pub fn gmm_eps(x_t: &[f64], t: usize, s: &NoiseSchedule, g: &GaussianMixture) -> Result<Vec<f64>> {
    if x_t.len() != g.dim {
        return Err(Error::Dimension(format!("oracle expects {} dims, got {}", g.dim, x_t.len())));
    }
    let ab = s.alpha_bar(t)?;
    let r = libm::sqrt(ab);
    let noise_scale = libm::sqrt(1.0 - ab);
    let d = g.dim as f64;
    let log_resp: Vec<f64> = g
        .components
        .iter()
        .map(|c| {
            let s2 = ab * c.variance + 1.0 - ab;
            let dist: f64 = x_t.iter().zip(&c.mean).map(|(x, m)| (x - r * m) * (x - r * m)).sum();
            libm::log(c.weight) - 0.5 * d * libm::log(2.0 * core::f64::consts::PI * s2) - 0.5 * dist / s2
        })
        .collect();
    let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_resp.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = weights.iter().sum();
    let mut eps = alloc::vec![0.0; g.dim];
    for (c, w) in g.components.iter().zip(&weights) {
        let resp = w / total;
        if resp == 0.0 {
            continue;
        }
        let s2 = ab * c.variance + 1.0 - ab;
        for ((e, x), m) in eps.iter_mut().zip(x_t).zip(&c.mean) {
            *e += resp * noise_scale * (x - r * m) / s2;
        }
    }
    Ok(eps)
}

/// A [`Denoiser`] backed by [`gmm_eps`]. Ignores the prompt.
#[derive(Clone, Debug)]
pub struct MixtureDenoiser {
    pub schedule: NoiseSchedule,
    pub mixture: GaussianMixture,
}

impl Denoiser for MixtureDenoiser {
    fn predict_eps(&self, x: &Tensor, t: usize, _cond: &PromptEmbedding) -> Result<Tensor> {
        let xs: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let eps = gmm_eps(&xs, t, &self.schedule, &self.mixture)?;
        Tensor::new(x.shape(), eps.into_iter().map(|v| v as f32).collect())
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn translation_consistent(t in 1usize..=1000, mu in -3.0f64..3.0, shift in -3.0f64..3.0, x in -4.0f64..4.0, var in 0.1f64..4.0) {
            let s = crate::schedule::ScheduleConfig::default().build().unwrap();
            let r = libm::sqrt(s.alpha_bar(t).unwrap());
            let base = GaussianMixture::single(alloc::vec![mu, -mu], var).unwrap();
            let moved = GaussianMixture::single(alloc::vec![mu + shift, -mu + shift], var).unwrap();
            let a = gmm_eps(&[x, 0.5 * x], t, &s, &base).unwrap();
            let b = gmm_eps(&[x + r * shift, 0.5 * x + r * shift], t, &s, &moved).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
    }
}

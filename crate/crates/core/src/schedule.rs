//! Noise schedules, forward noising and deterministic DDIM encode/decode.
//!
//! DDIM steps are taken as exact Euler steps of the probability-flow ODE in
//! rescaled coordinates `u = x/√ᾱ_t`, `τ = √(1/ᾱ_t − 1)`:
//!
//! ```text
//! u_next = u + ε·(τ_next − τ)        x_next = √ᾱ_next · u_next
//! ```
//!
//! which expands to `x_next = √(ᾱ_next/ᾱ)·x + √ᾱ_next·(τ_next − τ)·ε`. Written
//! this way a decode step and an encode step over the same pair of
//! timesteps are exact inverses when ε is held fixed.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::Denoiser;
use crate::textcond::PromptEmbedding;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }
}

/// `β_t`, `α_t` and `ᾱ_t` for `t = 1..=T`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {train_steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (train_steps - 1) as f64;
        Self::from_betas((0..train_steps).map(|i| beta_start + step * i as f64).collect())
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs at least two betas".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.train_steps() });
        }
        Ok(())
    }

    fn check_positive(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: self.train_steps() });
        }
        self.check(t)
    }

    /// `β_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_positive(t)?;
        Ok(self.betas[t - 1])
    }

    /// `α_t = 1 − β_t`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `τ_t = √(1/ᾱ_t − 1)`.
    pub fn tau(&self, t: usize) -> Result<f64> {
        Ok(libm::sqrt(1.0 / self.alpha_bar(t)? - 1.0))
    }
}

/// A latent in the rescaled ODE coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaledState {
    pub u: Tensor,
    pub tau: f64,
}

impl RescaledState {
    pub fn from_latent(x: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Self> {
        let inv = 1.0 / libm::sqrt(s.alpha_bar(t)?);
        Ok(Self { u: x.map(|v| (f64::from(v) * inv) as f32), tau: s.tau(t)? })
    }

    pub fn to_latent(&self, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
        let scale = libm::sqrt(s.alpha_bar(t)?);
        Ok(self.u.map(|v| (f64::from(v) * scale) as f32))
    }
}

/// Forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let ab = s.alpha_bar(t)?;
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x0.zip_map(eps, |x, e| (a * f64::from(x) + b * f64::from(e)) as f32)
}

fn euler_coefficients(from: usize, to: usize, s: &NoiseSchedule) -> Result<(f64, f64)> {
    let ab_from = s.alpha_bar(from)?;
    let ab_to = s.alpha_bar(to)?;
    Ok((libm::sqrt(ab_to / ab_from), libm::sqrt(ab_to) * (s.tau(to)? - s.tau(from)?)))
}

fn rescaled_euler(x: &Tensor, eps: &Tensor, from: usize, to: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let (scale, drift) = euler_coefficients(from, to, s)?;
    x.zip_map(eps, |x, e| (scale * f64::from(x) + drift * f64::from(e)) as f32)
}

/// A sampler latent kept in double precision between steps.
///
/// Near `t = T` the map back to `t = 0` amplifies by `1/√ᾱ_T ≈ 150`, so
/// rounding the running latent to `f32` after every step would cost about
/// five significant digits over a round trip. The loops therefore carry
/// the state at `f64` and only round the copy handed to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl SamplerState {
    pub fn from_tensor(x: &Tensor) -> Self {
        Self { shape: x.shape().to_vec(), values: x.data().iter().map(|&v| f64::from(v)).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.values.iter().map(|&v| v as f32).collect()).expect("shape preserved")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn euler(&mut self, eps: &Tensor, from: usize, to: usize, s: &NoiseSchedule) -> Result<()> {
        if eps.shape() != self.shape.as_slice() {
            return Err(Error::Dimension(format!("eps {:?} does not match latent {:?}", eps.shape(), self.shape)));
        }
        let (scale, drift) = euler_coefficients(from, to, s)?;
        for (x, &e) in self.values.iter_mut().zip(eps.data()) {
            *x = scale * *x + drift * f64::from(e);
        }
        Ok(())
    }

    /// In-place [`ddim_step`].
    pub fn ddim_step(&mut self, eps: &Tensor, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<()> {
        if t_prev >= t {
            return Err(Error::TimestepOrder { from: t, to: t_prev });
        }
        self.euler(eps, t, t_prev, s)
    }

    /// In-place [`ddim_encode_step`].
    pub fn ddim_encode_step(&mut self, eps: &Tensor, t: usize, t_next: usize, s: &NoiseSchedule) -> Result<()> {
        if t_next <= t {
            return Err(Error::TimestepOrder { from: t, to: t_next });
        }
        self.euler(eps, t, t_next, s)
    }
}

/// One deterministic DDIM denoising step `t → t_prev` (`t_prev < t`).
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::TimestepOrder { from: t, to: t_prev });
    }
    rescaled_euler(x_t, eps, t, t_prev, s)
}

/// One DDIM encoding step `t → t_next` (`t_next > t`).
pub fn ddim_encode_step(x_t: &Tensor, eps: &Tensor, t: usize, t_next: usize, s: &NoiseSchedule) -> Result<Tensor> {
    if t_next <= t {
        return Err(Error::TimestepOrder { from: t, to: t_next });
    }
    rescaled_euler(x_t, eps, t, t_next, s)
}

/// Posterior mean `(x_t − β_t/√(1−ᾱ_t)·ε)/√α_t`.
pub fn eps_to_mu(x_t: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let beta = s.beta(t)?;
    let coef = beta / libm::sqrt(1.0 - s.alpha_bar(t)?);
    let inv_sqrt_alpha = 1.0 / libm::sqrt(1.0 - beta);
    x_t.zip_map(eps, |x, e| ((f64::from(x) - coef * f64::from(e)) * inv_sqrt_alpha) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Increasing timesteps, image → noise.
    Encode,
    /// Decreasing timesteps, noise → image.
    Decode,
}

/// An ordered subsequence of training timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepPlan {
    timesteps: Vec<usize>,
    direction: Direction,
    encode_ratio: f64,
}

/// Number of plan steps covered by an encode ratio `r`: `⌊r·steps⌋`.
pub fn encode_depth(steps: usize, encode_ratio: f64) -> Result<usize> {
    if !(encode_ratio > 0.0 && encode_ratio <= 1.0) {
        return Err(Error::Config(format!("encode ratio {encode_ratio} outside (0, 1]")));
    }
    // Guard against 0.2*50 landing a hair under 10.
    let depth = libm::floor(encode_ratio * steps as f64 + 1e-9) as usize;
    if depth == 0 {
        return Err(Error::Config(format!("encode ratio {encode_ratio} covers no step of {steps}")));
    }
    Ok(depth.min(steps))
}

impl TimestepPlan {
    /// `steps` uniform steps from `T` down to 0: `t_i = ⌊i·T/steps⌋`.
    pub fn uniform(train_steps: usize, steps: usize) -> Result<Self> {
        if steps < 1 || steps > train_steps {
            return Err(Error::Config(format!("need 1 <= steps <= {train_steps}, got {steps}")));
        }
        let mut timesteps: Vec<usize> = (0..=steps).map(|i| i * train_steps / steps).collect();
        timesteps.reverse();
        Self::new(timesteps, Direction::Decode)
    }

    /// The ascending plan `0 → t_depth` for an encode ratio.
    pub fn encode(train_steps: usize, steps: usize, encode_ratio: f64) -> Result<Self> {
        let depth = encode_depth(steps, encode_ratio)?;
        let mut plan = Self::uniform(train_steps, steps)?.reversed();
        plan.timesteps.truncate(depth + 1);
        plan.encode_ratio = encode_ratio;
        Ok(plan)
    }

    pub fn new(timesteps: Vec<usize>, direction: Direction) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::Config("timestep plan needs at least two entries".into()));
        }
        let ordered = timesteps.windows(2).all(|w| match direction {
            Direction::Encode => w[0] < w[1],
            Direction::Decode => w[0] > w[1],
        });
        if !ordered {
            return Err(Error::Config(format!("timesteps {timesteps:?} not strictly {direction:?}-ordered")));
        }
        Ok(Self { timesteps, direction, encode_ratio: 1.0 })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn encode_ratio(&self) -> f64 {
        self.encode_ratio
    }

    /// Number of transitions.
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn reversed(&self) -> Self {
        let mut timesteps = self.timesteps.clone();
        timesteps.reverse();
        let direction = match self.direction {
            Direction::Encode => Direction::Decode,
            Direction::Decode => Direction::Encode,
        };
        Self { timesteps, direction, encode_ratio: self.encode_ratio }
    }

    /// Consecutive `(from, to)` pairs.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1]))
    }

    fn check_range(&self, s: &NoiseSchedule) -> Result<()> {
        match self.timesteps.iter().find(|&&t| t > s.train_steps()) {
            Some(&t) => Err(Error::TimestepOutOfRange { t, max: s.train_steps() }),
            None => Ok(()),
        }
    }
}

/// Runs the decode plan from `x_start` and returns the final latent.
pub fn ddim_sample_loop<D: Denoiser + ?Sized>(
    model: &D,
    x_start: &Tensor,
    cond: &PromptEmbedding,
    plan: &TimestepPlan,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if plan.direction() != Direction::Decode {
        return Err(Error::Config("sampling needs a decode plan".into()));
    }
    plan.check_range(s)?;
    let mut x = SamplerState::from_tensor(x_start);
    for (t, t_prev) in plan.transitions() {
        let eps = model.predict_eps(&x.to_tensor(), t, cond)?;
        x.ddim_step(&eps, t, t_prev, s)?;
    }
    Ok(x.to_tensor())
}

/// Runs the encode plan from `x0` and returns every visited `(t, y_t)`,
/// starting with `(plan[0], x0)`.
pub fn ddim_encode_loop<D: Denoiser + ?Sized>(
    model: &D,
    x0: &Tensor,
    cond: &PromptEmbedding,
    plan: &TimestepPlan,
    s: &NoiseSchedule,
) -> Result<Vec<(usize, Tensor)>> {
    if plan.direction() != Direction::Encode {
        return Err(Error::Config("encoding needs an encode plan".into()));
    }
    plan.check_range(s)?;
    let mut out = Vec::with_capacity(plan.timesteps().len());
    out.push((plan.timesteps()[0], x0.clone()));
    let mut y = SamplerState::from_tensor(x0);
    for (t, t_next) in plan.transitions() {
        let eps = model.predict_eps(&out.last().expect("non-empty").1, t, cond)?;
        y.ddim_encode_step(&eps, t, t_next, s)?;
        out.push((t_next, y.to_tensor()));
    }
    Ok(out)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn step_and_encode_step_are_inverse(t in 1usize..1000, gap in 1usize..200, seed in any::<u64>()) {
            let s = ScheduleConfig::default().build().unwrap();
            let t_next = (t + gap).min(1000);
            prop_assume!(t_next > t);
            let mut rng = Rng::new(seed);
            let x = rng.gaussian_tensor(&[16]);
            let eps = rng.gaussian_tensor(&[16]);
            let up = ddim_encode_step(&x, &eps, t, t_next, &s).unwrap();
            let down = ddim_step(&up, &eps, t_next, t, &s).unwrap();
            // Relative to the size of the intermediate latent.
            let tol = 1e-6 * up.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            prop_assert!(down.max_abs_diff(&x).unwrap() <= tol.max(1e-6));
        }

        #[test]
        fn q_sample_preserves_unit_variance(t in 0usize..=1000, seed in any::<u64>()) {
            let s = ScheduleConfig::default().build().unwrap();
            let mut rng = Rng::new(seed);
            let x0 = rng.gaussian_tensor(&[65536]);
            let eps = rng.gaussian_tensor(&[65536]);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let n = xt.len() as f64;
            let mean = xt.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = xt.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 0.05, "{}", var);
        }
    }
}

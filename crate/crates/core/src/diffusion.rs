//! Latent diffusion math: the linear variance schedule, closed-form and
//! single-step forward corruption, the ε-parameterized reverse step, and the
//! fixed-start refinement used at inference time.
//!
//! Timesteps are 1-based (`1..=T`); `t = 0` means "no corruption".
//! Every sampling function takes an explicit generator.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step variances and their cumulative signal-retention products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = β_start + (t-1)/(T-1)·(β_end-β_start)` for `t = 1..=T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < start < end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
            .collect();
        Ok(Self::from_betas(
            ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            beta,
        ))
    }

    fn from_betas(config: ScheduleConfig, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            config,
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Posterior variance `β_t (1-ᾱ_{t-1}) / (1-ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.beta(t)? * (1.0 - self.alpha_bar(t - 1)?) / (1.0 - self.alpha_bar(t)?))
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Standard normal noise shaped like `like`, drawn from `rng`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// Per-sample coefficients broadcastable against a batch `[B, ...]`.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_slice(values, shape, like.device())?.to_dtype(like.dtype())?)
}

fn expand_timesteps(ts: &[usize], batch: usize) -> Result<Vec<usize>> {
    match ts.len() {
        1 => Ok(vec![ts[0]; batch]),
        n if n == batch => Ok(ts.to_vec()),
        n => Err(Error::Shape(format!("{n} timesteps for a batch of {batch}"))),
    }
}

/// Closed-form corruption `z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε`.
///
/// `ts` holds one timestep per batch element (or a single shared one).
/// Returns `(z_t, ε)`.
pub fn forward_sample<R: Rng + ?Sized>(
    z0: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let eps = gaussian_like(z0, rng)?;
    let zt = forward_sample_with(z0, &eps, ts, sched)?;
    Ok((zt, eps))
}

/// Closed-form corruption with caller-supplied noise.
pub fn forward_sample_with(z0: &Tensor, eps: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let ts = expand_timesteps(ts, z0.dim(0)?)?;
    let mut signal = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in &ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let zt = z0
        .broadcast_mul(&per_sample(&signal, z0)?)?
        .add(&eps.broadcast_mul(&per_sample(&noise, z0)?)?)?;
    Ok(zt)
}

/// One Markov step `z_t = √(1-β_t) z_{t-1} + √β_t ε`.
pub fn forward_step<R: Rng + ?Sized>(z_prev: &Tensor, t: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<Tensor> {
    let beta = sched.beta(t)?;
    let eps = gaussian_like(z_prev, rng)?;
    Ok(((z_prev * (1.0 - beta).sqrt())? + (eps * beta.sqrt())?)?)
}

/// Inverts the closed form: `ẑ_0 = (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_z0(zt: &Tensor, eps_hat: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let ts = expand_timesteps(ts, zt.dim(0)?)?;
    let mut inv_signal = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in &ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t)?;
        inv_signal.push(1.0 / ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let num = zt.sub(&eps_hat.broadcast_mul(&per_sample(&noise, zt)?)?)?;
    Ok(num.broadcast_mul(&per_sample(&inv_signal, zt)?)?)
}

/// Anything that predicts the injected noise from a corrupted latent.
pub trait Denoiser {
    fn predict_eps(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_eps(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self(zt, ts)
    }
}

/// Samples `z_{t-1}` from the DDPM posterior with mean
/// `(z_t - β_t/√(1-ᾱ_t) ε̂) / √α_t` and fixed variance
/// `β_t (1-ᾱ_{t-1}) / (1-ᾱ_t)`. No noise is added at `t = 1`.
pub fn reverse_step<R: Rng + ?Sized>(
    zt: &Tensor,
    t: usize,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let eps_hat = denoiser.predict_eps(zt, &[t])?.detach();
    let mean = ((zt - (eps_hat * (beta / (1.0 - ab).sqrt()))?)? * (1.0 / alpha.sqrt()))?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = sched.posterior_variance(t)?.sqrt();
    Ok((mean + (gaussian_like(zt, rng)? * sigma)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Corrupt to `t_test`, then run the reverse chain down to 1.
    Chain,
    /// Corrupt to `t_test`, then take a single ẑ_0 estimate.
    SingleStep,
}

/// Corrupts `z` to `t_test` and denoises it back. `t_test = 0` returns `z`.
pub fn refine_latent<R: Rng + ?Sized>(
    z: &Tensor,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    t_test: usize,
    mode: RefineMode,
    rng: &mut R,
) -> Result<Tensor> {
    if t_test == 0 {
        return Ok(z.clone());
    }
    let (mut zt, _) = forward_sample(z, &[t_test], sched, rng)?;
    match mode {
        RefineMode::SingleStep => {
            let eps_hat = denoiser.predict_eps(&zt, &[t_test])?.detach();
            predict_z0(&zt, &eps_hat, &[t_test], sched)
        }
        RefineMode::Chain => {
            for t in (1..=t_test).rev() {
                zt = reverse_step(&zt, t, denoiser, sched, rng)?;
            }
            Ok(zt)
        }
    }
}

/// Draws one timestep per batch element.
///
/// The batch is stratified: element `i` lands in `[(offset+i)/B, (offset+i+1)/B)`
/// of the schedule and the strata are assigned to elements in shuffled order.
/// For `offset ~ U[0,1)` every element is uniform on `1..=T`.
pub fn sample_timesteps<R: Rng + ?Sized>(batch: usize, sched: &NoiseSchedule, offset: f64, rng: &mut R) -> Vec<usize> {
    let steps = sched.steps();
    let mut ts: Vec<usize> = (0..batch)
        .map(|i| ((((offset + i as f64) / batch as f64) * steps as f64) as usize).min(steps - 1) + 1)
        .collect();
    ts.shuffle(rng);
    ts
}

/// Converts `tensor` to f64 values, for statistics in tests and reports.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

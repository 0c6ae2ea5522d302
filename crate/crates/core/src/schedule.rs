//! Diffusion noise schedules: forward process coefficients, the discrete
//! posterior denoising step, and the Karras sigma grid for few-step
//! sampling.
//!
//! All schedule arrays are kept at 64-bit precision; the coefficient ratios
//! near t=1 are ill-conditioned at 32-bit.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete diffusion coefficients for T steps. Timesteps are 1-based:
/// t in [1, T], with alpha_bar(0) defined as 1 so the t=1 posterior step is
/// well-defined.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Posterior variances beta~_t = (1-abar_{t-1})/(1-abar_t) * beta_t.
    pub posterior_betas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        linear_beta_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    /// alpha_bar with the t=0 convention alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    /// Noise level sigma(t) = sqrt((1-abar_t)/abar_t) of the rescaled
    /// (variance-exploding) view of the process. Accepts fractional t by
    /// log-linear interpolation between integer levels.
    pub fn sigma(&self, t: f64) -> f64 {
        let sig = |ti: usize| -> f64 {
            let ab = self.alpha_bar(ti);
            ((1.0 - ab) / ab).sqrt()
        };
        if t <= 1.0 {
            return sig(1);
        }
        let tmax = self.len() as f64;
        if t >= tmax {
            return sig(self.len());
        }
        let lo = t.floor() as usize;
        let hi = lo + 1;
        let w = t - lo as f64;
        (sig(lo).ln() * (1.0 - w) + sig(hi).ln() * w).exp()
    }
}

/// Linearly spaced beta schedule (inclusive endpoints) with derived arrays.
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least 1 step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        betas.push(beta_start + frac * (beta_end - beta_start));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let mut posterior_betas = Vec::with_capacity(steps);
    for t in 1..=steps {
        let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
        posterior_betas.push((1.0 - ab_prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars, posterior_betas })
}

/// Forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.dims() != eps.dims() {
        return Err(Error::Shape("q_sample: eps shape must match x0".into()));
    }
    let ab = schedule.alpha_bar(t);
    let xt = (x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(xt)
}

/// Coefficients of the discrete posterior update
/// x_{t-1} = c0 * x0_hat + c1 * x_t + sqrt(beta~_t) * eps.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, c1, schedule.posterior_beta(t))
}

/// One reverse step of the discrete sampler. `eps` must be zero at t=1.
///
/// The noise term uses the posterior standard deviation sqrt(beta~_t); the
/// plain beta~_t multiplier collapses the sample variance over a long
/// reverse trajectory.
pub fn ddpm_posterior_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    eps: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t == 1 {
        if eps.is_some() {
            return Err(Error::Config("posterior step at t=1 must use zero noise".into()));
        }
        // c0 is 1 and c1 is 0 analytically; return x0_hat without rounding
        return Ok(x0_hat.clone());
    }
    let (c0, c1, pbeta) = posterior_coefficients(schedule, t);
    let mut out = (x0_hat.affine(c0, 0.0)? + x_t.affine(c1, 0.0)?)?;
    if let Some(eps) = eps {
        out = (out + eps.affine(pbeta.sqrt(), 0.0)?)?;
    }
    Ok(out)
}

/// Power-law noise grid for few-step sampling: n_steps decreasing sigmas
/// from sigma_max to sigma_min with exponent rho, plus a terminal zero, and
/// matching fractional timesteps into the training schedule.
#[derive(Debug, Clone)]
pub struct KarrasGrid {
    pub n_steps: usize,
    /// n_steps + 1 values, strictly decreasing, last one 0.
    pub sigmas: Vec<f64>,
    /// Fractional training-schedule timesteps for the n_steps noise levels.
    pub timesteps: Vec<f64>,
}

pub fn karras_sigmas(
    n_steps: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    map: &SigmaTimestepMap,
) -> Result<KarrasGrid> {
    if n_steps < 1 {
        return Err(Error::Config("need at least 1 step".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) || rho <= 0.0 {
        return Err(Error::Config("invalid sigma bounds".into()));
    }
    let mut sigmas = Vec::with_capacity(n_steps + 1);
    if n_steps == 1 {
        sigmas.push(sigma_max);
    } else {
        let smax_inv = sigma_max.powf(1.0 / rho);
        let smin_inv = sigma_min.powf(1.0 / rho);
        for i in 0..n_steps {
            let frac = i as f64 / (n_steps - 1) as f64;
            sigmas.push((smax_inv + frac * (smin_inv - smax_inv)).powf(rho));
        }
    }
    sigmas.push(0.0);
    let timesteps = sigmas[..n_steps].iter().map(|&s| map.t_of_sigma(s).0).collect();
    Ok(KarrasGrid { n_steps, sigmas, timesteps })
}

/// Monotone piecewise-linear bridge between sigma-space and the discrete
/// training timesteps; linear in t over log sigma.
#[derive(Debug, Clone)]
pub struct SigmaTimestepMap {
    log_sigmas: Vec<f64>,
}

impl SigmaTimestepMap {
    pub fn new(schedule: &NoiseSchedule) -> Self {
        let log_sigmas = (1..=schedule.len()).map(|t| schedule.sigma(t as f64).ln()).collect();
        SigmaTimestepMap { log_sigmas }
    }

    pub fn sigma_min(&self) -> f64 {
        self.log_sigmas[0].exp()
    }

    pub fn sigma_max(&self) -> f64 {
        self.log_sigmas[self.log_sigmas.len() - 1].exp()
    }

    /// Fractional timestep for a sigma. The boolean flags clamping at the
    /// schedule boundaries.
    pub fn t_of_sigma(&self, sigma: f64) -> (f64, bool) {
        let n = self.log_sigmas.len();
        let ls = sigma.ln();
        if ls <= self.log_sigmas[0] {
            return (1.0, ls < self.log_sigmas[0] - 1e-12);
        }
        if ls >= self.log_sigmas[n - 1] {
            return (n as f64, ls > self.log_sigmas[n - 1] + 1e-12);
        }
        // log sigmas are increasing in t
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.log_sigmas[mid] <= ls {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = (ls - self.log_sigmas[lo]) / (self.log_sigmas[hi] - self.log_sigmas[lo]);
        ((lo + 1) as f64 + w, false)
    }

    /// Sigma for a fractional timestep (inverse of `t_of_sigma`).
    pub fn sigma_of_t(&self, t: f64) -> f64 {
        let n = self.log_sigmas.len();
        if t <= 1.0 {
            return self.log_sigmas[0].exp();
        }
        if t >= n as f64 {
            return self.log_sigmas[n - 1].exp();
        }
        let lo = t.floor() as usize;
        let w = t - lo as f64;
        (self.log_sigmas[lo - 1] * (1.0 - w) + self.log_sigmas[lo] * w).exp()
    }
}

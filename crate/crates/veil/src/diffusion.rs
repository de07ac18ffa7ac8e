//! Noise schedule, closed-form forward diffusion, deterministic DDIM
//! stepping, DDIM inversion, and timestep sub-sequencing.
//!
//! Conventions: timesteps are integers in `[0, T]` with `abar(0) = 1`, so
//! `t = 0` is the identity (a clean image). The deterministic (eta = 0)
//! update is used everywhere; intermediate latents are never clamped.

use crate::error::{Result, VeilError};
use crate::models::Denoiser;
use crate::tensor::{check_same_shape, Tensor};

/// Per-step variances of the forward process and their cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product `abar_t` for `t` in `0..=T`; `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.total_steps() {
            return Err(VeilError::Parameter(format!(
                "timestep {t} exceeds schedule length {}",
                self.total_steps()
            )));
        }
        Ok(())
    }
}

/// Build a schedule with betas linearly interpolated from `beta_start` to
/// `beta_end` (endpoints inclusive).
pub fn build_linear_schedule(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if total_steps < 1 {
        return Err(VeilError::Parameter("schedule needs at least 1 step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(VeilError::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let t = total_steps;
    let betas: Vec<f64> = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// An image tensor tagged with its position on the diffusion trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentImage {
    /// A clean image at `t = 0`.
    pub fn new(data: Tensor) -> Self {
        LatentImage { data, timestep: 0 }
    }

    pub fn at(data: Tensor, timestep: usize) -> Self {
        LatentImage { data, timestep }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Copy with every value clamped into `[-1, 1]`. Intermediate latents are
    /// never clamped; this is for final decoded images only.
    pub fn clamped_unit(&self) -> LatentImage {
        LatentImage {
            data: crate::tensor::clamp_unit(&self.data),
            timestep: self.timestep,
        }
    }
}

/// Step sub-sequence for one inversion/denoise pass.
///
/// `denoise_steps` is strictly decreasing, starts at `T1`, has length `T2`,
/// and ends at a step `>= 1`; the sampler's final transition continues to 0.
/// `inversion_steps` is the ascending mirror including the 0 endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepPlan {
    pub inversion_steps: Vec<usize>,
    pub denoise_steps: Vec<usize>,
}

impl TimestepPlan {
    /// `(t, t_prev)` pairs for denoising, ending with `(last, 0)`.
    pub fn denoise_transitions(&self) -> Vec<(usize, usize)> {
        let mut steps = self.denoise_steps.clone();
        steps.push(0);
        steps.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// `(s, s_next)` pairs for inversion, starting from `(0, first)`.
    pub fn inversion_transitions(&self) -> Vec<(usize, usize)> {
        self.inversion_steps
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect()
    }
}

/// Uniform-stride decreasing subsequence from `T1` of length `T2`
/// (endpoint-inclusive rounding, ties rounded down).
pub fn make_timestep_plan(t1: usize, t2: usize) -> Result<TimestepPlan> {
    if t2 < 1 || t2 > t1 {
        return Err(VeilError::Parameter(format!(
            "need 1 <= T2 <= T1, got T1={t1}, T2={t2}"
        )));
    }
    // round-half-down of T1 * j / T2 for j = T2 .. 1
    let denoise_steps: Vec<usize> = (1..=t2)
        .rev()
        .map(|j| (2 * t1 * j + t2 - 1) / (2 * t2))
        .collect();
    debug_assert_eq!(denoise_steps[0], t1);
    debug_assert!(denoise_steps.windows(2).all(|w| w[0] > w[1]));
    debug_assert!(*denoise_steps.last().unwrap() >= 1);
    let mut inversion_steps: Vec<usize> = denoise_steps.iter().rev().copied().collect();
    inversion_steps.insert(0, 0);
    Ok(TimestepPlan {
        inversion_steps,
        denoise_steps,
    })
}

/// Closed-form forward jump: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    x0: &LatentImage,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    sched.check_t(t)?;
    check_same_shape(&x0.data, eps)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.mapv(|v| v * sa) + &eps.mapv(|v| v * sb);
    Ok(LatentImage { data, timestep: t })
}

/// Estimate of the clean image from a noisy latent and a noise prediction:
/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`. Rejects `t = 0`, where the
/// division convention is degenerate and the latent already is the image.
pub fn predict_x0(
    x_t: &LatentImage,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t == 0 {
        return Err(VeilError::Parameter(
            "predict_x0 needs t >= 1; at t = 0 the latent is the image".into(),
        ));
    }
    sched.check_t(t)?;
    check_same_shape(&x_t.data, eps_pred)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok((&x_t.data - &eps_pred.mapv(|v| v * sb)).mapv(|v| v / sa))
}

/// One deterministic reverse update from `t` to `t_prev < t`:
/// `x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps_pred`.
pub fn ddim_step(
    x_t: &LatentImage,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentImage> {
    if t_prev >= t {
        return Err(VeilError::Parameter(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    sched.check_t(t)?;
    let x0_hat = predict_x0(x_t, eps_pred, t, sched)?;
    let ab = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0_hat.mapv(|v| v * sa) + &eps_pred.mapv(|v| v * sb);
    Ok(LatentImage {
        data,
        timestep: t_prev,
    })
}

/// Deterministic inversion: runs the DDIM update in reverse time along the
/// plan's ascending steps, evaluating the denoiser at the current latent.
/// `T1 = 0` returns the input unchanged without consulting the plan.
pub fn ddim_inversion(
    x0: &LatentImage,
    t1: usize,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    plan: &TimestepPlan,
) -> Result<LatentImage> {
    if t1 == 0 {
        return Ok(x0.clone());
    }
    sched.check_t(t1)?;
    if plan.inversion_steps.first() != Some(&0) || plan.inversion_steps.last() != Some(&t1) {
        return Err(VeilError::Parameter(format!(
            "plan inversion steps must run 0..={t1}, got {:?}",
            plan.inversion_steps
        )));
    }
    let mut x = x0.data.clone();
    for (s, s_next) in plan.inversion_transitions() {
        let eps = denoiser.predict_noise(&x, s)?;
        check_same_shape(&x, &eps)?;
        // At s = 0 the latent is the clean image (abar = 1).
        let x0_hat = if s == 0 {
            x.clone()
        } else {
            let ab = sched.alpha_bar(s);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            (&x - &eps.mapv(|v| v * sb)).mapv(|v| v / sa)
        };
        let ab = sched.alpha_bar(s_next);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        x = x0_hat.mapv(|v| v * sa) + &eps.mapv(|v| v * sb);
    }
    Ok(LatentImage {
        data: x,
        timestep: t1,
    })
}

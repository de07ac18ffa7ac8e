//! Gradient-guided protection: adversarial perturbation injection along
//! the denoising trajectory, the smoothing noise layer, the disruption and
//! fidelity gradients, and their cross-projection.

use crate::diffusion::{ddim_inversion, ddim_step, make_timestep_plan, LatentImage, NoiseSchedule};
use crate::error::{Result, VeilError};
use crate::filter::{conv_separable_reflect, gaussian_kernel};
use crate::models::{Denoiser, DifferentiableMap};
use crate::tensor::{check_same_shape, dot, norm, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Gaussian smoothing applied inside the defense loop to simulate
/// post-processing; kernel 1 disables it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLayerConfig {
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for NoiseLayerConfig {
    fn default() -> Self {
        NoiseLayerConfig {
            kernel: 3,
            sigma: 1.0,
        }
    }
}

/// Mixing weights for the outer update; `enabled: false` always takes the
/// plain (non-conflicting) combination, the "without projection" ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionWeights {
    pub lambda1: f64,
    pub mu1: f64,
    pub lambda2: f64,
    pub mu2: f64,
    pub enabled: bool,
}

impl Default for ProjectionWeights {
    fn default() -> Self {
        ProjectionWeights {
            lambda1: 1.0,
            mu1: 1.0,
            lambda2: 1.0,
            mu2: 1.0,
            enabled: true,
        }
    }
}

/// The published outer update subtracts the projected disruption gradient,
/// which descends the adversarial objective while the per-step injection
/// ascends it; whether that sign is intended is unsettled, so both are
/// available. `Listing` follows the published combination; `Flipped`
/// negates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterUpdateSign {
    Listing,
    Flipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteBoxConfig {
    /// Inversion depth on the schedule.
    pub t1: usize,
    /// Number of denoise steps (plan length).
    pub t2: usize,
    /// Outer iterations.
    pub k: usize,
    /// Injection strength per step.
    pub alpha: f64,
    /// Inject on the final `inject_start_step` of the `t2` denoise steps.
    pub inject_start_step: usize,
    pub projection: ProjectionWeights,
    pub noise_layer: NoiseLayerConfig,
    pub clamp_final: bool,
    pub outer_update_sign: OuterUpdateSign,
}

impl Default for WhiteBoxConfig {
    fn default() -> Self {
        WhiteBoxConfig {
            t1: 50,
            t2: 10,
            k: 3,
            alpha: 0.05,
            inject_start_step: 10,
            projection: ProjectionWeights::default(),
            noise_layer: NoiseLayerConfig::default(),
            clamp_final: true,
            outer_update_sign: OuterUpdateSign::Listing,
        }
    }
}

pub(crate) fn validate_noise_layer(nl: &NoiseLayerConfig) -> Result<()> {
    if nl.kernel % 2 == 0 || nl.kernel == 0 {
        return Err(VeilError::Parameter(format!(
            "noise layer kernel must be odd, got {}",
            nl.kernel
        )));
    }
    if !(nl.sigma > 0.0) {
        return Err(VeilError::Parameter(format!(
            "noise layer sigma must be > 0, got {}",
            nl.sigma
        )));
    }
    Ok(())
}

pub(crate) fn validate_trajectory(t1: usize, t2: usize, k: usize, alpha: f64, inject: usize) -> Result<()> {
    if t2 < 1 || t2 > t1 {
        return Err(VeilError::Parameter(format!(
            "need 1 <= T2 <= T1, got T1={t1}, T2={t2}"
        )));
    }
    if inject < 1 || inject > t2 {
        return Err(VeilError::Parameter(format!(
            "need 1 <= t <= T2 for the injection step, got t={inject}, T2={t2}"
        )));
    }
    if k < 1 {
        return Err(VeilError::Parameter("need K >= 1 outer iterations".into()));
    }
    // alpha = 0 is allowed so guidance can be switched off for baselines
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(VeilError::Parameter(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

impl WhiteBoxConfig {
    pub fn validate(&self) -> Result<()> {
        validate_trajectory(self.t1, self.t2, self.k, self.alpha, self.inject_start_step)?;
        let p = &self.projection;
        for (name, v) in [
            ("lambda1", p.lambda1),
            ("mu1", p.mu1),
            ("lambda2", p.lambda2),
            ("mu2", p.mu2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(VeilError::Parameter(format!(
                    "projection weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        validate_noise_layer(&self.noise_layer)
    }
}

/// Which combination rule the outer update used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionBranch {
    /// Non-positive inner product: cross-projected combination.
    Conflict,
    /// Positive inner product (or a degenerate gradient): plain combination.
    Aligned,
}

/// One line-delimited record per injection step and per outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceEvent {
    Inject {
        k: usize,
        /// 1-based position within the denoise pass.
        step_index: usize,
        t: usize,
        t_prev: usize,
        active: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        adv_loss: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        grad_norm: Option<f64>,
        /// Cumulative queries after this step (query-only mode).
        #[serde(skip_serializing_if = "Option::is_none")]
        queries: Option<u64>,
    },
    Outer {
        k: usize,
        adv_loss: f64,
        fidelity_l1: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        branch: Option<ProjectionBranch>,
        #[serde(skip_serializing_if = "Option::is_none")]
        g1_norm: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        g2_norm: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        queries: Option<u64>,
    },
}

/// Output of one protection run: the adversarial image, the full
/// step-by-step trace (K x T2 injection records plus K outer records), the
/// elapsed wall time in seconds, and the total query count when the
/// manipulator was query-only.
#[derive(Debug)]
pub struct ProtectionResult {
    pub adversarial_image: LatentImage,
    pub trace: Vec<TraceEvent>,
    pub wall_time: f64,
    pub total_queries: Option<u64>,
}

/// Mean squared difference between two model outputs.
pub fn adversarial_loss(clean_out: &Tensor, candidate_out: &Tensor) -> Result<f64> {
    check_same_shape(clean_out, candidate_out)?;
    let n = clean_out.len() as f64;
    Ok(clean_out
        .iter()
        .zip(candidate_out.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gaussian smoothing of a latent; kernel 1 is the exact identity.
pub fn noise_layer(x: &LatentImage, kernel: usize, sigma: f64) -> Result<LatentImage> {
    validate_noise_layer(&NoiseLayerConfig { kernel, sigma })?;
    if kernel == 1 {
        return Ok(x.clone());
    }
    Ok(LatentImage::at(
        conv_separable_reflect(&x.data, &gaussian_kernel(kernel, sigma))?,
        x.timestep,
    ))
}

/// Gradient of the adversarial loss with respect to `at`, against a cached
/// clean output. Returns (loss, gradient).
fn disruption_gradient(
    manipulator: &dyn DifferentiableMap,
    clean_out: &Tensor,
    at: &Tensor,
) -> Result<(f64, Tensor)> {
    let out = manipulator.forward(at)?;
    let loss = adversarial_loss(clean_out, &out)?;
    let n = out.len() as f64;
    let cot = (&out - clean_out).mapv(|v| 2.0 * v / n);
    Ok((loss, manipulator.vjp(at, &cot)?))
}

fn inject_step_cached(
    x_t2: &LatentImage,
    denoiser: &dyn Denoiser,
    manipulator: &dyn DifferentiableMap,
    clean_out: &Tensor,
    t2: usize,
    t2_prev: usize,
    alpha: f64,
    sched: &NoiseSchedule,
    active: bool,
) -> Result<(LatentImage, Option<(f64, f64)>)> {
    if x_t2.timestep != t2 {
        return Err(VeilError::Parameter(format!(
            "latent is tagged t={}, inject_step was told t2={t2}",
            x_t2.timestep
        )));
    }
    let eps = denoiser.predict_noise(&x_t2.data, t2)?;
    let mut stepped = ddim_step(x_t2, &eps, t2, t2_prev, sched)?;
    if !active {
        return Ok((stepped, None));
    }
    let (loss, grad) = disruption_gradient(manipulator, clean_out, &stepped.data)?;
    if !loss.is_finite() {
        return Err(VeilError::Numerical(format!(
            "adversarial loss is not finite at step t2={t2}"
        )));
    }
    let grad_norm = norm(&grad);
    if alpha != 0.0 {
        stepped.data = stepped.data + &grad.mapv(|v| v * alpha);
    }
    Ok((stepped, Some((loss, grad_norm))))
}

/// One denoise transition with optional perturbation injection: computes
/// `x_{t2-1}` by the deterministic update, then (when active) ascends the
/// adversarial loss by `alpha` times its gradient at `x_{t2-1}`.
#[allow(clippy::too_many_arguments)]
pub fn inject_step(
    x_t2: &LatentImage,
    denoiser: &dyn Denoiser,
    manipulator: &dyn DifferentiableMap,
    x_clean: &LatentImage,
    t2: usize,
    t2_prev: usize,
    alpha: f64,
    sched: &NoiseSchedule,
    active: bool,
) -> Result<LatentImage> {
    let clean_out = manipulator.forward(&x_clean.data)?;
    let (stepped, _) = inject_step_cached(
        x_t2, denoiser, manipulator, &clean_out, t2, t2_prev, alpha, sched, active,
    )?;
    Ok(stepped)
}

fn l1_subgradient(x_clean: &Tensor, x_prime: &Tensor) -> Tensor {
    let n = x_clean.len() as f64;
    let mut g = x_prime - x_clean;
    // sign(0) := 0; do not use signum, which maps +-0 to +-1
    g.mapv_inplace(|v| {
        if v > 0.0 {
            1.0 / n
        } else if v < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    g
}

fn guidance_gradients_cached(
    x_clean: &LatentImage,
    x_prime: &LatentImage,
    manipulator: &dyn DifferentiableMap,
    clean_out: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    check_same_shape(&x_clean.data, &x_prime.data)?;
    let (loss, g1) = disruption_gradient(manipulator, clean_out, &x_prime.data)?;
    let g2 = l1_subgradient(&x_clean.data, &x_prime.data);
    Ok((loss, g1, g2))
}

/// The disruption gradient g1 (of the output-space MSE) and the fidelity
/// gradient g2 (the pixel L1 subgradient), both with respect to `x_prime`.
pub fn guidance_gradients(
    x_clean: &LatentImage,
    x_prime: &LatentImage,
    manipulator: &dyn DifferentiableMap,
) -> Result<(Tensor, Tensor)> {
    let clean_out = manipulator.forward(&x_clean.data)?;
    let (_, g1, g2) = guidance_gradients_cached(x_clean, x_prime, manipulator, &clean_out)?;
    Ok((g1, g2))
}

/// True when the gradients conflict (non-positive inner product) and both
/// are non-degenerate, so the cross-projected branch applies.
pub fn gradients_conflict(g1: &Tensor, g2: &Tensor) -> bool {
    dot(g1, g2) <= 0.0 && dot(g1, g1) > 0.0 && dot(g2, g2) > 0.0
}

/// Merged outer update direction:
/// conflicting gradients are each projected onto the other's orthogonal
/// complement before mixing, otherwise they mix directly.
pub fn gradient_projection(
    g1: &Tensor,
    g2: &Tensor,
    lambda1: f64,
    mu1: f64,
    lambda2: f64,
    mu2: f64,
) -> Result<Tensor> {
    check_same_shape(g1, g2)?;
    if gradients_conflict(g1, g2) {
        let d12 = dot(g1, g2);
        let proj_g1 = g1 - &g2.mapv(|v| v * (d12 / dot(g2, g2)));
        let proj_g2 = g2 - &g1.mapv(|v| v * (d12 / dot(g1, g1)));
        Ok(proj_g1.mapv(|v| v * -lambda1) + &proj_g2.mapv(|v| v * mu1))
    } else {
        Ok(g1.mapv(|v| v * -lambda2) + &g2.mapv(|v| v * mu2))
    }
}

/// Full gradient-guided protection loop: invert to depth T1, then run K
/// passes of injected denoising; between passes the start latent shifts by
/// the merged guidance direction evaluated on the smoothed output.
/// Returns the final pass's denoised image.
pub fn protect_whitebox(
    x: &LatentImage,
    manipulator: &dyn DifferentiableMap,
    denoiser: &dyn Denoiser,
    cfg: &WhiteBoxConfig,
    sched: &NoiseSchedule,
) -> Result<ProtectionResult> {
    cfg.validate()?;
    if x.timestep != 0 {
        return Err(VeilError::Parameter(format!(
            "protection expects a clean image at t=0, got t={}",
            x.timestep
        )));
    }
    let started = Instant::now();
    let plan = make_timestep_plan(cfg.t1, cfg.t2)?;
    let clean_out = manipulator.forward(&x.data)?;
    let start_latent = ddim_inversion(x, cfg.t1, denoiser, sched, &plan)?.data;

    let mut trace = Vec::with_capacity(cfg.k * (cfg.t2 + 1));
    let mut x_tmp = start_latent.clone();
    let mut result = None;
    for k in 1..=cfg.k {
        let mut cur = LatentImage::at(x_tmp.clone(), cfg.t1);
        for (idx, (t, t_prev)) in plan.denoise_transitions().into_iter().enumerate() {
            let step_index = idx + 1;
            let active = step_index > cfg.t2 - cfg.inject_start_step;
            let (next, stats) = inject_step_cached(
                &cur, denoiser, manipulator, &clean_out, t, t_prev, cfg.alpha, sched, active,
            )
            .map_err(|e| e.with_context(format!("outer iteration {k}, step {step_index}")))?;
            trace.push(TraceEvent::Inject {
                k,
                step_index,
                t,
                t_prev,
                active,
                adv_loss: stats.map(|s| s.0),
                grad_norm: stats.map(|s| s.1),
                queries: None,
            });
            cur = next;
        }

        let x_prime = noise_layer(&cur, cfg.noise_layer.kernel, cfg.noise_layer.sigma)?;
        let (outer_loss, g1, g2) = guidance_gradients_cached(x, &x_prime, manipulator, &clean_out)?;
        if !outer_loss.is_finite() {
            return Err(VeilError::Numerical(format!(
                "adversarial loss is not finite after outer iteration {k}"
            )));
        }
        let p = &cfg.projection;
        let (combined, branch) = if p.enabled {
            let b = if gradients_conflict(&g1, &g2) {
                ProjectionBranch::Conflict
            } else {
                ProjectionBranch::Aligned
            };
            (
                gradient_projection(&g1, &g2, p.lambda1, p.mu1, p.lambda2, p.mu2)?,
                Some(b),
            )
        } else {
            (g1.mapv(|v| v * -p.lambda2) + &g2.mapv(|v| v * p.mu2), None)
        };
        let fidelity_l1 =
            (&x_prime.data - &x.data).iter().map(|v| v.abs()).sum::<f64>() / x.data.len() as f64;
        trace.push(TraceEvent::Outer {
            k,
            adv_loss: outer_loss,
            fidelity_l1,
            branch,
            g1_norm: Some(norm(&g1)),
            g2_norm: Some(norm(&g2)),
            queries: None,
        });

        let signed = match cfg.outer_update_sign {
            OuterUpdateSign::Listing => combined,
            OuterUpdateSign::Flipped => combined.mapv(|v| -v),
        };
        // guidance fully off must reproduce the plain reconstruction
        // bit-for-bit, so skip the add when the update is exactly zero
        x_tmp = if signed.iter().all(|&v| v == 0.0) {
            start_latent.clone()
        } else {
            &start_latent + &signed
        };
        result = Some(cur);
    }

    let final_image = result.expect("K >= 1 was validated");
    let adversarial_image = if cfg.clamp_final {
        final_image.clamped_unit()
    } else {
        final_image
    };
    Ok(ProtectionResult {
        adversarial_image,
        trace,
        wall_time: started.elapsed().as_secs_f64(),
        total_queries: None,
    })
}

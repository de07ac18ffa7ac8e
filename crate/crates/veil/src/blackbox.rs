//! Query-only protection: zeroth-order gradient estimation from paired
//! loss probes, and the derivative-free variant of the protection loop.

use crate::diffusion::{ddim_inversion, ddim_step, make_timestep_plan, LatentImage, NoiseSchedule};
use crate::error::{Result, VeilError};
use crate::models::{Denoiser, ForwardModel, QueryOnlyModel};
use crate::tensor::{derive_seed, norm, Tensor};
use crate::whitebox::{
    adversarial_loss, noise_layer, validate_noise_layer, validate_trajectory, NoiseLayerConfig,
    ProtectionResult, TraceEvent,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Zeroth-order estimator settings: `n` sampled directions per estimate at
/// probe scale `sigma`. Antithetic mode probes x +- sigma*u in pairs (the
/// published estimator); one-sided mode spends the same 2n queries on 2n
/// independent directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NESConfig {
    pub n: usize,
    pub sigma: f64,
    pub antithetic: bool,
    pub seed: u64,
}

impl Default for NESConfig {
    fn default() -> Self {
        NESConfig {
            n: 32,
            sigma: 0.01,
            antithetic: true,
            seed: 0,
        }
    }
}

impl NESConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(VeilError::Parameter("NES needs n >= 1 directions".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(VeilError::Parameter(format!(
                "NES sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Queries issued by one estimate.
    pub fn queries_per_estimate(&self) -> u64 {
        2 * self.n as u64
    }
}

/// Query-only protection settings: the trajectory shape of the white-box
/// loop minus the projection weights (no fidelity gradient exists without
/// input gradients), plus the estimator settings and an optional query cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackBoxConfig {
    pub nes: NESConfig,
    pub t1: usize,
    pub t2: usize,
    pub k: usize,
    pub alpha: f64,
    pub inject_start_step: usize,
    pub noise_layer: NoiseLayerConfig,
    pub clamp_final: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_budget: Option<u64>,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig {
            nes: NESConfig::default(),
            t1: 50,
            t2: 10,
            k: 3,
            alpha: 0.05,
            inject_start_step: 10,
            noise_layer: NoiseLayerConfig::default(),
            clamp_final: true,
            query_budget: None,
        }
    }
}

impl BlackBoxConfig {
    pub fn validate(&self) -> Result<()> {
        validate_trajectory(self.t1, self.t2, self.k, self.alpha, self.inject_start_step)?;
        validate_noise_layer(&self.noise_layer)?;
        self.nes.validate()
    }

    /// Exact query count of a full run: one estimate (2n queries) per
    /// active injection step, one trace query per outer iteration, and the
    /// clean output computed once.
    pub fn expected_queries(&self) -> u64 {
        let per_pass = self.inject_start_step as u64 * self.nes.queries_per_estimate();
        self.k as u64 * per_pass + self.k as u64 + 1
    }
}

fn standard_normal_like<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Tensor {
    let values: Vec<f64> = (0..x.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_shape_vec(x.raw_dim(), values).expect("length matches shape by construction")
}

fn checked_probe(value: f64, probe: usize, side: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(VeilError::Numerical(format!(
            "probe {probe}{side} returned a non-finite loss ({value})"
        )))
    }
}

fn nes_gradient_with_stats(
    loss_at: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    cfg: &NESConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, f64)> {
    cfg.validate()?;
    let sigma = cfg.sigma;
    let mut acc = Tensor::zeros(x.raw_dim());
    let mut loss_sum = 0.0;
    if cfg.antithetic {
        for i in 1..=cfg.n {
            let u = standard_normal_like(x, rng);
            let plus = checked_probe(loss_at(&(x + &u.mapv(|v| v * sigma)))?, i, "+")?;
            let minus = checked_probe(loss_at(&(x - &u.mapv(|v| v * sigma)))?, i, "-")?;
            acc = acc + &u.mapv(|v| v * (plus - minus));
            loss_sum += plus + minus;
        }
    } else {
        for j in 1..=2 * cfg.n {
            let w = standard_normal_like(x, rng);
            let value = checked_probe(loss_at(&(x + &w.mapv(|v| v * sigma)))?, j, "")?;
            acc = acc + &w.mapv(|v| v * value);
            loss_sum += value;
        }
    }
    let scale = 1.0 / (cfg.n as f64 * sigma);
    Ok((
        acc.mapv(|v| v * scale),
        loss_sum / (2.0 * cfg.n as f64),
    ))
}

/// Zeroth-order gradient estimate of a scalar loss from exactly 2n loss
/// evaluations: `(1/(n sigma)) * sum_i (L(x + sigma u_i) - L(x - sigma u_i)) u_i`
/// with `u_i` i.i.d. standard normal. Deterministic given the rng state.
pub fn nes_gradient(
    loss_at: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    cfg: &NESConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    nes_gradient_with_stats(loss_at, x, cfg, rng).map(|(g, _)| g)
}

/// Derivative-free protection loop against a query-only manipulator: the
/// injected denoising trajectory of the white-box loop with every gradient
/// replaced by a seeded zeroth-order estimate, and each outer iteration
/// restarting from the smoothed output of the previous one.
/// Query accounting is relative to the wrapper's counter at entry and must
/// finish equal to `cfg.expected_queries()`.
pub fn protect_blackbox(
    x: &LatentImage,
    manipulator: &QueryOnlyModel,
    denoiser: &dyn Denoiser,
    cfg: &BlackBoxConfig,
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
    let base_queries = manipulator.queries();
    let issued = |m: &QueryOnlyModel| m.queries() - base_queries;
    let issue = |q: &Tensor| -> Result<Tensor> {
        if let Some(budget) = cfg.query_budget {
            if issued(manipulator) >= budget {
                return Err(VeilError::Budget(format!(
                    "query budget {budget} exhausted after {} queries",
                    issued(manipulator)
                )));
            }
        }
        manipulator.forward(q)
    };

    let clean_out = issue(&x.data)?;
    let start_latent = ddim_inversion(x, cfg.t1, denoiser, sched, &plan)?.data;

    let mut trace = Vec::with_capacity(cfg.k * (cfg.t2 + 1));
    let mut x_tmp = start_latent;
    let mut result = None;
    for k in 1..=cfg.k {
        let mut cur = LatentImage::at(x_tmp, cfg.t1);
        for (idx, (t, t_prev)) in plan.denoise_transitions().into_iter().enumerate() {
            let step_index = idx + 1;
            let active = step_index > cfg.t2 - cfg.inject_start_step;
            let eps = denoiser.predict_noise(&cur.data, t)?;
            let mut stepped = ddim_step(&cur, &eps, t, t_prev, sched)?;
            let mut adv_loss = None;
            let mut grad_norm = None;
            if active {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.nes.seed,
                    &[k as u64, step_index as u64],
                ));
                let mut loss_at = |q: &Tensor| -> Result<f64> {
                    adversarial_loss(&clean_out, &issue(q)?)
                };
                let (estimate, probe_mean) =
                    nes_gradient_with_stats(&mut loss_at, &stepped.data, &cfg.nes, &mut rng)
                        .map_err(|e| {
                            e.with_context(format!("outer iteration {k}, step {step_index}"))
                        })?;
                // the probe average approximates the loss at the step's
                // latent; the exact value would cost one more query
                adv_loss = Some(probe_mean);
                grad_norm = Some(norm(&estimate));
                if cfg.alpha != 0.0 {
                    stepped.data = stepped.data + &estimate.mapv(|v| v * cfg.alpha);
                }
            }
            trace.push(TraceEvent::Inject {
                k,
                step_index,
                t,
                t_prev,
                active,
                adv_loss,
                grad_norm,
                queries: Some(issued(manipulator)),
            });
            cur = stepped;
        }

        let smoothed = noise_layer(&cur, cfg.noise_layer.kernel, cfg.noise_layer.sigma)?;
        let outer_loss = adversarial_loss(&clean_out, &issue(&smoothed.data)?)?;
        if !outer_loss.is_finite() {
            return Err(VeilError::Numerical(format!(
                "adversarial loss is not finite after outer iteration {k}"
            )));
        }
        let fidelity_l1 =
            (&smoothed.data - &x.data).iter().map(|v| v.abs()).sum::<f64>() / x.data.len() as f64;
        trace.push(TraceEvent::Outer {
            k,
            adv_loss: outer_loss,
            fidelity_l1,
            branch: None,
            g1_norm: None,
            g2_norm: None,
            queries: Some(issued(manipulator)),
        });
        x_tmp = smoothed.data;
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
        total_queries: Some(issued(manipulator)),
    })
}

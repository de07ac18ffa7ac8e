//! Exactly-differentiable linear toys used as closed-form oracles.

use super::{Denoiser, DifferentiableMap, ForwardModel};
use crate::error::{Result, VeilError};
use crate::filter::{flatten, matvec, matvec_t, unflatten};
use crate::tensor::{derive_seed, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Predicts `coefficient * x` regardless of timestep. With coefficient 0 the
/// diffusion trajectory has an exact closed form, which tests lean on.
pub struct LinearDenoiser {
    coefficient: f64,
}

impl LinearDenoiser {
    pub const DEFAULT_COEFFICIENT: f64 = 0.1;

    pub fn new(coefficient: f64) -> Result<Self> {
        if !coefficient.is_finite() {
            return Err(VeilError::Parameter(format!(
                "denoiser coefficient must be finite, got {coefficient}"
            )));
        }
        Ok(LinearDenoiser { coefficient })
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }
}

impl Denoiser for LinearDenoiser {
    fn name(&self) -> &str {
        "linear-denoiser"
    }

    fn predict_noise(&self, x: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(x.mapv(|v| v * self.coefficient))
    }

    fn vjp(&self, _x: &Tensor, _t: usize, cotangent: &Tensor) -> Result<Tensor> {
        Ok(cotangent.mapv(|v| v * self.coefficient))
    }
}

/// `x -> B x` over flattened pixels, `B = 0.85 I + R` with seeded Gaussian
/// `R`. The Jacobian is `B` itself, so injected perturbations have an exact
/// matrix-calculus reference. One matrix is materialized per input shape.
pub struct LinearManipulator {
    seed: u64,
    cache: Mutex<HashMap<(usize, usize, usize), Arc<Array2<f64>>>>,
}

impl LinearManipulator {
    const DIAGONAL: f64 = 0.85;
    const OFF_SCALE: f64 = 0.3;

    pub fn seeded(seed: u64) -> Self {
        LinearManipulator {
            seed,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// The dense matrix for one input shape; pure function of (seed, shape).
    pub fn matrix(&self, shape: (usize, usize, usize)) -> Arc<Array2<f64>> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(shape)
            .or_insert_with(|| {
                let (c, h, w) = shape;
                let n = c * h * w;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[c as u64, h as u64, w as u64]));
                let scale = Self::OFF_SCALE / (n as f64).sqrt();
                let mut b = Array2::from_shape_simple_fn((n, n), || {
                    rng.sample::<f64, _>(StandardNormal) * scale
                });
                for i in 0..n {
                    b[[i, i]] += Self::DIAGONAL;
                }
                Arc::new(b)
            })
            .clone()
    }
}

impl ForwardModel for LinearManipulator {
    fn name(&self) -> &str {
        "linear-manipulator"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.matrix(x.dim());
        let y = matvec(&b, &flatten(x));
        Ok(unflatten(&y, x.dim()))
    }
}

impl DifferentiableMap for LinearManipulator {
    fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        crate::tensor::check_same_shape(x, cotangent)?;
        let b = self.matrix(x.dim());
        let g = matvec_t(&b, &flatten(cotangent));
        Ok(unflatten(&g, x.dim()))
    }
}

//! Toy identity embedding: pooled features through a fixed random
//! projection, normalized to the unit sphere. Cosine similarity between
//! embeddings stands in for a face-recognition identity score.

use crate::error::{Result, VeilError};
use crate::filter::{adaptive_avg_pool, adaptive_avg_pool_adjoint, matvec, matvec_t};
use crate::tensor::{derive_seed, Tensor};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

const POOL_BINS: usize = 8;

pub struct IdentityEncoder {
    seed: u64,
    dim: usize,
    /// Projection depends only on the channel count; one matrix per C.
    cache: Mutex<HashMap<usize, Arc<Array2<f64>>>>,
}

impl IdentityEncoder {
    pub const DEFAULT_DIM: usize = 32;

    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(VeilError::Parameter(format!(
                "identity embedding needs dim >= 2, got {dim}"
            )));
        }
        Ok(IdentityEncoder {
            seed,
            dim,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn projection(&self, channels: usize) -> Arc<Array2<f64>> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(channels)
            .or_insert_with(|| {
                let feat = channels * POOL_BINS * POOL_BINS;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[channels as u64, self.dim as u64],
                ));
                let s = 1.0 / (feat as f64).sqrt();
                Arc::new(Array2::from_shape_simple_fn((self.dim, feat), || {
                    rng.sample::<f64, _>(StandardNormal) * s
                }))
            })
            .clone()
    }

    /// Unit-norm embedding of an image.
    pub fn embed(&self, x: &Tensor) -> Result<Array1<f64>> {
        let (c, _, _) = x.dim();
        let w = self.projection(c);
        let y = matvec(&w, &adaptive_avg_pool(x, POOL_BINS));
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(VeilError::Numerical(
                "identity embedding collapsed to zero".into(),
            ));
        }
        Ok(y.mapv(|v| v / n))
    }

    /// Pulls a cotangent on the unit embedding back to image space.
    /// Differentiates y/|y| exactly: (I - e e^T)/|y| applied upstream.
    pub fn embed_vjp(&self, x: &Tensor, cotangent: &Array1<f64>) -> Result<Tensor> {
        let (c, _, _) = x.dim();
        if cotangent.len() != self.dim {
            return Err(VeilError::Parameter(format!(
                "embedding cotangent has {} entries, encoder dim is {}",
                cotangent.len(),
                self.dim
            )));
        }
        let w = self.projection(c);
        let pooled = adaptive_avg_pool(x, POOL_BINS);
        let y = matvec(&w, &pooled);
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(VeilError::Numerical(
                "identity embedding collapsed to zero".into(),
            ));
        }
        let e = y.mapv(|v| v / n);
        let along = e.iter().zip(cotangent.iter()).map(|(a, b)| a * b).sum::<f64>();
        let g_y: Array1<f64> = cotangent
            .iter()
            .zip(e.iter())
            .map(|(c0, ev)| (c0 - along * ev) / n)
            .collect();
        let g_pool = matvec_t(&w, &g_y);
        Ok(adaptive_avg_pool_adjoint(&g_pool, x.dim(), POOL_BINS))
    }
}

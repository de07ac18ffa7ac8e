//! Toy face swapper: blends a fixed target portrait with content
//! synthesized from a pooled bottleneck of the input, plus a faint blurred
//! copy of the input for context. Identity information flows only through
//! the bottleneck, so perturbing those features breaks the swap while the
//! rest of the image stays put.

use super::{check_rgb, DifferentiableMap, ForwardModel};
use crate::error::Result;
use crate::filter::{
    adaptive_avg_pool, adaptive_avg_pool_adjoint, conv_separable_reflect,
    conv_separable_reflect_adjoint, flatten, gaussian_kernel, matvec, matvec_t, unflatten,
};
use crate::tensor::{derive_seed, Tensor};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

const POOL_BINS: usize = 4;
const EMBED_DIM: usize = 16;
const ENC_GAIN: f64 = 4.0;
const SYNTH_SQUASH: f64 = 0.8;
const TARGET_MIX: f64 = 0.5;
const SYNTH_MIX: f64 = 0.3;
const CONTEXT_MIX: f64 = 0.2;

struct SwapperWeights {
    target: Tensor,
    /// Bottleneck encoder, EMBED_DIM x (C * pool bins).
    enc: Array2<f64>,
    /// Decoder back to image size, numel x EMBED_DIM.
    dec: Array2<f64>,
}

pub struct FaceSwapper {
    seed: u64,
    blur: Vec<f64>,
    cache: Mutex<HashMap<(usize, usize, usize), Arc<SwapperWeights>>>,
}

impl FaceSwapper {
    pub fn seeded(seed: u64) -> Self {
        FaceSwapper {
            seed,
            blur: gaussian_kernel(3, 1.0),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn weights(&self, shape: (usize, usize, usize)) -> Arc<SwapperWeights> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(shape)
            .or_insert_with(|| Arc::new(Self::build_weights(self.seed, shape)))
            .clone()
    }

    fn build_weights(seed: u64, shape: (usize, usize, usize)) -> SwapperWeights {
        let (c, h, w) = shape;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64, h as u64, w as u64]));
        let raw = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        let target = conv_separable_reflect(&raw, &gaussian_kernel(7, 2.0))
            .expect("kernel 7 fits the 8x8 input minimum")
            .mapv(|v| (1.5 * v).tanh() * 0.7);
        let feat = c * POOL_BINS * POOL_BINS;
        let se = 1.0 / (feat as f64).sqrt();
        let enc = Array2::from_shape_simple_fn((EMBED_DIM, feat), || {
            rng.sample::<f64, _>(StandardNormal) * se
        });
        let dec = Array2::from_shape_simple_fn((c * h * w, EMBED_DIM), || {
            rng.sample::<f64, _>(StandardNormal) * 0.25
        });
        SwapperWeights { target, enc, dec }
    }

    /// Bottleneck activations for one input.
    fn bottleneck(&self, w: &SwapperWeights, x: &Tensor) -> Array1<f64> {
        matvec(&w.enc, &adaptive_avg_pool(x, POOL_BINS)).mapv(|v| (ENC_GAIN * v).tanh())
    }
}

impl ForwardModel for FaceSwapper {
    fn name(&self) -> &str {
        "face-swapper"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rgb(x, self.name())?;
        let w = self.weights(x.dim());
        let z = self.bottleneck(&w, x);
        let synth = unflatten(&matvec(&w.dec, &z), x.dim()).mapv(|v| v.tanh() * SYNTH_SQUASH);
        let context = conv_separable_reflect(x, &self.blur)?;
        Ok(w.target.mapv(|v| v * TARGET_MIX)
            + &synth.mapv(|v| v * SYNTH_MIX)
            + &context.mapv(|v| v * CONTEXT_MIX))
    }
}

impl DifferentiableMap for FaceSwapper {
    fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        check_rgb(x, self.name())?;
        crate::tensor::check_same_shape(x, cotangent)?;
        let w = self.weights(x.dim());
        let z = self.bottleneck(&w, x);
        let y = matvec(&w.dec, &z);
        // back through SYNTH_MIX * SYNTH_SQUASH * tanh(dec z)
        let g_y: Array1<f64> = flatten(cotangent)
            .iter()
            .zip(y.iter())
            .map(|(c, yv)| {
                let t = yv.tanh();
                c * SYNTH_MIX * SYNTH_SQUASH * (1.0 - t * t)
            })
            .collect();
        let g_z = matvec_t(&w.dec, &g_y);
        // back through tanh(ENC_GAIN * enc p)
        let g_pre: Array1<f64> = g_z
            .iter()
            .zip(z.iter())
            .map(|(g, zv)| g * ENC_GAIN * (1.0 - zv * zv))
            .collect();
        let g_pool = matvec_t(&w.enc, &g_pre);
        let g_bottleneck = adaptive_avg_pool_adjoint(&g_pool, x.dim(), POOL_BINS);
        let g_context =
            conv_separable_reflect_adjoint(cotangent, &self.blur)?.mapv(|v| v * CONTEXT_MIX);
        Ok(g_bottleneck + &g_context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn probe(shape: (usize, usize, usize), phase: f64) -> Tensor {
        Array3::from_shape_fn(shape, |(c, i, j)| {
            (0.31 * (i as f64) - 0.17 * (j as f64) + 0.9 * (c as f64) + phase).sin() * 0.35
        })
    }

    #[test]
    fn output_blends_toward_fixed_target() {
        let s = FaceSwapper::seeded(4);
        let shape = (3, 12, 12);
        let a = s.forward(&probe(shape, 0.0)).unwrap();
        let b = s.forward(&probe(shape, 2.5)).unwrap();
        let w = s.weights(shape);
        // different inputs, same target component: outputs correlate with it
        let ca = dot(&a, &w.target) / (crate::tensor::norm(&a) * crate::tensor::norm(&w.target));
        let cb = dot(&b, &w.target) / (crate::tensor::norm(&b) * crate::tensor::norm(&w.target));
        assert!(ca > 0.3, "target correlation {ca}");
        assert!(cb > 0.3, "target correlation {cb}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = FaceSwapper::seeded(8);
        let b = FaceSwapper::seeded(8);
        let x = probe((3, 10, 14), 1.0);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn vjp_matches_directional_difference() {
        let s = FaceSwapper::seeded(2);
        let x = probe((3, 9, 8), 0.3);
        let u = probe((3, 9, 8), 3.4).mapv(|v| v * 0.6);
        let v = probe((3, 9, 8), 5.9);
        let h = 1e-6;
        let plus = s.forward(&(&x + &u.mapv(|a| a * h))).unwrap();
        let minus = s.forward(&(&x - &u.mapv(|a| a * h))).unwrap();
        let lhs = dot(&(&plus - &minus).mapv(|a| a / (2.0 * h)), &v);
        let rhs = dot(&s.vjp(&x, &v).unwrap(), &u);
        assert!((lhs - rhs).abs() < 1e-7, "{lhs} vs {rhs}");
    }
}

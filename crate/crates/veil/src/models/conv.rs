//! Small convolutional denoiser with sinusoidal time conditioning.

use super::{check_rgb, Denoiser};
use crate::error::{Result, VeilError};
use crate::filter::{conv2d_reflect, conv2d_reflect_vjp_input};
use crate::tensor::Tensor;
use ndarray::{Array1, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 3 -> 8 -> 3 channel stack of reflect-padded 3x3 convolutions with a tanh
/// in the middle. The timestep enters as `sin(t * f_i)` added to hidden
/// channel `i`, geometric frequencies as is conventional for diffusion time
/// embeddings. Output is scaled down so predicted noise stays small and the
/// inversion/denoise round trip stays well-conditioned.
pub struct ConvDenoiser {
    w1: Array4<f64>,
    b1: Array1<f64>,
    w2: Array4<f64>,
    b2: Array1<f64>,
    freqs: Vec<f64>,
    seed: u64,
}

pub(crate) const HIDDEN: usize = 8;
const OUT_SCALE: f64 = 0.05;

impl ConvDenoiser {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 0.25 / (3.0f64 * 9.0).sqrt();
        let w1 = Array4::from_shape_simple_fn((HIDDEN, 3, 3, 3), || {
            rng.sample::<f64, _>(StandardNormal) * s1
        });
        let b1 = Array1::from_shape_simple_fn(HIDDEN, || rng.sample::<f64, _>(StandardNormal) * 0.02);
        let s2 = 0.25 / (HIDDEN as f64 * 9.0).sqrt();
        let w2 = Array4::from_shape_simple_fn((3, HIDDEN, 3, 3), || {
            rng.sample::<f64, _>(StandardNormal) * s2
        });
        let b2 = Array1::from_shape_simple_fn(3, || rng.sample::<f64, _>(StandardNormal) * 0.02);
        let freqs = (0..HIDDEN)
            .map(|i| 10000.0f64.powf(-(i as f64) / HIDDEN as f64))
            .collect();
        ConvDenoiser {
            w1,
            b1,
            w2,
            b2,
            freqs,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn from_parts(
        w1: Array4<f64>,
        b1: Array1<f64>,
        w2: Array4<f64>,
        b2: Array1<f64>,
        seed: u64,
    ) -> Result<Self> {
        if w1.dim() != (HIDDEN, 3, 3, 3)
            || b1.len() != HIDDEN
            || w2.dim() != (3, HIDDEN, 3, 3)
            || b2.len() != 3
        {
            return Err(VeilError::Format(
                "convolutional denoiser weights have unexpected shapes".into(),
            ));
        }
        let freqs = (0..HIDDEN)
            .map(|i| 10000.0f64.powf(-(i as f64) / HIDDEN as f64))
            .collect();
        Ok(ConvDenoiser {
            w1,
            b1,
            w2,
            b2,
            freqs,
            seed,
        })
    }

    pub(crate) fn parts(&self) -> (&Array4<f64>, &Array1<f64>, &Array4<f64>, &Array1<f64>) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    /// Hidden pre-activation: conv1 plus the channelwise time embedding.
    fn hidden(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut h = conv2d_reflect(x, &self.w1, &self.b1)?;
        for (i, f) in self.freqs.iter().enumerate() {
            let e = (t as f64 * f).sin();
            h.index_axis_mut(ndarray::Axis(0), i).mapv_inplace(|v| v + e);
        }
        Ok(h)
    }
}

impl Denoiser for ConvDenoiser {
    fn name(&self) -> &str {
        "small-convolutional-denoiser"
    }

    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        check_rgb(x, self.name())?;
        let a = self.hidden(x, t)?.mapv(f64::tanh);
        Ok(conv2d_reflect(&a, &self.w2, &self.b2)?.mapv(|v| v * OUT_SCALE))
    }

    fn vjp(&self, x: &Tensor, t: usize, cotangent: &Tensor) -> Result<Tensor> {
        check_rgb(x, self.name())?;
        crate::tensor::check_same_shape(x, cotangent)?;
        let a = self.hidden(x, t)?.mapv(f64::tanh);
        let g_out = cotangent.mapv(|v| v * OUT_SCALE);
        let g_a = conv2d_reflect_vjp_input(&g_out, &self.w2)?;
        // d tanh = 1 - tanh^2, with `a` already the tanh output
        let g_h = &g_a * &a.mapv(|v| 1.0 - v * v);
        Ok(conv2d_reflect_vjp_input(&g_h, &self.w1)?)
    }
}

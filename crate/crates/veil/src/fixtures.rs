//! Deterministic synthetic portrait batches for tests, benchmarks, and
//! the bundled example runs.
//!
//! Each image layers a base tone, an illumination gradient, a handful of
//! Gaussian blobs standing in for facial features, and a faint mid-band
//! texture, then squashes into (-0.85, 0.85) so protection has headroom
//! before the final clamp.

use crate::diffusion::LatentImage;
use crate::error::{Result, VeilError};
use crate::tensor::{derive_seed, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Output range ceiling after the squash.
const SQUASH_SCALE: f64 = 0.85;
const SQUASH_SLOPE: f64 = 1.2;
/// RMS of the mid-band texture layer; kept faint so lossy compression of a
/// clean image stays below the disruption threshold.
const TEXTURE_RMS: f64 = 0.004;

fn gaussian_blob(
    canvas: &mut Array3<f64>,
    center: (f64, f64),
    radius: f64,
    amplitude: [f64; 3],
) {
    let (c, h, w) = canvas.dim();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let di = i as f64 - center.0;
                let dj = j as f64 - center.1;
                let fall = (-(di * di + dj * dj) / (2.0 * radius * radius)).exp();
                canvas[[ch, i, j]] += amplitude[ch] * fall;
            }
        }
    }
}

/// One synthetic portrait. Deterministic in the seed; different seeds give
/// visibly different images.
pub fn toy_face(seed: u64, shape: (usize, usize)) -> Result<LatentImage> {
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return Err(VeilError::Parameter(format!(
            "fixture images need at least 8x8 pixels, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::zeros((3, h, w));

    // base tone, channels correlated like a skin patch
    let tone = rng.random_range(-0.1..0.35);
    let tint: [f64; 3] = [
        tone + rng.random_range(0.0..0.2),
        tone,
        tone - rng.random_range(0.0..0.15),
    ];
    for ch in 0..3 {
        img.index_axis_mut(ndarray::Axis(0), ch).fill(tint[ch]);
    }

    // illumination gradient with a random direction
    let gx = rng.random_range(-0.35..0.35);
    let gy = rng.random_range(-0.35..0.35);
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let u = i as f64 / h as f64 - 0.5;
                let v = j as f64 / w as f64 - 0.5;
                img[[ch, i, j]] += gy * u + gx * v;
            }
        }
    }

    // feature blobs
    let blobs = rng.random_range(3..=5);
    for _ in 0..blobs {
        let ci = rng.random_range(0.15..0.85) * h as f64;
        let cj = rng.random_range(0.15..0.85) * w as f64;
        let radius = rng.random_range(0.08..0.22) * h.min(w) as f64;
        let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let base = sign * rng.random_range(0.2..0.45);
        let amplitude = [
            base * rng.random_range(0.7..1.3),
            base * rng.random_range(0.7..1.3),
            base * rng.random_range(0.7..1.3),
        ];
        gaussian_blob(&mut img, (ci, cj), radius, amplitude);
    }

    // faint mid-band texture: band-passed white noise rescaled to a fixed RMS
    let noise = Array3::from_shape_fn((3, h, w), |_| rng.sample::<f64, _>(StandardNormal));
    let narrow = crate::filter::gaussian_kernel(3, 0.8);
    let wide = crate::filter::gaussian_kernel(9, 2.5);
    let band = if h > 8 && w > 8 {
        let lo = crate::filter::conv_separable_reflect(&noise, &wide)
            .expect("kernel 9 fits images larger than 8x8");
        let hi = crate::filter::conv_separable_reflect(&noise, &narrow)
            .expect("kernel 3 fits images larger than 8x8");
        &hi - &lo
    } else {
        crate::filter::conv_separable_reflect(&noise, &narrow)
            .expect("kernel 3 fits an 8x8 image")
    };
    let rms = (band.iter().map(|v| v * v).sum::<f64>() / band.len() as f64).sqrt();
    if rms > 0.0 {
        img = &img + &band.mapv(|v| v * (TEXTURE_RMS / rms));
    }

    let squashed: Tensor = img.mapv(|v| (SQUASH_SLOPE * v).tanh() * SQUASH_SCALE);
    Ok(LatentImage::new(squashed))
}

/// Named batch `face_000 .. face_{count-1}`; per-image seeds are derived
/// from the root seed, so any prefix of a larger batch matches a smaller
/// one generated from the same seed.
pub fn toy_face_batch(
    seed: u64,
    count: usize,
    shape: (usize, usize),
) -> Result<Vec<(String, LatentImage)>> {
    if count == 0 {
        return Err(VeilError::Parameter("fixture batch needs count >= 1".into()));
    }
    (0..count)
        .map(|i| {
            let img = toy_face(derive_seed(seed, &[i as u64]), shape)?;
            Ok((format!("face_{i:03}"), img))
        })
        .collect()
}

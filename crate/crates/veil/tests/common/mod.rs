//! Shared helpers for the integration suite: independent reference
//! implementations (kept deliberately naive so they cannot share bugs with
//! the library), fixture writers, and a runner for the compiled binary.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};
use veil::diffusion::LatentImage;
use veil::pipeline::pngio::{write_png_atomic, ArtifactMeta};
use veil::Tensor;

/// Scalar diffusion oracle: cumulative signal levels from a linear beta
/// ramp, computed with plain f64 loops. `abar[0] = 1`, `abar[t]` for
/// `t in 1..=steps`.
pub fn scalar_alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    assert!(steps >= 1);
    let mut abar = vec![1.0; steps + 1];
    let mut acc = 1.0;
    for t in 1..=steps {
        let frac = if steps == 1 {
            0.0
        } else {
            (t - 1) as f64 / (steps - 1) as f64
        };
        let beta = beta_start + frac * (beta_end - beta_start);
        acc *= 1.0 - beta;
        abar[t] = acc;
    }
    abar
}

/// Scalar deterministic denoise transition `t -> t_prev` given the noise
/// prediction `eps` at `t`.
pub fn scalar_ddim_step(x_t: f64, eps: f64, t: usize, t_prev: usize, abar: &[f64]) -> f64 {
    let (a_t, a_prev) = (abar[t], abar[t_prev]);
    let x0_hat = (x_t - (1.0 - a_t).sqrt() * eps) / a_t.sqrt();
    a_prev.sqrt() * x0_hat + (1.0 - a_prev).sqrt() * eps
}

/// Scalar inversion transition `s -> t` (s < t) for a denoiser queried at
/// the lower timestep, mirroring the deterministic sampler run backwards.
pub fn scalar_ddim_invert(x_s: f64, eps_at_s: f64, s: usize, t: usize, abar: &[f64]) -> f64 {
    let (a_s, a_t) = (abar[s], abar[t]);
    let x0_hat = if s == 0 {
        x_s
    } else {
        (x_s - (1.0 - a_s).sqrt() * eps_at_s) / a_s.sqrt()
    };
    a_t.sqrt() * x0_hat + (1.0 - a_t).sqrt() * eps_at_s
}

/// Naive single-scale SSIM: an explicit 2-D Gaussian window slid over
/// every valid position with double loops, nothing shared with the
/// library's separable implementation.
pub fn naive_ssim(a: &Tensor, b: &Tensor, window: usize) -> f64 {
    let (c, h, w) = a.dim();
    assert_eq!(a.dim(), b.dim());
    assert!(window % 2 == 1 && window <= h && window <= w);

    // 2-D Gaussian weights, sigma 1.5, normalized to sum 1
    let center = (window - 1) as f64 / 2.0;
    let sigma = 1.5f64;
    let mut weights = vec![vec![0.0; window]; window];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - center).powi(2) + (j as f64 - center).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut weights {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i0 in 0..=(h - window) {
            for j0 in 0..=(w - window) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                for (i, row) in weights.iter().enumerate() {
                    for (j, &wt) in row.iter().enumerate() {
                        let va = a[[ch, i0 + i, j0 + j]];
                        let vb = b[[ch, i0 + i, j0 + j]];
                        ma += wt * va;
                        mb += wt * vb;
                        maa += wt * va * va;
                        mbb += wt * vb * vb;
                        mab += wt * va * vb;
                    }
                }
                let var_a = maa - ma * ma;
                let var_b = mbb - mb * mb;
                let cov = mab - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
                sum += num / den;
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Deterministic pseudo-random tensor from a cheap multiplicative stream;
/// independent of the library's rng stack on purpose. Values in [-1, 1].
pub fn lcg_tensor(seed: u64, shape: (usize, usize, usize)) -> Tensor {
    let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
    let mut next = move || {
        state ^= state >> 33;
        state = state.wrapping_mul(0xff51afd7ed558ccd);
        state ^= state >> 33;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let (c, h, w) = shape;
    let values: Vec<f64> = (0..c * h * w).map(|_| next()).collect();
    Tensor::from_shape_vec(shape, values).unwrap()
}

pub fn scalar_image(v: f64) -> LatentImage {
    LatentImage::new(Tensor::from_elem((1, 1, 1), v))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (veil::tensor::norm(a), veil::tensor::norm(b));
    assert!(na > 0.0 && nb > 0.0, "cosine of a zero vector");
    veil::tensor::dot(a, b) / (na * nb)
}

/// Writes `count` synthetic face PNGs into `dir` and returns their names.
pub fn write_face_batch(
    dir: &Path,
    seed: u64,
    count: usize,
    shape: (usize, usize),
) -> Vec<String> {
    std::fs::create_dir_all(dir).unwrap();
    let batch = veil::fixtures::toy_face_batch(seed, count, shape).unwrap();
    let meta = ArtifactMeta {
        config_hash: "input".into(),
        seed,
    };
    batch
        .iter()
        .map(|(name, img)| {
            write_png_atomic(&dir.join(format!("{name}.png")), &img.data, &meta).unwrap();
            name.clone()
        })
        .collect()
}

/// Runs the compiled CLI with the given arguments and working directory.
pub fn run_cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veil"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Recursively collects (relative path, content hash) pairs so reruns can
/// be compared byte for byte without keeping every file in memory.
pub fn dir_digest(root: &Path) -> Vec<(String, u64)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, u64)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let rel = path.strip_prefix(base).unwrap().display().to_string();
                out.push((rel, veil::tensor::hash_bytes(&bytes)));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

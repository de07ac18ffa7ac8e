//! Image tensor alias and small numeric helpers used throughout the crate.
//!
//! Images are `(channels, height, width)` tensors of `f64`, nominally in
//! `[-1, 1]`. All reductions run in a fixed element order so results are
//! bit-reproducible across runs and worker counts.

use ndarray::Array3;

use crate::error::{Result, VeilError};

/// Image-shaped tensor: `(channels, height, width)`.
pub type Tensor = Array3<f64>;

/// Flat inner product in standard (row-major) element order.
pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm over all elements.
pub fn norm(a: &Tensor) -> f64 {
    dot(a, a).sqrt()
}

pub fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(VeilError::Parameter(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Clamp every element into `[-1, 1]`.
pub fn clamp_unit(t: &Tensor) -> Tensor {
    t.mapv(|v| v.clamp(-1.0, 1.0))
}

pub fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|v| v.is_finite())
}

/// Deterministic seed derivation: a splitmix64 chain over the root seed and
/// tags. Used to give every (image, outer iteration, step) its own stream.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut state = splitmix(root);
    for &tag in tags {
        state = splitmix(state ^ splitmix(tag));
    }
    state
}

/// Stable 64-bit hash of a byte string (FNV-1a), for filename-derived seeds.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

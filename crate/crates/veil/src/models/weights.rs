//! Flat binary weights format so seeded models can be pinned to disk and
//! reloaded bit-for-bit on another machine.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VWTS" | version u32 | kind u8 | seed u64 | n_arrays u32
//! then per array:
//!   name_len u16 | name utf-8 | ndim u8 | dims u32 x ndim | values f64 x prod(dims)
//! ```
//!
//! Models whose weights are deterministic functions of the seed (the
//! attribute editor, face swapper, and linear manipulator materialize
//! theirs lazily per input shape) store only the seed and no arrays.

use super::{ConvDenoiser, Denoiser, DifferentiableMap, LinearDenoiser};
use crate::error::{Result, VeilError};
use ndarray::{Array1, Array4};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VWTS";
const VERSION: u32 = 1;

const MAX_ARRAYS: usize = 64;
const MAX_NAME: usize = 256;
const MAX_NDIM: usize = 4;
const MAX_DIM: usize = 4096;
const MAX_ELEMS: usize = 1 << 24;

/// Model family tags; stable on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindTag {
    LinearDenoiser = 1,
    SmallConvolutional = 2,
    AttributeEditor = 3,
    FaceSwapper = 4,
    LinearManipulator = 5,
}

impl KindTag {
    fn from_u8(v: u8) -> Result<KindTag> {
        Ok(match v {
            1 => KindTag::LinearDenoiser,
            2 => KindTag::SmallConvolutional,
            3 => KindTag::AttributeEditor,
            4 => KindTag::FaceSwapper,
            5 => KindTag::LinearManipulator,
            other => {
                return Err(VeilError::Format(format!(
                    "unknown weights kind tag {other}"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub kind: KindTag,
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
}

pub fn encode_weights(w: &WeightsFile) -> Result<Vec<u8>> {
    if w.arrays.len() > MAX_ARRAYS {
        return Err(VeilError::Format(format!(
            "too many arrays: {}",
            w.arrays.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(w.kind as u8);
    out.extend_from_slice(&w.seed.to_le_bytes());
    out.extend_from_slice(&(w.arrays.len() as u32).to_le_bytes());
    for a in &w.arrays {
        if a.name.len() > MAX_NAME || a.name.is_empty() {
            return Err(VeilError::Format(format!("bad array name {:?}", a.name)));
        }
        if a.dims.is_empty() || a.dims.len() > MAX_NDIM {
            return Err(VeilError::Format(format!(
                "array {} has {} dims",
                a.name,
                a.dims.len()
            )));
        }
        let elems: usize = a.dims.iter().product();
        if a.dims.iter().any(|&d| d == 0 || d > MAX_DIM) || elems > MAX_ELEMS {
            return Err(VeilError::Format(format!(
                "array {} dims {:?} out of range",
                a.name, a.dims
            )));
        }
        if a.values.len() != elems {
            return Err(VeilError::Format(format!(
                "array {} has {} values, dims say {}",
                a.name,
                a.values.len(),
                elems
            )));
        }
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &a.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VeilError::Format(format!(
                "weights file truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Strict decoder; rejects unknown versions, oversize declarations,
/// truncation, trailing garbage, and non-finite values.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightsFile> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(VeilError::Format("not a weights file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(VeilError::Format(format!(
            "unsupported weights version {version}"
        )));
    }
    let kind = KindTag::from_u8(c.u8()?)?;
    let seed = c.u64()?;
    let n_arrays = c.u32()? as usize;
    if n_arrays > MAX_ARRAYS {
        return Err(VeilError::Format(format!("too many arrays: {n_arrays}")));
    }
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = c.u16()? as usize;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(VeilError::Format(format!("bad name length {name_len}")));
        }
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| VeilError::Format("array name is not utf-8".into()))?
            .to_string();
        let ndim = c.u8()? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(VeilError::Format(format!("array {name} has {ndim} dims")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut elems = 1usize;
        for _ in 0..ndim {
            let d = c.u32()? as usize;
            if d == 0 || d > MAX_DIM {
                return Err(VeilError::Format(format!(
                    "array {name} dimension {d} out of range"
                )));
            }
            elems = elems.saturating_mul(d);
            dims.push(d);
        }
        if elems > MAX_ELEMS {
            return Err(VeilError::Format(format!(
                "array {name} declares {elems} elements"
            )));
        }
        let mut values = Vec::with_capacity(elems);
        for _ in 0..elems {
            let v = c.f64()?;
            if !v.is_finite() {
                return Err(VeilError::Format(format!(
                    "array {name} contains a non-finite value"
                )));
            }
            values.push(v);
        }
        arrays.push(NamedArray { name, dims, values });
    }
    if c.pos != bytes.len() {
        return Err(VeilError::Format(format!(
            "{} trailing bytes after weights payload",
            bytes.len() - c.pos
        )));
    }
    Ok(WeightsFile { kind, seed, arrays })
}

pub fn save_weights(path: &Path, w: &WeightsFile) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(w)?)?)
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    decode_weights(&std::fs::read(path)?)
}

fn find_array<'a>(w: &'a WeightsFile, name: &str) -> Result<&'a NamedArray> {
    w.arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| VeilError::Format(format!("weights file is missing array {name}")))
}

/// Capture a model's weights for `save_weights`.
pub fn export_denoiser(d: &ConvDenoiser) -> WeightsFile {
    let (w1, b1, w2, b2) = d.parts();
    let arr = |name: &str, dims: Vec<usize>, values: Vec<f64>| NamedArray {
        name: name.to_string(),
        dims,
        values,
    };
    WeightsFile {
        kind: KindTag::SmallConvolutional,
        seed: d.seed(),
        arrays: vec![
            arr("w1", w1.shape().to_vec(), w1.iter().copied().collect()),
            arr("b1", b1.shape().to_vec(), b1.iter().copied().collect()),
            arr("w2", w2.shape().to_vec(), w2.iter().copied().collect()),
            arr("b2", b2.shape().to_vec(), b2.iter().copied().collect()),
        ],
    }
}

fn array4(a: &NamedArray) -> Result<Array4<f64>> {
    if a.dims.len() != 4 {
        return Err(VeilError::Format(format!("array {} is not 4-d", a.name)));
    }
    Array4::from_shape_vec(
        (a.dims[0], a.dims[1], a.dims[2], a.dims[3]),
        a.values.clone(),
    )
    .map_err(|e| VeilError::Format(format!("array {}: {e}", a.name)))
}

fn array1(a: &NamedArray) -> Result<Array1<f64>> {
    if a.dims.len() != 1 {
        return Err(VeilError::Format(format!("array {} is not 1-d", a.name)));
    }
    Ok(Array1::from_vec(a.values.clone()))
}

/// Rebuild a denoiser from a weights file.
pub fn denoiser_from_weights(w: &WeightsFile) -> Result<Box<dyn Denoiser>> {
    match w.kind {
        KindTag::LinearDenoiser => {
            let c = find_array(w, "coefficient")?;
            if c.values.len() != 1 {
                return Err(VeilError::Format("coefficient must be a scalar".into()));
            }
            Ok(Box::new(LinearDenoiser::new(c.values[0])?))
        }
        KindTag::SmallConvolutional => {
            let d = ConvDenoiser::from_parts(
                array4(find_array(w, "w1")?)?,
                array1(find_array(w, "b1")?)?,
                array4(find_array(w, "w2")?)?,
                array1(find_array(w, "b2")?)?,
                w.seed,
            )?;
            Ok(Box::new(d))
        }
        other => Err(VeilError::Format(format!(
            "weights kind {other:?} is not a denoiser"
        ))),
    }
}

/// Rebuild a manipulator from a weights file. Seed-defined kinds carry no
/// arrays; their per-shape weights regenerate from the stored seed.
pub fn manipulator_from_weights(w: &WeightsFile) -> Result<Box<dyn DifferentiableMap>> {
    match w.kind {
        KindTag::AttributeEditor => Ok(Box::new(super::AttributeEditor::seeded(w.seed))),
        KindTag::FaceSwapper => Ok(Box::new(super::FaceSwapper::seeded(w.seed))),
        KindTag::LinearManipulator => Ok(Box::new(super::LinearManipulator::seeded(w.seed))),
        other => Err(VeilError::Format(format!(
            "weights kind {other:?} is not a manipulator"
        ))),
    }
}

/// Capture a seed-defined manipulator by kind.
pub fn export_seeded_manipulator(kind: KindTag, seed: u64) -> Result<WeightsFile> {
    match kind {
        KindTag::AttributeEditor | KindTag::FaceSwapper | KindTag::LinearManipulator => {
            Ok(WeightsFile {
                kind,
                seed,
                arrays: Vec::new(),
            })
        }
        other => Err(VeilError::Format(format!(
            "kind {other:?} is not a seed-defined manipulator"
        ))),
    }
}

/// Capture a linear denoiser (stores the coefficient as a 1-element array).
pub fn export_linear_denoiser(d: &LinearDenoiser) -> WeightsFile {
    WeightsFile {
        kind: KindTag::LinearDenoiser,
        seed: 0,
        arrays: vec![NamedArray {
            name: "coefficient".into(),
            dims: vec![1],
            values: vec![d.coefficient()],
        }],
    }
}

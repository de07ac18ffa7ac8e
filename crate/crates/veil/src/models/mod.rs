//! Forward models and their gradient plumbing: toy denoisers, toy
//! manipulators, the identity embedding, query-only wrappers, weight
//! serialization, and a remote-manipulator adapter.
//!
//! Models are immutable after construction and safe to share across
//! threads; lazily materialized per-shape weights sit behind locks and
//! are pure functions of the construction seed.

mod conv;
mod editor;
mod encoder;
mod linear;
mod remote;
mod swapper;
pub mod weights;

pub use conv::ConvDenoiser;
pub use editor::AttributeEditor;
pub use encoder::IdentityEncoder;
pub use linear::{LinearDenoiser, LinearManipulator};
pub use remote::{
    encode_wire_request, encode_wire_response, parse_wire_request, parse_wire_response,
    InProcessTransport, RemoteManipulator, Transport, WireRequest, WireResponse,
};
pub use swapper::FaceSwapper;

use crate::error::{Result, VeilError};
use crate::tensor::{check_same_shape, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Scalar objective over a model output, with its exact gradient.
pub trait OutputLoss {
    fn value(&self, out: &Tensor) -> Result<f64>;
    fn grad(&self, out: &Tensor) -> Result<Tensor>;
}

/// Mean squared error against a fixed target.
pub struct MseTo {
    pub target: Tensor,
}

impl OutputLoss for MseTo {
    fn value(&self, out: &Tensor) -> Result<f64> {
        check_same_shape(out, &self.target)?;
        let n = out.len() as f64;
        Ok(out
            .iter()
            .zip(self.target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    fn grad(&self, out: &Tensor) -> Result<Tensor> {
        check_same_shape(out, &self.target)?;
        let n = out.len() as f64;
        Ok((out - &self.target).mapv(|v| 2.0 * v / n))
    }
}

/// `value = <weights, out>`; its gradient is the weight tensor itself.
/// Handy for probing vector-Jacobian products one cotangent at a time.
pub struct LinearFunctional {
    pub weights: Tensor,
}

impl OutputLoss for LinearFunctional {
    fn value(&self, out: &Tensor) -> Result<f64> {
        check_same_shape(out, &self.weights)?;
        Ok(crate::tensor::dot(out, &self.weights))
    }

    fn grad(&self, out: &Tensor) -> Result<Tensor> {
        check_same_shape(out, &self.weights)?;
        Ok(self.weights.clone())
    }
}

/// Anything that maps an image tensor to an image tensor.
pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

/// A forward model that also exposes exact input gradients through a
/// vector-Jacobian product.
pub trait DifferentiableMap: ForwardModel {
    /// `J(x)^T cotangent` where `J` is the Jacobian of `forward` at `x`.
    fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor>;

    /// Gradient of `loss(forward(x))` with respect to `x`.
    fn input_gradient(&self, x: &Tensor, loss: &dyn OutputLoss) -> Result<Tensor> {
        let out = self.forward(x)?;
        self.vjp(x, &loss.grad(&out)?)
    }
}

/// A noise predictor conditioned on the diffusion timestep.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor>;
    /// Vector-Jacobian product of `predict_noise(., t)` at `x`.
    fn vjp(&self, x: &Tensor, t: usize, cotangent: &Tensor) -> Result<Tensor>;
}

/// A denoiser pinned to one timestep, viewed as a plain differentiable map.
pub struct DenoiserAt<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub t: usize,
}

impl ForwardModel for DenoiserAt<'_> {
    fn name(&self) -> &str {
        self.denoiser.name()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.denoiser.predict_noise(x, self.t)
    }
}

impl DifferentiableMap for DenoiserAt<'_> {
    fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        self.denoiser.vjp(x, self.t, cotangent)
    }
}

/// Query-counting wrapper that statically hides every gradient pathway.
/// The inner model is reachable only through `forward`, so code compiled
/// against this type cannot request a vector-Jacobian product.
pub struct QueryOnlyModel {
    inner: Box<dyn ForwardModel>,
    count: AtomicU64,
}

impl QueryOnlyModel {
    pub fn new(inner: Box<dyn ForwardModel>) -> Self {
        QueryOnlyModel {
            inner,
            count: AtomicU64::new(0),
        }
    }

    /// Total forward queries issued since construction.
    pub fn queries(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }
}

impl ForwardModel for QueryOnlyModel {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(x)
    }
}

/// Seal a differentiable model behind the query-only interface.
pub fn wrap_black_box(inner: Box<dyn DifferentiableMap>) -> QueryOnlyModel {
    QueryOnlyModel::new(inner as Box<dyn ForwardModel>)
}

/// Toy denoiser families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    /// Predicts `coefficient * x` at every timestep; closed-form trajectories.
    Linear,
    /// Two reflect-padded 3x3 convolutions with a sinusoidal time embedding.
    SmallConvolutional,
}

impl fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiserKind::Linear => "linear",
            DenoiserKind::SmallConvolutional => "small-convolutional",
        })
    }
}

/// Toy manipulator families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManipulatorKind {
    /// Saturating band-pass feature editor; stands in for attribute editing.
    AttributeEditor,
    /// Target-blending bottleneck generator; stands in for face swapping.
    FaceSwapper,
    /// Fixed random linear map `x -> B x`; exact matrix-calculus oracle.
    Linear,
}

impl fmt::Display for ManipulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManipulatorKind::AttributeEditor => "attribute-editor",
            ManipulatorKind::FaceSwapper => "face-swapper",
            ManipulatorKind::Linear => "linear",
        })
    }
}

/// Build a toy denoiser. Factories are pure functions of the seed; the
/// linear kind has no weights and ignores it.
pub fn make_toy_denoiser(seed: u64, kind: DenoiserKind) -> Result<Box<dyn Denoiser>> {
    Ok(match kind {
        DenoiserKind::Linear => Box::new(LinearDenoiser::new(LinearDenoiser::DEFAULT_COEFFICIENT)?),
        DenoiserKind::SmallConvolutional => Box::new(ConvDenoiser::seeded(seed)),
    })
}

/// Build a toy manipulator; pure function of the seed.
pub fn make_toy_manipulator(seed: u64, kind: ManipulatorKind) -> Result<Box<dyn DifferentiableMap>> {
    Ok(match kind {
        ManipulatorKind::AttributeEditor => Box::new(AttributeEditor::seeded(seed)),
        ManipulatorKind::FaceSwapper => Box::new(FaceSwapper::seeded(seed)),
        ManipulatorKind::Linear => Box::new(LinearManipulator::seeded(seed)),
    })
}

/// Build the toy identity embedding with `dim` output dimensions (>= 2).
pub fn make_toy_identity_encoder(seed: u64, dim: usize) -> Result<IdentityEncoder> {
    IdentityEncoder::new(seed, dim)
}

/// Requires 3-channel input; models here are face models.
pub(crate) fn check_rgb(x: &Tensor, model: &str) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(VeilError::Model(format!(
            "{model} expects 3-channel input, got {c} channels"
        )));
    }
    // 8x8 floor keeps every internal kernel's reflect padding in range
    if h < 8 || w < 8 {
        return Err(VeilError::Model(format!(
            "{model} needs at least 8x8 images, got {h}x{w}"
        )));
    }
    Ok(())
}

//! Remote-manipulator adapter: a documented JSON request/response contract
//! so the query-only defense path can target an out-of-process model. The
//! test suite drives it with an in-process loopback transport.

use super::ForwardModel;
use crate::error::{Result, VeilError};
use crate::tensor::Tensor;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

const WIRE_VERSION: u32 = 1;
const MAX_WIRE_ELEMS: usize = 1 << 24;

/// `{"v":1,"op":"forward","shape":[c,h,w],"data":[...]}`, row-major data.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub v: u32,
    pub op: String,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

/// `{"v":1,"ok":true,"shape":...,"data":...}` or `{"v":1,"ok":false,"error":"..."}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WireResponse {
    pub v: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn check_payload(shape: &[usize; 3], data: &[f64]) -> Result<()> {
    let elems = shape
        .iter()
        .try_fold(1usize, |acc, &d| {
            if d == 0 {
                None
            } else {
                acc.checked_mul(d)
            }
        })
        .ok_or_else(|| VeilError::Format(format!("wire shape {shape:?} is degenerate")))?;
    if elems > MAX_WIRE_ELEMS {
        return Err(VeilError::Format(format!(
            "wire payload declares {elems} elements"
        )));
    }
    if data.len() != elems {
        return Err(VeilError::Format(format!(
            "wire payload has {} values, shape {shape:?} needs {elems}",
            data.len()
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(VeilError::Format("wire payload has non-finite values".into()));
    }
    Ok(())
}

fn wire_tensor(shape: &[usize; 3], data: Vec<f64>) -> Result<Tensor> {
    check_payload(shape, &data)?;
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .map_err(|e| VeilError::Format(format!("wire payload rejected: {e}")))
}

/// Parse and validate a request envelope.
pub fn parse_wire_request(bytes: &[u8]) -> Result<WireRequest> {
    let req: WireRequest = serde_json::from_slice(bytes)
        .map_err(|e| VeilError::Format(format!("bad wire request: {e}")))?;
    if req.v != WIRE_VERSION {
        return Err(VeilError::Format(format!(
            "unsupported wire version {}",
            req.v
        )));
    }
    if req.op != "forward" {
        return Err(VeilError::Format(format!("unknown wire op {:?}", req.op)));
    }
    check_payload(&req.shape, &req.data)?;
    Ok(req)
}

/// Parse and validate a response envelope.
pub fn parse_wire_response(bytes: &[u8]) -> Result<WireResponse> {
    let resp: WireResponse = serde_json::from_slice(bytes)
        .map_err(|e| VeilError::Format(format!("bad wire response: {e}")))?;
    if resp.v != WIRE_VERSION {
        return Err(VeilError::Format(format!(
            "unsupported wire version {}",
            resp.v
        )));
    }
    if resp.ok {
        match (&resp.shape, &resp.data) {
            (Some(shape), Some(data)) => check_payload(shape, data)?,
            _ => {
                return Err(VeilError::Format(
                    "ok response is missing shape or data".into(),
                ))
            }
        }
    } else if resp.error.is_none() {
        return Err(VeilError::Format(
            "error response is missing the error message".into(),
        ));
    }
    Ok(resp)
}

pub fn encode_wire_request(x: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = x.dim();
    let req = WireRequest {
        v: WIRE_VERSION,
        op: "forward".into(),
        shape: [c, h, w],
        data: x.iter().copied().collect(),
    };
    check_payload(&req.shape, &req.data)?;
    Ok(serde_json::to_vec(&req).expect("wire request serialization"))
}

pub fn encode_wire_response(result: Result<Tensor>) -> Vec<u8> {
    let resp = match result {
        Ok(t) => {
            let (c, h, w) = t.dim();
            WireResponse {
                v: WIRE_VERSION,
                ok: true,
                shape: Some([c, h, w]),
                data: Some(t.iter().copied().collect()),
                error: None,
            }
        }
        Err(e) => WireResponse {
            v: WIRE_VERSION,
            ok: false,
            shape: None,
            data: None,
            error: Some(e.to_string()),
        },
    };
    serde_json::to_vec(&resp).expect("wire response serialization")
}

/// Carries one request to a model and returns the raw response bytes.
pub trait Transport: Send + Sync {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>>;
}

/// Loopback transport: serves requests from a local model, exercising the
/// full encode/decode path without a network.
pub struct InProcessTransport {
    model: Box<dyn ForwardModel>,
}

impl InProcessTransport {
    pub fn new(model: Box<dyn ForwardModel>) -> Self {
        InProcessTransport { model }
    }
}

impl Transport for InProcessTransport {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>> {
        let req = parse_wire_request(request)?;
        let result = wire_tensor(&req.shape, req.data).and_then(|x| self.model.forward(&x));
        Ok(encode_wire_response(result))
    }
}

/// A manipulator living behind a transport; forward-only by construction.
pub struct RemoteManipulator {
    transport: Box<dyn Transport>,
    label: String,
}

impl RemoteManipulator {
    pub fn new(transport: Box<dyn Transport>, label: impl Into<String>) -> Self {
        RemoteManipulator {
            transport,
            label: label.into(),
        }
    }
}

impl ForwardModel for RemoteManipulator {
    fn name(&self) -> &str {
        &self.label
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let resp = parse_wire_response(&self.transport.roundtrip(&encode_wire_request(x)?)?)?;
        if !resp.ok {
            return Err(VeilError::Model(format!(
                "remote manipulator failed: {}",
                resp.error.unwrap_or_default()
            )));
        }
        wire_tensor(&resp.shape.unwrap(), resp.data.unwrap())
    }
}

//! JSON-over-HTTP wire formats shared by remote scorers, noise predictors and
//! LLM clients, plus the blocking client used to reach them.
//!
//! Images travel as base64 8-bit PNG. Gradients and noise travel as base64
//! little-endian float32 in `[H, W, 3]` order, with the shape alongside.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{f32_le_to_f64, f64_to_f32_le, Image, ImageError};
use crate::negation::Spatial;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("http {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Base64(#[from] base64::DecodeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ProtocolError {
    /// Whether retrying the same request could succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProtocolError::Transport(_) => true,
            ProtocolError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image_b64: String,
    pub text: String,
    pub model: String,
    pub want_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// `image_b64` is raw float32 rather than PNG: noisy images leave [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictNoiseRequest {
    pub image_b64: String,
    pub shape: [usize; 3],
    pub text: String,
    pub timestep: usize,
    pub want_uncond: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictNoiseResponse {
    pub noise_b64: String,
    pub shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncond_b64: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedMap {
    pub modifier: String,
    pub attribute: String,
    #[serde(default)]
    pub spatial: Spatial,
    pub saliency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub maps: Vec<AnalyzedMap>,
    pub irrelevant: Vec<String>,
}

pub fn encode_png_b64(image: &Image) -> Result<String, ProtocolError> {
    Ok(STANDARD.encode(image.to_png_bytes()?))
}

pub fn decode_png_b64(text: &str) -> Result<Image, ProtocolError> {
    Ok(Image::from_png_bytes(&STANDARD.decode(text)?)?)
}

pub fn encode_f32_b64(values: &[f64]) -> String {
    STANDARD.encode(f64_to_f32_le(values))
}

/// Decodes a float32 payload and checks it against `[H, W, 3]`.
pub fn decode_f32_b64(text: &str, shape: [usize; 3]) -> Result<Image, ProtocolError> {
    if shape[2] != 3 {
        return Err(ProtocolError::Payload(format!("expected 3 channels, got shape {shape:?}")));
    }
    let values = f32_le_to_f64(&STANDARD.decode(text)?)?;
    Ok(Image::from_data(shape[1], shape[0], values)?)
}

/// Blocking JSON client for one base URL.
#[derive(Clone, Debug)]
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProtocolError> {
        let body = serde_json::to_value(body)?;
        Self::finish(self.agent.post(&format!("{}{path}", self.base)).send_json(body))
    }

    pub fn get_json<Resp: DeserializeOwned>(&self, path: &str) -> Result<Resp, ProtocolError> {
        Self::finish(self.agent.get(&format!("{}{path}", self.base)).call())
    }

    /// Sends a raw body and returns the status and text, without treating
    /// error statuses as failures. Used to probe error handling.
    pub fn post_raw(&self, path: &str, body: &str) -> Result<(u16, String), ProtocolError> {
        let req = self.agent.post(&format!("{}{path}", self.base)).set("Content-Type", "application/json");
        match req.send_string(body) {
            Ok(resp) => Ok((resp.status(), resp.into_string().map_err(|e| ProtocolError::Transport(e.to_string()))?)),
            Err(ureq::Error::Status(code, resp)) => Ok((code, resp.into_string().unwrap_or_default())),
            Err(e) => Err(ProtocolError::Transport(e.to_string())),
        }
    }

    fn finish<Resp: DeserializeOwned>(result: Result<ureq::Response, ureq::Error>) -> Result<Resp, ProtocolError> {
        match result {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| ProtocolError::Transport(e.to_string()))?;
                Ok(serde_json::from_str(&text)?)
            }
            Err(ureq::Error::Status(status, resp)) => {
                Err(ProtocolError::Status { status, body: resp.into_string().unwrap_or_default() })
            }
            Err(e) => Err(ProtocolError::Transport(e.to_string())),
        }
    }
}

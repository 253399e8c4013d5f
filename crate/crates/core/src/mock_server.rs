//! In-process HTTP server speaking the scorer, noise-predictor and analysis
//! protocols, backed by the mock scorers, the toy denoiser and the rule-based
//! negation client.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::guidance::{DiffusionSchedule, NoisePredictor, ToyDenoiser};
use crate::image::Image;
use crate::keyed::keyed_color;
use crate::negation::{extract_maps, LlmClient, RuleBasedClient};
use crate::preference::{mock_scorer, MOCK_SCORER_IDS};
use crate::protocol::{
    decode_f32_b64, decode_png_b64, encode_f32_b64, AnalyzeRequest, AnalyzeResponse, AnalyzedMap, ErrorBody,
    HealthResponse, PredictNoiseRequest, PredictNoiseResponse, ScoreRequest, ScoreResponse,
};

const MAX_BODY: u64 = 64 << 20;
const WORKERS: usize = 4;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
}

pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and serves on worker threads.
    pub fn start(addr: &str) -> Result<Self, ServerError> {
        let server = Server::http(addr).map_err(|e| ServerError::Bind { addr: addr.into(), message: e.to_string() })?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| ServerError::Bind { addr: addr.into(), message: "not an IP listener".into() })?;
        let server = Arc::new(server);
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                std::thread::spawn(move || {
                    for request in server.incoming_requests() {
                        handle(request);
                    }
                })
            })
            .collect();
        Ok(Self { server, addr: bound, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit, which only happens on shutdown.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

type Reply = (u16, String);

fn json<T: serde::Serialize>(status: u16, body: &T) -> Reply {
    (status, serde_json::to_string(body).expect("wire types serialize"))
}

fn error(status: u16, message: impl Into<String>) -> Reply {
    json(status, &ErrorBody { error: message.into() })
}

fn handle(mut request: Request) {
    let mut body = String::new();
    let read = request.as_reader().take(MAX_BODY).read_to_string(&mut body);
    let (status, text) = match read {
        Err(e) => error(400, format!("unreadable body: {e}")),
        Ok(_) => route(request.method(), request.url(), &body),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_string(text).with_status_code(status).with_header(header);
    if let Err(e) = request.respond(response) {
        log::warn!("mock server failed to respond: {e}");
    }
}

fn route(method: &Method, url: &str, body: &str) -> Reply {
    let path = url.split('?').next().unwrap_or(url);
    match (method, path) {
        (Method::Get, "/health") => json(
            200,
            &HealthResponse { status: "ok".into(), models: MOCK_SCORER_IDS.iter().map(|s| s.to_string()).collect() },
        ),
        (Method::Post, "/score") => score(body),
        (Method::Post, "/predict_noise") => predict_noise(body),
        (Method::Post, "/analyze") => analyze(body),
        (_, "/health" | "/score" | "/predict_noise" | "/analyze") => error(405, format!("method {method} not allowed")),
        _ => error(404, format!("no route for {path}")),
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error(400, format!("malformed request: {e}")))
}

fn score(body: &str) -> Reply {
    let req: ScoreRequest = match parse(body) {
        Ok(r) => r,
        Err(reply) => return reply,
    };
    let Ok(scorer) = mock_scorer(&req.model) else {
        return error(404, format!("unknown model `{}`", req.model));
    };
    let image = match decode_png_b64(&req.image_b64) {
        Ok(img) => img,
        Err(e) => return error(400, format!("bad image: {e}")),
    };
    match scorer.score(&image, &req.text) {
        Ok(signal) => {
            let (gradient_b64, shape) = if req.want_gradient {
                (Some(encode_f32_b64(signal.gradient.data())), Some(image.shape()))
            } else {
                (None, None)
            };
            json(200, &ScoreResponse { score: signal.score, gradient_b64, shape })
        }
        Err(e) => error(500, e.to_string()),
    }
}

/// Flat prompt-keyed target for the toy denoiser.
pub fn toy_target(text: &str, width: usize, height: usize) -> Image {
    Image::filled(width, height, keyed_color(text, "toy-target"))
}

fn predict_noise(body: &str) -> Reply {
    let req: PredictNoiseRequest = match parse(body) {
        Ok(r) => r,
        Err(reply) => return reply,
    };
    let noisy = match decode_f32_b64(&req.image_b64, req.shape) {
        Ok(img) => img,
        Err(e) => return error(400, format!("bad image: {e}")),
    };
    let toy = ToyDenoiser::new(toy_target(&req.text, noisy.width(), noisy.height()), DiffusionSchedule::default());
    match toy.predict(&noisy, &req.text, req.timestep) {
        Ok(pred) => json(
            200,
            &PredictNoiseResponse {
                noise_b64: encode_f32_b64(pred.conditional.data()),
                shape: req.shape,
                uncond_b64: None,
            },
        ),
        Err(e) => error(400, e.to_string()),
    }
}

fn analyze(body: &str) -> Reply {
    let req: AnalyzeRequest = match parse(body) {
        Ok(r) => r,
        Err(reply) => return reply,
    };
    let client = RuleBasedClient::bundled();
    let maps = extract_maps(&req.prompt);
    let saliency = client.saliency(&req.prompt, &maps).expect("rule client is infallible");
    let irrelevant = client.irrelevant(&req.prompt, &maps).expect("rule client is infallible");
    let maps = maps
        .into_iter()
        .zip(saliency)
        .map(|(m, saliency)| AnalyzedMap { modifier: m.modifier, attribute: m.attribute, spatial: m.spatial, saliency })
        .collect();
    json(200, &AnalyzeResponse { maps, irrelevant })
}

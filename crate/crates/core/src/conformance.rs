//! Protocol conformance checks for any scorer endpoint: schema, shapes,
//! determinism, gradient accuracy and error codes.

use std::time::Duration;

use serde::Serialize;

use crate::image::Image;
use crate::protocol::{
    decode_f32_b64, encode_png_b64, ErrorBody, HealthResponse, HttpClient, ProtocolError, ScoreRequest, ScoreResponse,
};

/// Relative tolerance of the finite-difference gradient spot check.
pub const GRADIENT_TOLERANCE: f64 = 5e-2;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConformanceReport {
    pub url: String,
    pub models: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Smooth mid-gray pattern so ±8/255 probes stay inside [0,1] after PNG
/// quantization.
pub fn probe_image(width: usize, height: usize) -> Image {
    let mut img = Image::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / width.max(1) as f64;
            let fy = y as f64 / height.max(1) as f64;
            img.set_pixel(x, y, [0.3 + 0.4 * fx, 0.35 + 0.3 * fy, 0.5 + 0.2 * (fx - fy)]);
        }
    }
    img
}

fn quantize(img: &Image) -> Image {
    let data = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
    Image::from_data(img.width(), img.height(), data).expect("same shape")
}

struct Suite {
    client: HttpClient,
    checks: Vec<Check>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, outcome: Result<String, String>) {
        let name = name.into();
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        log::info!("conformance {}: {name} {detail}", if passed { "pass" } else { "FAIL" });
        self.checks.push(Check { name, passed, detail });
    }

    fn score(&self, img: &Image, text: &str, model: &str, want_gradient: bool) -> Result<ScoreResponse, String> {
        let req = ScoreRequest {
            image_b64: encode_png_b64(img).map_err(|e| e.to_string())?,
            text: text.into(),
            model: model.into(),
            want_gradient,
        };
        self.client.post_json("/score", &req).map_err(|e| e.to_string())
    }

    fn expect_error(&self, path: &str, body: &str, status: u16) -> Result<String, String> {
        let (got, text) = self.client.post_raw(path, body).map_err(|e| e.to_string())?;
        if got != status {
            return Err(format!("expected http {status}, got {got}: {text}"));
        }
        let parsed: ErrorBody = serde_json::from_str(&text).map_err(|e| format!("error body is not {{error}}: {e}"))?;
        Ok(format!("http {got}: {}", parsed.error))
    }
}

fn gradient_of(resp: &ScoreResponse, img: &Image) -> Result<Image, String> {
    let (Some(g), Some(shape)) = (&resp.gradient_b64, resp.shape) else {
        return Err("response lacks gradient_b64/shape".into());
    };
    if shape != img.shape() {
        return Err(format!("shape {shape:?}, expected {:?}", img.shape()));
    }
    let grad = decode_f32_b64(g, shape).map_err(|e| e.to_string())?;
    if !grad.is_finite() || !resp.score.is_finite() {
        return Err("non-finite score or gradient".into());
    }
    Ok(grad)
}

const TEXT: &str = "a tall person wearing a red jacket and blue jeans";

pub fn run(url: &str, timeout: Duration) -> ConformanceReport {
    let mut suite = Suite { client: HttpClient::new(url, timeout), checks: Vec::new() };
    let health: Result<HealthResponse, ProtocolError> = suite.client.get_json("/health");
    let models = match health {
        Ok(h) if h.status == "ok" && !h.models.is_empty() => {
            suite.record("health", Ok(format!("models {:?}", h.models)));
            h.models
        }
        Ok(h) => {
            suite.record("health", Err(format!("unexpected health payload {h:?}")));
            Vec::new()
        }
        Err(e) => {
            suite.record("health", Err(e.to_string()));
            Vec::new()
        }
    };

    let square = probe_image(16, 16);
    let wide = probe_image(24, 10);
    for model in &models {
        let full = suite.score(&square, TEXT, model, true).and_then(|r| gradient_of(&r, &square).map(|g| (r, g)));
        suite.record(
            format!("{model}: score schema"),
            full.as_ref().map(|(r, _)| format!("score {}", r.score)).map_err(Clone::clone),
        );
        let shaped =
            suite.score(&wide, TEXT, model, true).and_then(|r| gradient_of(&r, &wide).map(|_| "24x10 ok".to_string()));
        suite.record(format!("{model}: non-square shape"), shaped);

        let Ok((first, grad)) = full else { continue };
        let again = suite.score(&square, TEXT, model, true);
        suite.record(
            format!("{model}: determinism"),
            match again {
                Ok(r) if r == first => Ok("identical responses".into()),
                Ok(_) => Err("repeated request changed the response".into()),
                Err(e) => Err(e),
            },
        );
        let plain = suite.score(&square, TEXT, model, false);
        suite.record(
            format!("{model}: score without gradient"),
            match plain {
                Ok(r) if r.score == first.score => Ok("score matches".into()),
                Ok(r) => Err(format!("score {} differs from {}", r.score, first.score)),
                Err(e) => Err(e),
            },
        );
        let fd = gradient_spot_check(&suite, model, &square, &grad);
        suite.record(format!("{model}: gradient spot check"), fd);
    }

    let unknown = ScoreRequest {
        image_b64: encode_png_b64(&square).unwrap_or_default(),
        text: TEXT.into(),
        model: "no-such-model".into(),
        want_gradient: true,
    };
    let unknown = serde_json::to_string(&unknown).expect("serializable");
    let r = suite.expect_error("/score", &unknown, 404);
    suite.record("unknown model is 404", r);
    let r = suite.expect_error("/score", "{not json", 400);
    suite.record("malformed json is 400", r);
    let model = models.first().cloned().unwrap_or_default();
    let missing = serde_json::json!({ "text": TEXT, "model": model }).to_string();
    let r = suite.expect_error("/score", &missing, 400);
    suite.record("missing field is 400", r);
    let bad_image =
        serde_json::json!({ "image_b64": "%%%", "text": TEXT, "model": model, "want_gradient": true }).to_string();
    let r = suite.expect_error("/score", &bad_image, 400);
    suite.record("bad image is 400", r);

    let passed = suite.checks.iter().all(|c| c.passed) && !models.is_empty();
    ConformanceReport { url: url.to_string(), models, checks: suite.checks, passed }
}

/// Central differences of 8/255 on 10 fixed pixel channels inside the
/// central region, compared against the returned gradient.
fn gradient_spot_check(suite: &Suite, model: &str, img: &Image, grad: &Image) -> Result<String, String> {
    let base = quantize(img);
    let step = 8.0 / 255.0;
    let (w, h) = (img.width(), img.height());
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let (x, y, c) = (w / 4 + (k * 3) % (w / 2), h / 4 + (k * 5) % (h / 2), k % 3);
        let idx = 3 * (y * w + x) + c;
        let mut plus = base.clone();
        plus.data_mut()[idx] += step;
        let mut minus = base.clone();
        minus.data_mut()[idx] -= step;
        let sp = suite.score(&plus, TEXT, model, false)?.score;
        let sm = suite.score(&minus, TEXT, model, false)?.score;
        let fd = (sp - sm) / (2.0 * step);
        let g = grad.data()[idx];
        let scale = fd.abs().max(g.abs());
        let rel = if scale < 1e-12 { 0.0 } else { (fd - g).abs() / scale };
        worst = worst.max(rel);
    }
    if worst <= GRADIENT_TOLERANCE {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} exceeds {GRADIENT_TOLERANCE}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock_server::MockServer;

    #[test]
    fn mock_server_conforms() {
        let server = MockServer::start("127.0.0.1:0").unwrap();
        let report = run(&server.url(), Duration::from_secs(10));
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(report.passed);
        assert_eq!(report.models.len(), 3);
    }

    #[test]
    fn unreachable_endpoint_fails() {
        let report = run("http://127.0.0.1:9", Duration::from_millis(500));
        assert!(!report.passed);
    }
}

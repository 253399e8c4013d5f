//! Preference scorer ensemble with inverse-score LCM weighting.

use std::time::Duration;

use num_integer::Integer;
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::keyed::{first_color, keyed_color};
use crate::protocol::{decode_f32_b64, encode_png_b64, HttpClient, ProtocolError, ScoreRequest, ScoreResponse};

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("no preference scorers configured")]
    NoScorers,
    #[error("preference contract: {0}")]
    Contract(String),
    #[error("scorer `{scorer}` failed after {attempts} attempt(s): {message}")]
    Scorer { scorer: String, attempts: usize, message: String },
    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl PreferenceError {
    fn is_transient(&self) -> bool {
        matches!(self, PreferenceError::Protocol(e) if e.is_transient())
    }
}

/// One scorer's score and `∂score/∂pixel`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSignal {
    pub scorer: String,
    pub score: f64,
    pub gradient: Image,
}

pub trait PreferenceScorer: Send + Sync {
    fn id(&self) -> &str;
    /// Must be deterministic in `(image, text)`.
    fn score(&self, image: &Image, text: &str) -> Result<PreferenceSignal, PreferenceError>;
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreOptions {
    /// Extra attempts after a transient failure.
    pub retries: usize,
    pub concurrent: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { retries: 2, concurrent: false }
    }
}

fn score_one(
    scorer: &dyn PreferenceScorer,
    image: &Image,
    text: &str,
    retries: usize,
) -> Result<PreferenceSignal, PreferenceError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match scorer.score(image, text) {
            Ok(signal) => {
                if !signal.gradient.same_shape(image) {
                    return Err(PreferenceError::Contract(format!(
                        "scorer `{}` returned gradient {:?} for image {:?}",
                        scorer.id(),
                        signal.gradient.shape(),
                        image.shape()
                    )));
                }
                if !signal.score.is_finite() || !signal.gradient.is_finite() {
                    return Err(PreferenceError::Contract(format!(
                        "scorer `{}` returned non-finite output",
                        scorer.id()
                    )));
                }
                return Ok(signal);
            }
            Err(e) if e.is_transient() && attempts <= retries => {
                log::warn!("scorer `{}` attempt {attempts} failed: {e}; retrying", scorer.id());
            }
            Err(e) => {
                return Err(PreferenceError::Scorer {
                    scorer: scorer.id().to_string(),
                    attempts,
                    message: e.to_string(),
                })
            }
        }
    }
}

/// One signal per scorer, in scorer order. Any scorer failing fails the call.
pub fn score_all<S: AsRef<dyn PreferenceScorer> + Sync>(
    scorers: &[S],
    image: &Image,
    text: &str,
    opts: ScoreOptions,
) -> Result<Vec<PreferenceSignal>, PreferenceError> {
    if scorers.is_empty() {
        return Err(PreferenceError::NoScorers);
    }
    if !image.is_finite() {
        return Err(PreferenceError::Contract("image has non-finite pixels".into()));
    }
    if !opts.concurrent || scorers.len() == 1 {
        return scorers.iter().map(|s| score_one(s.as_ref(), image, text, opts.retries)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> =
            scorers.iter().map(|s| scope.spawn(move || score_one(s.as_ref(), image, text, opts.retries))).collect();
        handles.into_iter().map(|h| h.join().expect("scorer thread panicked")).collect()
    })
}

/// `max(1, round(100 · logistic(s)))`
pub fn quantize_score(s: f64) -> u64 {
    let logistic = 1.0 / (1.0 + (-s).exp());
    ((100.0 * logistic).round() as u64).clamp(1, 100)
}

/// `λ_i ∝ LCM(q) / q_i`, normalized to sum 1.
pub fn lcm_weights(quantized: &[u64]) -> Result<Vec<f64>, PreferenceError> {
    if quantized.is_empty() {
        return Err(PreferenceError::Contract("no scores to weight".into()));
    }
    if quantized.contains(&0) {
        return Err(PreferenceError::Contract("quantized scores must be positive".into()));
    }
    let lcm = quantized.iter().try_fold(1u128, |acc, &q| {
        let q = q as u128;
        (acc / acc.gcd(&q)).checked_mul(q)
    });
    let raw: Vec<f64> = match lcm {
        Some(l) => quantized.iter().map(|&q| (l / q as u128) as f64).collect(),
        // the normalized weights equal normalized reciprocals
        None => quantized.iter().map(|&q| 1.0 / q as f64).collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPreferenceGradient {
    /// `C⁺`
    pub gradient: Image,
    pub weights: Vec<f64>,
    pub quantized: Vec<u64>,
    pub scores: Vec<f64>,
}

/// `C⁺ = (1/N) Σ λ_i ∇s_i`, or without the `1/N` when `divide_by_n` is off.
pub fn positive_preference_grad(
    signals: &[PreferenceSignal],
    weights: &[f64],
    divide_by_n: bool,
) -> Result<Image, PreferenceError> {
    let first = signals.first().ok_or(PreferenceError::NoScorers)?;
    if signals.len() != weights.len() {
        return Err(PreferenceError::Contract(format!("{} signals, {} weights", signals.len(), weights.len())));
    }
    let mut out = Image::zeros(first.gradient.width(), first.gradient.height());
    let norm = if divide_by_n { 1.0 / signals.len() as f64 } else { 1.0 };
    for (s, w) in signals.iter().zip(weights) {
        out.add_scaled(&s.gradient, w * norm)?;
    }
    Ok(out)
}

pub fn fuse_positive(
    signals: &[PreferenceSignal],
    divide_by_n: bool,
) -> Result<FusedPreferenceGradient, PreferenceError> {
    let scores: Vec<f64> = signals.iter().map(|s| s.score).collect();
    let quantized: Vec<u64> = scores.iter().map(|&s| quantize_score(s)).collect();
    let weights = lcm_weights(&quantized)?;
    let gradient = positive_preference_grad(signals, &weights, divide_by_n)?;
    Ok(FusedPreferenceGradient { gradient, weights, quantized, scores })
}

/// Pixel box `[x0, x1) × [y0, y1)` as fractions of the image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    fn pixels(&self, w: usize, h: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |a: f64, b: f64, n: usize| {
            let lo = ((a * n as f64).floor() as usize).min(n.saturating_sub(1));
            let hi = ((b * n as f64).ceil() as usize).clamp(lo + 1, n.max(lo + 1));
            lo..hi
        };
        (span(self.x0, self.x1, w), span(self.y0, self.y1, h))
    }
}

/// Mean pixel value; gradient `1/(3HW)` everywhere.
#[derive(Clone, Debug, Default)]
pub struct BrightnessScorer;

pub const BRIGHTNESS_ID: &str = "mock:brightness";
pub const TARGET_PATCH_ID: &str = "mock:target_patch";
pub const KEYWORD_COLOR_ID: &str = "mock:keyword_color";

impl PreferenceScorer for BrightnessScorer {
    fn id(&self) -> &str {
        BRIGHTNESS_ID
    }

    fn score(&self, image: &Image, _: &str) -> Result<PreferenceSignal, PreferenceError> {
        let n = image.data().len() as f64;
        Ok(PreferenceSignal {
            scorer: self.id().into(),
            score: image.mean(),
            gradient: Image::filled(image.width(), image.height(), [1.0 / n; 3]),
        })
    }
}

/// Negative MSE between a region and a flat prompt-keyed color.
#[derive(Clone, Debug)]
pub struct TargetPatchScorer {
    pub region: Region,
}

impl Default for TargetPatchScorer {
    fn default() -> Self {
        Self { region: Region { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75 } }
    }
}

impl TargetPatchScorer {
    pub fn target_color(text: &str) -> [f64; 3] {
        keyed_color(text, TARGET_PATCH_ID)
    }
}

impl PreferenceScorer for TargetPatchScorer {
    fn id(&self) -> &str {
        TARGET_PATCH_ID
    }

    fn score(&self, image: &Image, text: &str) -> Result<PreferenceSignal, PreferenceError> {
        let target = Self::target_color(text);
        let (xs, ys) = self.region.pixels(image.width(), image.height());
        let count = (xs.len() * ys.len() * 3) as f64;
        let mut gradient = Image::zeros(image.width(), image.height());
        let mut sse = 0.0;
        for y in ys {
            for x in xs.clone() {
                let p = image.pixel(x, y);
                let d = [0, 1, 2].map(|c| p[c] - target[c]);
                sse += d.iter().map(|v| v * v).sum::<f64>();
                gradient.set_pixel(x, y, d.map(|v| -2.0 * v / count));
            }
        }
        Ok(PreferenceSignal { scorer: self.id().into(), score: -sse / count, gradient })
    }
}

/// `−‖mean(region) − color‖²` for the first color named in the prompt;
/// zero score and gradient when no color is named.
#[derive(Clone, Debug)]
pub struct KeywordColorScorer {
    pub region: Region,
}

impl Default for KeywordColorScorer {
    fn default() -> Self {
        Self { region: Region { x0: 0.3, y0: 0.2, x1: 0.7, y1: 0.5 } }
    }
}

impl PreferenceScorer for KeywordColorScorer {
    fn id(&self) -> &str {
        KEYWORD_COLOR_ID
    }

    fn score(&self, image: &Image, text: &str) -> Result<PreferenceSignal, PreferenceError> {
        let mut gradient = Image::zeros(image.width(), image.height());
        let Some((_, color)) = first_color(text) else {
            return Ok(PreferenceSignal { scorer: self.id().into(), score: 0.0, gradient });
        };
        let (xs, ys) = self.region.pixels(image.width(), image.height());
        let count = (xs.len() * ys.len()) as f64;
        let mut mean = [0.0; 3];
        for y in ys.clone() {
            for x in xs.clone() {
                let p = image.pixel(x, y);
                for c in 0..3 {
                    mean[c] += p[c] / count;
                }
            }
        }
        let d = [0, 1, 2].map(|c| mean[c] - color[c]);
        let g = d.map(|v| -2.0 * v / count);
        for y in ys {
            for x in xs.clone() {
                gradient.set_pixel(x, y, g);
            }
        }
        Ok(PreferenceSignal { scorer: self.id().into(), score: -d.iter().map(|v| v * v).sum::<f64>(), gradient })
    }
}

pub const MOCK_SCORER_IDS: [&str; 3] = [BRIGHTNESS_ID, TARGET_PATCH_ID, KEYWORD_COLOR_ID];

pub fn mock_scorer(id: &str) -> Result<Box<dyn PreferenceScorer>, PreferenceError> {
    Ok(match id {
        BRIGHTNESS_ID => Box::new(BrightnessScorer),
        TARGET_PATCH_ID => Box::new(TargetPatchScorer::default()),
        KEYWORD_COLOR_ID => Box::new(KeywordColorScorer::default()),
        _ => return Err(PreferenceError::UnknownScorer(id.to_string())),
    })
}

/// A scorer behind `POST /score`.
#[derive(Clone, Debug)]
pub struct RemoteScorer {
    client: HttpClient,
    model: String,
}

impl RemoteScorer {
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Self {
        Self { client: HttpClient::new(base_url, timeout), model: model.to_string() }
    }
}

impl PreferenceScorer for RemoteScorer {
    fn id(&self) -> &str {
        &self.model
    }

    fn score(&self, image: &Image, text: &str) -> Result<PreferenceSignal, PreferenceError> {
        let req = ScoreRequest {
            image_b64: encode_png_b64(image)?,
            text: text.to_string(),
            model: self.model.clone(),
            want_gradient: true,
        };
        let resp: ScoreResponse = self.client.post_json("/score", &req)?;
        let (Some(grad), Some(shape)) = (resp.gradient_b64, resp.shape) else {
            return Err(PreferenceError::Contract(format!("scorer `{}` returned no gradient", self.model)));
        };
        Ok(PreferenceSignal { scorer: self.model.clone(), score: resp.score, gradient: decode_f32_b64(&grad, shape)? })
    }
}

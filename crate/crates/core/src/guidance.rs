//! Score distillation over a pluggable noise predictor.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::protocol::{
    decode_f32_b64, encode_f32_b64, HttpClient, PredictNoiseRequest, PredictNoiseResponse, ProtocolError,
};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("timestep {t} outside schedule of {steps} steps")]
    TimestepRange { t: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("noise predictor contract: {0}")]
    Contract(String),
    #[error("no target image for prompt `{0}`")]
    UnknownPrompt(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Cumulative products `ᾱ_t` of a linear β schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, GuidanceError> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(GuidanceError::Schedule(format!("steps {steps}, betas {beta_start}..{beta_end}")));
        }
        let mut acc = 1.0;
        let alpha_bars = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, GuidanceError> {
        self.alpha_bars.get(t).copied().ok_or(GuidanceError::TimestepRange { t, steps: self.steps() })
    }

    /// `ω_t = 1 − ᾱ_t`
    pub fn weight(&self, t: usize) -> Result<f64, GuidanceError> {
        Ok(1.0 - self.alpha_bar(t)?)
    }

    /// Nearest schedule index to a fraction of the schedule length.
    pub fn index_for_fraction(&self, u: f64) -> usize {
        let i = (u * self.steps() as f64).round();
        (i.max(0.0) as usize).min(self.steps() - 1)
    }

    /// `t ~ U(lo, hi)` as a fraction of the schedule, mapped to an index.
    pub fn sample_timestep(&self, rng: &mut impl Rng, range: (f64, f64)) -> usize {
        let u = if range.1 > range.0 { rng.gen_range(range.0..range.1) } else { range.0 };
        self.index_for_fraction(u)
    }
}

pub fn sample_noise(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let data = (0..width * height * 3).map(|_| rng.sample(StandardNormal)).collect();
    Image::from_data(width, height, data).expect("sized to the image")
}

/// `x_t = √ᾱ x + √(1−ᾱ) ε`
pub fn add_noise_with_alpha_bar(x: &Image, alpha_bar: f64, eps: &Image) -> Result<Image, GuidanceError> {
    x.check_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Image::from_data(x.width(), x.height(), data)?)
}

pub fn add_noise(schedule: &DiffusionSchedule, x: &Image, t: usize, eps: &Image) -> Result<Image, GuidanceError> {
    add_noise_with_alpha_bar(x, schedule.alpha_bar(t)?, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrediction {
    pub conditional: Image,
    pub unconditional: Option<Image>,
}

pub trait NoisePredictor: Send + Sync {
    /// `ε̂` for `x_t` at schedule index `t`; must be deterministic.
    fn predict(&self, noisy: &Image, text: &str, t: usize) -> Result<NoisePrediction, GuidanceError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsGradient {
    pub gradient: Image,
    pub timestep: usize,
    pub weight: f64,
}

/// `ω_t (ε̂_cfg − ε)` at image level.
pub fn sds_image_gradient(
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    x: &Image,
    text: &str,
    t: usize,
    eps: &Image,
    guidance_scale: f64,
) -> Result<SdsGradient, GuidanceError> {
    let weight = schedule.weight(t)?;
    let noisy = add_noise(schedule, x, t, eps)?;
    let pred = predictor.predict(&noisy, text, t)?;
    let check = |img: &Image| {
        if img.same_shape(x) {
            Ok(())
        } else {
            Err(GuidanceError::Contract(format!("prediction shape {:?}, image shape {:?}", img.shape(), x.shape())))
        }
    };
    check(&pred.conditional)?;
    let guided: Vec<f64> = match &pred.unconditional {
        Some(u) => {
            check(u)?;
            u.data().iter().zip(pred.conditional.data()).map(|(u, c)| u + guidance_scale * (c - u)).collect()
        }
        None => pred.conditional.into_data(),
    };
    let data = guided.iter().zip(eps.data()).map(|(p, e)| weight * (p - e)).collect();
    Ok(SdsGradient { gradient: Image::from_data(x.width(), x.height(), data)?, timestep: t, weight })
}

/// Exact noise posterior under the hypothesis that the clean image is a
/// known target: `ε̂ = (x_t − √ᾱ target) / √(1−ᾱ)`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    schedule: DiffusionSchedule,
    targets: BTreeMap<String, Image>,
    fallback: Option<Image>,
}

impl ToyDenoiser {
    /// One target for every prompt.
    pub fn new(target: Image, schedule: DiffusionSchedule) -> Self {
        Self { schedule, targets: BTreeMap::new(), fallback: Some(target) }
    }

    /// Per-prompt targets; unknown prompts are an error.
    pub fn keyed(targets: BTreeMap<String, Image>, schedule: DiffusionSchedule) -> Self {
        Self { schedule, targets, fallback: None }
    }

    pub fn target(&self, text: &str) -> Option<&Image> {
        self.targets.get(text).or(self.fallback.as_ref())
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict(&self, noisy: &Image, text: &str, t: usize) -> Result<NoisePrediction, GuidanceError> {
        let target = self.target(text).ok_or_else(|| GuidanceError::UnknownPrompt(text.to_string()))?;
        noisy.check_shape(target)?;
        let ab = self.schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = noisy.data().iter().zip(target.data()).map(|(x, y)| (x - a * y) / b).collect();
        Ok(NoisePrediction { conditional: Image::from_data(noisy.width(), noisy.height(), data)?, unconditional: None })
    }
}

/// Noise predictor behind `POST /predict_noise`.
#[derive(Clone, Debug)]
pub struct RemoteNoisePredictor {
    client: HttpClient,
    want_uncond: bool,
}

impl RemoteNoisePredictor {
    pub fn new(base_url: &str, want_uncond: bool, timeout: Duration) -> Self {
        Self { client: HttpClient::new(base_url, timeout), want_uncond }
    }
}

impl NoisePredictor for RemoteNoisePredictor {
    fn predict(&self, noisy: &Image, text: &str, t: usize) -> Result<NoisePrediction, GuidanceError> {
        let req = PredictNoiseRequest {
            image_b64: encode_f32_b64(noisy.data()),
            shape: noisy.shape(),
            text: text.to_string(),
            timestep: t,
            want_uncond: self.want_uncond,
        };
        let resp: PredictNoiseResponse = self.client.post_json("/predict_noise", &req)?;
        let conditional = decode_f32_b64(&resp.noise_b64, resp.shape)?;
        let unconditional = resp.uncond_b64.map(|u| decode_f32_b64(&u, resp.shape)).transpose()?;
        Ok(NoisePrediction { conditional, unconditional })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Echo(Image);

    impl NoisePredictor for Echo {
        fn predict(&self, _: &Image, _: &str, _: usize) -> Result<NoisePrediction, GuidanceError> {
            Ok(NoisePrediction { conditional: self.0.clone(), unconditional: None })
        }
    }

    #[test]
    fn schedule_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 1000);
        let mut prev = 1.0;
        for t in 0..s.steps() {
            let a = s.alpha_bar(t).unwrap();
            assert!(a > 0.0 && a < prev);
            prev = a;
        }
        assert!(s.alpha_bar(1000).is_err());
        assert_eq!(s.index_for_fraction(0.02), 20);
        assert_eq!(s.index_for_fraction(0.5), 500);
        assert_eq!(s.index_for_fraction(1.0), 999);
    }

    #[test]
    fn noise_endpoints_and_hand_case() {
        let x = Image::filled(3, 2, [0.5; 3]);
        let eps = Image::filled(3, 2, [1.0; 3]);
        assert_eq!(add_noise_with_alpha_bar(&x, 1.0, &eps).unwrap(), x);
        assert_eq!(add_noise_with_alpha_bar(&x, 0.0, &eps).unwrap(), eps);
        let mixed = add_noise_with_alpha_bar(&x, 0.64, &eps).unwrap();
        assert!(mixed.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn perfect_predictor_gives_zero() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = sample_noise(4, 4, &mut rng);
        let x = Image::filled(4, 4, [0.3; 3]);
        let g = sds_image_gradient(&Echo(eps.clone()), &s, &x, "p", 100, &eps, 7.5).unwrap();
        assert!(g.gradient.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_residual_passes_through() {
        // ᾱ small enough that ω_t is 1 to within rounding is not available, so
        // scale the expectation by ω_t explicitly
        let s = DiffusionSchedule::default();
        let eps = Image::filled(2, 2, [0.2; 3]);
        let pred = Image::filled(2, 2, [0.3; 3]);
        let g = sds_image_gradient(&Echo(pred), &s, &Image::zeros(2, 2), "p", 400, &eps, 7.5).unwrap();
        let w = s.weight(400).unwrap();
        assert!(g.gradient.data().iter().all(|v| (v - 0.1 * w).abs() < 1e-15));
    }

    #[test]
    fn toy_denoiser_pulls_toward_target() {
        let s = DiffusionSchedule::default();
        let target = Image::from_data(2, 1, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        let toy = ToyDenoiser::new(target.clone(), s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = sample_noise(2, 1, &mut rng);
        let zero = sds_image_gradient(&toy, &s, &target, "p", 250, &eps, 7.5).unwrap();
        assert!(zero.gradient.data().iter().all(|v| v.abs() < 1e-12));

        let delta = [0.05, -0.02, 0.0, 0.1, 0.3, -0.2];
        let x = Image::from_data(2, 1, target.data().iter().zip(delta).map(|(a, d)| a + d).collect()).unwrap();
        let g = sds_image_gradient(&toy, &s, &x, "p", 250, &eps, 7.5).unwrap();
        let ab = s.alpha_bar(250).unwrap();
        let k = (1.0 - ab) * ab.sqrt() / (1.0 - ab).sqrt();
        for (v, d) in g.gradient.data().iter().zip(delta) {
            assert!((v - k * d).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_uses_unconditional_branch() {
        struct Split;
        impl NoisePredictor for Split {
            fn predict(&self, n: &Image, _: &str, _: usize) -> Result<NoisePrediction, GuidanceError> {
                Ok(NoisePrediction {
                    conditional: Image::filled(n.width(), n.height(), [1.0; 3]),
                    unconditional: Some(Image::filled(n.width(), n.height(), [0.5; 3])),
                })
            }
        }
        let s = DiffusionSchedule::default();
        let g = sds_image_gradient(&Split, &s, &Image::zeros(1, 1), "p", 10, &Image::zeros(1, 1), 2.0).unwrap();
        let w = s.weight(10).unwrap();
        assert!((g.gradient.data()[0] - w * 1.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = DiffusionSchedule::default();
        let r =
            sds_image_gradient(&Echo(Image::zeros(3, 3)), &s, &Image::zeros(2, 2), "p", 1, &Image::zeros(2, 2), 1.0);
        assert!(matches!(r, Err(GuidanceError::Contract(_))));
    }
}

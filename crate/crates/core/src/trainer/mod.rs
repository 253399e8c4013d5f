//! Optimization loop: camera sampling, rendering, SDS plus contrastive
//! preference gradients, per-attribute Adam and the densify/prune schedule.

pub mod adam;
pub mod config;
pub mod densify;
pub mod target;

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{pose_mesh, sample_surface, BodyModelError, BodyParams, BodyTemplate, Mesh};
use crate::guidance::{
    sample_noise, sds_image_gradient, DiffusionSchedule, GuidanceError, NoisePredictor, RemoteNoisePredictor,
    ToyDenoiser,
};
use crate::image::{Image, ImageError};
use crate::negation::{
    build_negation_set, contrastive_grad, negative_preference_grad, LlmClient, NegationError, NegationSet,
    RemoteLlmClient, RuleBasedClient,
};
use crate::preference::{
    fuse_positive, mock_scorer, score_all, PreferenceError, PreferenceScorer, RemoteScorer, ScoreOptions,
};
use crate::splat_render::{render, render_backward, save_ply, CameraPose, GaussianCloud, PlyError, RenderError};

pub use adam::{adam_update, AdamParams, AdamState};
pub use config::{GuidanceKind, TickKind, TrainConfig};
pub use densify::{densify_and_prune, GradientStats, TickEvent};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PLY_NAME: &str = "cloud.ply";
pub const REPORT_NAME: &str = "report.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("{skips} consecutive non-finite steps at iteration {iteration}")]
    Diverged { iteration: usize, skips: usize },
    #[error("every splat was pruned at iteration {iteration}")]
    Collapse { iteration: usize },
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Negation(#[from] NegationError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// SDS noise source.
pub enum Guidance {
    None,
    /// Target image rendered per camera from a silhouette cloud.
    Toy(GaussianCloud<f32>),
    Predictor(Box<dyn NoisePredictor>),
}

/// Uniform draw in `[lo, hi]`; a degenerate range yields `lo` without
/// consuming randomness.
fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Orbit camera with each coordinate uniform in its configured range, looking at `center`.
pub fn sample_camera(config: &TrainConfig, center: [f64; 3], rng: &mut impl Rng) -> CameraPose {
    let distance = uniform(rng, config.camera_distance);
    let fovy = uniform(rng, config.camera_fovy);
    let elevation = uniform(rng, config.camera_elevation);
    let azimuth = uniform(rng, config.camera_azimuth);
    CameraPose::new(distance, fovy, elevation, azimuth, config.resolution, config.resolution).with_target(center)
}

/// `views` cameras at equal azimuth steps, zero elevation.
pub fn turntable_cameras(
    center: [f64; 3],
    distance: f64,
    fovy: f64,
    resolution: usize,
    views: usize,
) -> Vec<CameraPose> {
    (0..views)
        .map(|k| {
            let az = 360.0 * k as f64 / views as f64;
            CameraPose::new(distance, fovy, 0.0, az, resolution, resolution).with_target(center)
        })
        .collect()
}

pub fn cloud_center(cloud: &GaussianCloud<f32>) -> [f64; 3] {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k] as f64);
            hi[k] = hi[k].max(p[k] as f64);
        }
    }
    if cloud.is_empty() {
        return [0.0; 3];
    }
    [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]))
}

pub fn body_mesh(config: &TrainConfig) -> Result<Mesh, TrainError> {
    let template = match &config.body_asset {
        Some(path) => BodyTemplate::load(path)?,
        None => BodyTemplate::bundled(),
    };
    let mut params = BodyParams::neutral(&template);
    for &[joint, x, y, z] in &config.body_pose {
        let j = joint as usize;
        if joint < 0.0 || joint.fract() != 0.0 || j >= params.theta.len() {
            return Err(TrainError::Config(format!("body_pose joint {joint} out of range")));
        }
        params.theta[j] = [x, y, z];
    }
    Ok(pose_mesh(&template, &params)?)
}

/// Surface samples as isotropic gray splats at the configured opacity.
pub fn initial_cloud(config: &TrainConfig, mesh: &Mesh) -> Result<GaussianCloud<f32>, TrainError> {
    let n = config.init_splats;
    let samples = sample_surface(mesh, n, config.seed)?;
    let scale =
        if config.init_scale > 0.0 { config.init_scale } else { 0.7 * (mesh.surface_area() / n as f64).sqrt() } as f32;
    let mut cloud = GaussianCloud::new();
    for s in samples {
        cloud.push_activated(
            s.position.map(|v| v as f32),
            [scale; 3],
            [1.0, 0.0, 0.0, 0.0],
            [0.5; 3],
            config.init_opacity as f32,
        );
    }
    Ok(cloud)
}

/// Everything that is not derived from the config alone.
pub struct Components {
    pub guidance: Guidance,
    pub scorers: Vec<Box<dyn PreferenceScorer>>,
    pub llm: Box<dyn LlmClient>,
}

impl Components {
    /// Builds guidance, scorers and the LLM client named by the config.
    /// `Guidance::Toy` is filled in by the trainer once the cloud exists.
    pub fn from_config(config: &TrainConfig) -> Result<Self, TrainError> {
        let timeout = Duration::from_secs(config.scorer_timeout_secs);
        let guidance = match config.guidance {
            GuidanceKind::None => Guidance::None,
            GuidanceKind::Toy => Guidance::Toy(GaussianCloud::new()),
            GuidanceKind::Remote => {
                let url = config.predictor_url.as_deref().ok_or_else(|| TrainError::Config("predictor_url".into()))?;
                Guidance::Predictor(Box::new(RemoteNoisePredictor::new(url, true, timeout)))
            }
        };
        let scorers = config
            .scorers
            .iter()
            .map(|id| match &config.scorer_url {
                Some(url) => Ok(Box::new(RemoteScorer::new(url, id, timeout)) as Box<dyn PreferenceScorer>),
                None => mock_scorer(id),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let llm: Box<dyn LlmClient> = match &config.llm_url {
            Some(url) => Box::new(RemoteLlmClient::new(url, timeout)),
            None => Box::new(RuleBasedClient::bundled().clone()),
        };
        Ok(Self { guidance, scorers, llm })
    }
}

/// Per-step trace entry; batch quantities are means over items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub splats: usize,
    pub timesteps: Vec<usize>,
    pub sds_norm: f64,
    pub positive_scores: Vec<f64>,
    pub negative_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub prompt: String,
    pub config: TrainConfig,
    pub negation: Option<NegationSet>,
    pub initial_splats: usize,
    pub initial_opacity: f64,
    pub final_splats: usize,
    pub iterations_run: usize,
    pub skipped_steps: usize,
    pub aborted: Option<String>,
    pub events: Vec<TickEvent>,
    pub trace: Vec<StepRecord>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

pub struct TrainState {
    pub iteration: usize,
    pub cloud: GaussianCloud<f32>,
    pub adam: AdamState<f32>,
    pub stats: GradientStats,
    pub consecutive_skips: usize,
    rng_camera: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    rng_timestep: ChaCha8Rng,
    rng_background: ChaCha8Rng,
    rng_densify: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TrainState {
    pub fn new(cloud: GaussianCloud<f32>, seed: u64) -> Self {
        let n = cloud.len();
        Self {
            iteration: 0,
            cloud,
            adam: AdamState::new(n),
            stats: GradientStats::new(n),
            consecutive_skips: 0,
            rng_camera: stream(seed, 1),
            rng_noise: stream(seed, 2),
            rng_timestep: stream(seed, 3),
            rng_background: stream(seed, 4),
            rng_densify: stream(seed, 5),
        }
    }
}

/// Randomness for one batch item, drawn before any fan-out.
struct ItemDraw {
    camera: CameraPose,
    background: [f64; 3],
    timestep: usize,
    noise: Option<Image>,
}

struct ItemResult {
    gradients: crate::splat_render::CloudGradients<f32>,
    timestep: usize,
    sds_norm: f64,
    positive: Vec<f64>,
    negative: Vec<f64>,
    weights: Vec<f64>,
    finite: bool,
}

pub struct Trainer {
    config: TrainConfig,
    prompt: String,
    pub state: TrainState,
    schedule: DiffusionSchedule,
    guidance: Guidance,
    scorers: Vec<Box<dyn PreferenceScorer>>,
    negation: Option<NegationSet>,
    center: [f64; 3],
    extent: f64,
    report: RunReport,
}

impl Trainer {
    pub fn new(config: TrainConfig, prompt: &str) -> Result<Self, TrainError> {
        let components = Components::from_config(&config)?;
        Self::with_components(config, prompt, components)
    }

    pub fn with_components(config: TrainConfig, prompt: &str, components: Components) -> Result<Self, TrainError> {
        config.validate()?;
        if prompt.trim().is_empty() {
            return Err(TrainError::Config("prompt must not be empty".into()));
        }
        let mesh = body_mesh(&config)?;
        let (lo, hi) = mesh.bounds();
        let extent = 0.5 * (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt();
        let center = mesh.center();
        let cloud = initial_cloud(&config, &mesh)?;
        let guidance = match components.guidance {
            Guidance::Toy(_) => Guidance::Toy(target::silhouette_cloud(&cloud, prompt, config.toy_target_opacity)),
            other => other,
        };
        let negation = if config.negation && config.preference_weight != 0.0 {
            Some(build_negation_set(prompt, components.llm.as_ref(), &config.static_negations)?)
        } else {
            None
        };
        let schedule = DiffusionSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let report = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            prompt: prompt.to_string(),
            config: config.clone(),
            negation: negation.clone(),
            initial_splats: cloud.len(),
            initial_opacity: (0..cloud.len()).map(|i| cloud.opacity(i) as f64).sum::<f64>() / cloud.len() as f64,
            final_splats: cloud.len(),
            iterations_run: 0,
            skipped_steps: 0,
            aborted: None,
            events: Vec::new(),
            trace: Vec::new(),
            outputs: Vec::new(),
        };
        let state = TrainState::new(cloud, config.seed);
        Ok(Self {
            config,
            prompt: prompt.to_string(),
            state,
            schedule,
            guidance,
            scorers: components.scorers,
            negation,
            center,
            extent,
            report,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn cloud(&self) -> &GaussianCloud<f32> {
        &self.state.cloud
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn negation(&self) -> Option<&NegationSet> {
        self.negation.as_ref()
    }

    /// Look-at point of every sampled camera.
    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn guidance_target(&self) -> Option<&GaussianCloud<f32>> {
        match &self.guidance {
            Guidance::Toy(c) => Some(c),
            _ => None,
        }
    }

    fn draw_item(&mut self) -> ItemDraw {
        let camera = sample_camera(&self.config, self.center, &mut self.state.rng_camera);
        let background = if self.config.random_background {
            [self.state.rng_background.gen::<f64>(); 3]
        } else {
            self.config.background
        };
        let sds = !self.config.dry_run && self.config.sds_weight != 0.0 && !matches!(self.guidance, Guidance::None);
        let (timestep, noise) = if sds {
            let t = self.schedule.sample_timestep(
                &mut self.state.rng_timestep,
                (self.config.timestep_range[0], self.config.timestep_range[1]),
            );
            (t, Some(sample_noise(self.config.resolution, self.config.resolution, &mut self.state.rng_noise)))
        } else {
            (0, None)
        };
        ItemDraw { camera, background, timestep, noise }
    }

    fn compute_item(&self, draw: &ItemDraw) -> Result<ItemResult, TrainError> {
        let cfg = &self.config;
        let out = render(&self.state.cloud, &draw.camera, draw.background)?;
        let x = out.to_image();
        let mut g = Image::zeros(x.width(), x.height());
        let mut sds_norm = 0.0;
        if let Some(eps) = &draw.noise {
            let sds = match &self.guidance {
                Guidance::Toy(target) => {
                    let y = render(target, &draw.camera, draw.background)?.to_image();
                    let toy = ToyDenoiser::new(y, self.schedule.clone());
                    sds_image_gradient(&toy, &self.schedule, &x, &self.prompt, draw.timestep, eps, cfg.guidance_scale)?
                }
                Guidance::Predictor(p) => sds_image_gradient(
                    p.as_ref(),
                    &self.schedule,
                    &x,
                    &self.prompt,
                    draw.timestep,
                    eps,
                    cfg.guidance_scale,
                )?,
                Guidance::None => unreachable!("noise is only drawn with guidance"),
            };
            sds_norm = sds.gradient.norm();
            g.add_scaled(&sds.gradient, cfg.sds_weight)?;
        }
        let (mut positive, mut negative, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        if cfg.preference_weight != 0.0 && !self.scorers.is_empty() {
            let opts = ScoreOptions { retries: cfg.scorer_retries, concurrent: cfg.threads > 1 };
            let signals = score_all(&self.scorers, &x, &self.prompt, opts)?;
            let fused = fuse_positive(&signals, cfg.divide_by_n)?;
            let mut c_all = fused.gradient;
            positive = fused.scores;
            weights = fused.weights;
            if let Some(neg) = &self.negation {
                let neg_signals = score_all(&self.scorers, &x, &neg.text, opts)?;
                negative = neg_signals.iter().map(|s| s.score).collect();
                let c_neg = negative_preference_grad(&neg_signals, cfg.literal_negative_sign)?;
                c_all = contrastive_grad(&c_all, &c_neg)?;
            }
            // preference is ascended, so it enters the loss gradient negated
            g.add_scaled(&c_all, -cfg.preference_weight)?;
        }
        let finite = g.is_finite();
        let grad: Vec<f32> = g.data().iter().map(|&v| v as f32).collect();
        let gradients = render_backward(&self.state.cloud, &draw.camera, &out, &grad)?;
        let finite = finite && gradients.params.is_finite();
        Ok(ItemResult { gradients, timestep: draw.timestep, sds_norm, positive, negative, weights, finite })
    }

    fn compute_batch(&self, draws: &[ItemDraw]) -> Result<Vec<ItemResult>, TrainError> {
        if self.config.threads <= 1 || draws.len() <= 1 {
            return draws.iter().map(|d| self.compute_item(d)).collect();
        }
        let chunk = draws.len().div_ceil(self.config.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = draws
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|d| self.compute_item(d)).collect::<Vec<_>>()))
                .collect();
            // joined in spawn order, so the reduction order is fixed
            handles.into_iter().flat_map(|h| h.join().expect("batch worker panicked")).collect()
        })
    }

    /// One optimization step followed by the schedule check.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        self.state.iteration += 1;
        let iteration = self.state.iteration;
        let draws: Vec<ItemDraw> = (0..self.config.batch_size).map(|_| self.draw_item()).collect();
        let mut record = StepRecord {
            iteration,
            splats: self.state.cloud.len(),
            timesteps: draws.iter().map(|d| d.timestep).collect(),
            sds_norm: 0.0,
            positive_scores: Vec::new(),
            negative_scores: Vec::new(),
            weights: Vec::new(),
            skipped: false,
        };

        if !self.config.dry_run {
            let results = self.compute_batch(&draws)?;
            let n = self.state.cloud.len();
            let inv = 1.0 / results.len() as f32;
            let mut total = GaussianCloud::<f32>::zeros(n);
            for r in &results {
                for ((_, acc), (_, g)) in total.groups_mut().into_iter().zip(r.gradients.params.groups()) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                }
            }
            let mean = |pick: fn(&ItemResult) -> &Vec<f64>| -> Vec<f64> {
                let width = pick(&results[0]).len();
                (0..width).map(|k| results.iter().map(|r| pick(r)[k]).sum::<f64>() / results.len() as f64).collect()
            };
            record.sds_norm = results.iter().map(|r| r.sds_norm).sum::<f64>() / results.len() as f64;
            record.positive_scores = mean(|r| &r.positive);
            record.negative_scores = mean(|r| &r.negative);
            record.weights = mean(|r| &r.weights);
            record.timesteps = results.iter().map(|r| r.timestep).collect();

            if results.iter().all(|r| r.finite) && total.is_finite() {
                self.state.consecutive_skips = 0;
                let p = AdamParams {
                    beta1: self.config.adam_beta1,
                    beta2: self.config.adam_beta2,
                    eps: self.config.adam_eps,
                };
                self.state.adam.step(&mut self.state.cloud, &total, &self.config.learning_rates(), p);
                for r in &results {
                    self.state.stats.record(&r.gradients.mean2d_norm, &r.gradients.visible);
                }
            } else {
                record.skipped = true;
                self.state.consecutive_skips += 1;
                self.report.skipped_steps += 1;
                log::warn!("iteration {iteration}: non-finite gradient, step skipped");
                if self.state.consecutive_skips > self.config.max_consecutive_skips {
                    self.report.trace.push(record);
                    return Err(TrainError::Diverged { iteration, skips: self.state.consecutive_skips });
                }
            }
        }

        let event = densify_and_prune(
            &mut self.state.cloud,
            &mut self.state.adam,
            &mut self.state.stats,
            &self.config,
            iteration,
            self.extent,
            &mut self.state.rng_densify,
        );
        self.report.iterations_run = iteration;
        self.report.final_splats = self.state.cloud.len();
        self.report.trace.push(record.clone());
        if let Some(ev) = event? {
            log::info!("iteration {iteration}: {:?} {} -> {} splats", ev.kind, ev.before, ev.after);
            self.report.events.push(ev);
        }
        Ok(record)
    }

    /// Runs the remaining iterations. The report records an abort reason.
    pub fn train(&mut self) -> Result<(), TrainError> {
        while self.state.iteration < self.config.iterations {
            if let Err(e) = self.step() {
                self.report.aborted = Some(e.to_string());
                return Err(e);
            }
            if self.state.iteration.is_multiple_of(100) {
                log::debug!("iteration {}/{}", self.state.iteration, self.config.iterations);
            }
        }
        Ok(())
    }

    /// Turntable cameras at the middle of the distance and fovy ranges.
    pub fn turntable(&self) -> Vec<CameraPose> {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        turntable_cameras(
            self.center,
            mid(self.config.camera_distance),
            mid(self.config.camera_fovy),
            self.config.resolution,
            self.config.turntable_views,
        )
    }

    /// Writes the PLY, turntable PNGs (skipped in dry runs) and the report.
    pub fn write_outputs(&mut self, dir: &Path) -> Result<PathBuf, TrainError> {
        std::fs::create_dir_all(dir)?;
        let mut outputs = Vec::new();
        if !self.state.cloud.is_empty() {
            save_ply(&self.state.cloud, dir.join(PLY_NAME))?;
            outputs.push(PLY_NAME.to_string());
            if !self.config.dry_run {
                for (k, cam) in self.turntable().iter().enumerate() {
                    let name = format!("turntable_{k:03}.png");
                    render(&self.state.cloud, cam, self.config.background)?.to_image().write_png(dir.join(&name))?;
                    outputs.push(name);
                }
            }
        }
        outputs.push(REPORT_NAME.to_string());
        self.report.outputs = outputs;
        let path = dir.join(REPORT_NAME);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.report)?)?;
        Ok(path)
    }
}

pub struct RunOutcome {
    pub cloud: GaussianCloud<f32>,
    pub report: RunReport,
}

/// Builds a trainer from the config, trains, and writes all artifacts to
/// `out_dir`. On a mid-run failure the partial cloud and report are still
/// written before the error is returned.
pub fn run(config: TrainConfig, prompt: &str, out_dir: &Path) -> Result<RunOutcome, TrainError> {
    let mut trainer = Trainer::new(config, prompt)?;
    run_trainer(&mut trainer, out_dir)?;
    Ok(RunOutcome { cloud: trainer.state.cloud.clone(), report: trainer.report.clone() })
}

pub fn run_trainer(trainer: &mut Trainer, out_dir: &Path) -> Result<(), TrainError> {
    let result = trainer.train();
    let written = trainer.write_outputs(out_dir);
    result?;
    written?;
    Ok(())
}

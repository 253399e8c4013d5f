use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::negation::default_static_negations;
use crate::preference::{KEYWORD_COLOR_ID, TARGET_PATCH_ID};

use super::TrainError;

/// Where the SDS noise prediction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    /// Exact posterior toward a prompt-keyed silhouette rendered from the body.
    Toy,
    /// `POST /predict_noise` at `predictor_url`.
    Remote,
    /// No SDS term.
    None,
}

/// Flat key-value training configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub resolution: usize,
    pub batch_size: usize,
    pub init_splats: usize,
    pub init_opacity: f64,
    /// Isotropic initial scale; 0 derives it from the surface area per splat.
    pub init_scale: f64,

    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub camera_distance: [f64; 2],
    pub camera_fovy: [f64; 2],
    pub camera_elevation: [f64; 2],
    pub camera_azimuth: [f64; 2],

    pub timestep_range: [f64; 2],
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance: GuidanceKind,
    pub predictor_url: Option<String>,
    pub sds_weight: f64,
    pub guidance_scale: f64,
    /// Opacity of the silhouette splats the toy guidance pulls toward.
    pub toy_target_opacity: f64,

    pub scorers: Vec<String>,
    /// When set, scorers are remote models at this base URL.
    pub scorer_url: Option<String>,
    pub scorer_timeout_secs: u64,
    pub scorer_retries: usize,
    pub preference_weight: f64,
    pub divide_by_n: bool,
    /// Positive sign on the negative-prompt gradient.
    pub literal_negative_sign: bool,
    pub negation: bool,
    pub static_negations: Vec<String>,
    pub llm_url: Option<String>,

    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_percentile: f64,
    /// Split when the largest scale exceeds this fraction of the body extent, else clone.
    pub dense_scale_fraction: f64,
    pub prune_from: usize,
    pub prune_until: usize,
    pub prune_interval: usize,
    pub prune_opacity: f64,
    /// Also prune splats whose largest scale exceeds this; 0 disables.
    pub prune_max_scale: f64,

    pub background: [f64; 3],
    pub random_background: bool,
    pub seed: u64,
    pub threads: usize,
    pub max_consecutive_skips: usize,
    pub dry_run: bool,
    pub turntable_views: usize,
    pub body_asset: Option<PathBuf>,
    /// `[joint, ax, ay, az]` axis-angle overrides on the rest pose.
    pub body_pose: Vec<[f64; 4]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3600,
            resolution: 64,
            batch_size: 1,
            init_splats: 500,
            init_opacity: 0.1,
            init_scale: 0.0,
            lr_position: 5e-5,
            lr_scale: 1e-3,
            lr_rotation: 1e-2,
            lr_color: 1.25e-2,
            lr_opacity: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            camera_distance: [1.5, 2.0],
            camera_fovy: [40.0, 70.0],
            camera_elevation: [-30.0, 30.0],
            camera_azimuth: [-180.0, 180.0],
            timestep_range: [0.02, 0.5],
            diffusion_steps: crate::guidance::DEFAULT_STEPS,
            beta_start: crate::guidance::DEFAULT_BETA_START,
            beta_end: crate::guidance::DEFAULT_BETA_END,
            guidance: GuidanceKind::Toy,
            predictor_url: None,
            sds_weight: 1.0,
            guidance_scale: crate::guidance::DEFAULT_GUIDANCE_SCALE,
            toy_target_opacity: 0.6,
            scorers: vec![TARGET_PATCH_ID.to_string(), KEYWORD_COLOR_ID.to_string()],
            scorer_url: None,
            scorer_timeout_secs: 60,
            scorer_retries: 2,
            preference_weight: 1.0,
            divide_by_n: true,
            literal_negative_sign: false,
            negation: true,
            static_negations: default_static_negations(),
            llm_url: None,
            densify_from: 300,
            densify_until: 2100,
            densify_interval: 300,
            densify_percentile: 0.9,
            dense_scale_fraction: 0.01,
            prune_from: 2400,
            prune_until: 3300,
            prune_interval: 300,
            prune_opacity: 0.008,
            prune_max_scale: 0.0,
            background: [1.0; 3],
            random_background: false,
            seed: 0,
            threads: 1,
            max_consecutive_skips: 10,
            dry_run: false,
            turntable_views: 8,
            body_asset: None,
            body_pose: Vec::new(),
        }
    }
}

/// What a schedule tick does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickKind {
    DensifyAndPrune,
    Prune,
}

fn on_grid(i: usize, from: usize, until: usize, every: usize) -> bool {
    every > 0 && i >= from && i <= until && (i - from).is_multiple_of(every)
}

impl TrainConfig {
    /// Full-scale setup: 100k initial splats, 1024² renders, batch 4.
    pub fn full_scale() -> Self {
        Self { resolution: 1024, batch_size: 4, init_splats: 100_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.resolution == 0 || self.batch_size == 0 || self.init_splats == 0 {
            return bad("resolution, batch_size and init_splats must be positive".into());
        }
        let lrs = [
            ("lr_position", self.lr_position),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
        ];
        for (name, lr) in lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be non-negative".into());
        }
        let ranges = [
            ("camera_distance", self.camera_distance),
            ("camera_fovy", self.camera_fovy),
            ("camera_elevation", self.camera_elevation),
            ("camera_azimuth", self.camera_azimuth),
            ("timestep_range", self.timestep_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} must be an ordered finite range, got [{lo}, {hi}]"));
            }
        }
        if self.camera_distance[0] <= 0.0 {
            return bad("camera_distance must be positive".into());
        }
        if self.camera_fovy[0] <= 0.0 || self.camera_fovy[1] >= 180.0 {
            return bad("camera_fovy must lie in (0, 180)".into());
        }
        if self.timestep_range[0] < 0.0 || self.timestep_range[1] > 1.0 {
            return bad("timestep_range must lie in [0, 1]".into());
        }
        if !(0.0 < self.init_opacity && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)".into());
        }
        if !(0.0 < self.toy_target_opacity && self.toy_target_opacity < 1.0) {
            return bad("toy_target_opacity must lie in (0, 1)".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be non-negative".into());
        }
        if self.densify_from > self.densify_until || self.prune_from > self.prune_until {
            return bad("schedule windows must be ordered".into());
        }
        if !(0.0..=1.0).contains(&self.densify_percentile) {
            return bad("densify_percentile must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.prune_opacity) || self.prune_max_scale < 0.0 {
            return bad("prune thresholds out of range".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]".into());
        }
        if self.guidance == GuidanceKind::Remote && self.predictor_url.is_none() {
            return bad("remote guidance needs predictor_url".into());
        }
        if self.preference_weight != 0.0 && self.scorers.is_empty() {
            return bad("preference_weight is non-zero but no scorers are configured".into());
        }
        if self.negation && self.static_negations.is_empty() {
            return bad("static_negations must not be empty".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    /// Schedule action at a 1-based iteration, if any.
    pub fn tick_kind(&self, iteration: usize) -> Option<TickKind> {
        if on_grid(iteration, self.densify_from, self.densify_until, self.densify_interval) {
            Some(TickKind::DensifyAndPrune)
        } else if on_grid(iteration, self.prune_from, self.prune_until, self.prune_interval) {
            Some(TickKind::Prune)
        } else {
            None
        }
    }

    pub fn learning_rates(&self) -> [f64; 5] {
        [self.lr_position, self.lr_scale, self.lr_rotation, self.lr_color, self.lr_opacity]
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    /// Parses a config file over the defaults, then applies `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, TrainError> {
        Self::layered(&Self::default(), text, overrides)
    }

    /// `base`, then the keys of the TOML `text`, then `key=value` overrides.
    /// Override values are TOML literals; anything that does not parse is
    /// taken as a string.
    pub fn layered(base: &TrainConfig, text: &str, overrides: &[String]) -> Result<Self, TrainError> {
        let mut table = toml::Table::try_from(base).map_err(|e| TrainError::Config(e.to_string()))?;
        let file: toml::Table = text.parse().map_err(|e| TrainError::Config(format!("config: {e}")))?;
        table.extend(file);
        for ov in overrides {
            let (key, value) =
                ov.split_once('=').ok_or_else(|| TrainError::Config(format!("override `{ov}` is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: TrainConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [TrainConfig::default(), TrainConfig::full_scale()] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn tick_set() {
        let cfg = TrainConfig::default();
        let ticks: Vec<_> = (1..=3600).filter(|&i| cfg.tick_kind(i).is_some()).collect();
        let expected: Vec<_> = (300..=2100).step_by(300).chain((2400..=3300).step_by(300)).collect();
        assert_eq!(ticks, expected);
        assert_eq!(cfg.tick_kind(2100), Some(TickKind::DensifyAndPrune));
        assert_eq!(cfg.tick_kind(2400), Some(TickKind::Prune));
        assert_eq!(cfg.tick_kind(200), None);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = TrainConfig::from_toml_with_overrides(
            "iterations = 10\nresolution = 32\n",
            &["seed=7".into(), "camera_distance = [1.6, 1.6]".into(), "guidance=none".into()],
        )
        .unwrap();
        assert_eq!((cfg.iterations, cfg.resolution, cfg.seed), (10, 32, 7));
        assert_eq!(cfg.camera_distance, [1.6, 1.6]);
        assert_eq!(cfg.guidance, GuidanceKind::None);
        assert!(TrainConfig::from_toml_str("lr_color = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("camera_fovy = [70.0, 40.0]").is_err());
        assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
        assert!(TrainConfig::from_toml_with_overrides("", &["seed".into()]).is_err());
        let full = TrainConfig::layered(&TrainConfig::full_scale(), "batch_size = 2", &["seed=3".into()]).unwrap();
        assert_eq!((full.init_splats, full.batch_size, full.seed), (100_000, 2, 3));
    }
}

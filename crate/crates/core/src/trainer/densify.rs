use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::splat_render::GaussianCloud;

use super::adam::AdamState;
use super::config::{TickKind, TrainConfig};
use super::TrainError;

/// Per-splat sums of the screen-space positional gradient norm and the
/// number of renders in which the splat was visible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradientStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn record(&mut self, norms: &[f32], visible: &[bool]) {
        for i in 0..self.sum.len() {
            if visible[i] {
                self.sum[i] += norms[i] as f64;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickEvent {
    pub iteration: usize,
    pub kind: TickKind,
    pub before: usize,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    pub after: usize,
    /// Mean-gradient cutoff used for densification; 0 on prune-only ticks.
    pub gradient_threshold: f64,
}

/// Rotates `v` by the normalized quaternion `q = (w, x, y, z)`.
fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        (1.0 - 2.0 * (y * y + z * z)) * v[0] + 2.0 * (x * y - w * z) * v[1] + 2.0 * (x * z + w * y) * v[2],
        2.0 * (x * y + w * z) * v[0] + (1.0 - 2.0 * (x * x + z * z)) * v[1] + 2.0 * (y * z - w * x) * v[2],
        2.0 * (x * z - w * y) * v[0] + 2.0 * (y * z + w * x) * v[1] + (1.0 - 2.0 * (x * x + y * y)) * v[2],
    ]
}

/// Cutoff above which a splat's mean gradient counts as high: the value at
/// the `percentile` rank among splats seen at least once.
pub fn gradient_threshold(stats: &GradientStats, percentile: f64) -> Option<f64> {
    let mut seen: Vec<f64> = (0..stats.len()).filter(|&i| stats.count[i] > 0).map(|i| stats.mean(i)).collect();
    if seen.is_empty() {
        return None;
    }
    seen.sort_by(f64::total_cmp);
    let idx = ((seen.len() - 1) as f64 * percentile).floor() as usize;
    Some(seen[idx])
}

/// Replaces splat `i` by two children with half its scale, each displaced by
/// a standard normal draw clamped to one standard deviation per local axis.
pub fn split_children(cloud: &GaussianCloud<f32>, i: usize, rng: &mut impl Rng) -> GaussianCloud<f32> {
    let mut out = GaussianCloud::new();
    let scale = cloud.scale(i).map(f64::from);
    let q = cloud.rotations[i].map(f64::from);
    let mu = cloud.positions[i].map(f64::from);
    for _ in 0..2 {
        let z: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-1.0, 1.0));
        let offset = rotate(q, [z[0] * scale[0], z[1] * scale[1], z[2] * scale[2]]);
        out.push_from(cloud, i);
        let c = out.len() - 1;
        out.positions[c] = [0, 1, 2].map(|k| (mu[k] + offset[k]) as f32);
        out.log_scales[c] = cloud.log_scales[i].map(|s| s - std::f32::consts::LN_2);
    }
    out
}

/// Acts on schedule ticks only: densify (split large, clone small) among
/// high-gradient splats, then prune by opacity and optionally by scale.
/// Moments of new splats start at zero; accumulators are reset on every tick.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud<f32>,
    adam: &mut AdamState<f32>,
    stats: &mut GradientStats,
    config: &TrainConfig,
    iteration: usize,
    extent: f64,
    rng: &mut impl Rng,
) -> Result<Option<TickEvent>, TrainError> {
    let Some(kind) = config.tick_kind(iteration) else { return Ok(None) };
    let before = cloud.len();
    let (mut split, mut cloned, mut threshold) = (0, 0, 0.0);

    if kind == TickKind::DensifyAndPrune {
        if let Some(cut) = gradient_threshold(stats, config.densify_percentile) {
            threshold = cut;
            let mut keep = vec![true; before];
            let mut added = GaussianCloud::new();
            for i in 0..before {
                let g = stats.mean(i);
                if !(g > cut && g > 0.0) {
                    continue;
                }
                let largest = cloud.scale(i).into_iter().fold(0.0f32, f32::max) as f64;
                if largest > config.dense_scale_fraction * extent {
                    let children = split_children(cloud, i, rng);
                    for c in 0..children.len() {
                        added.push_from(&children, c);
                    }
                    keep[i] = false;
                    split += 1;
                } else {
                    added.push_from(cloud, i);
                    cloned += 1;
                }
            }
            cloud.retain_mask(&keep);
            adam.retain_mask(&keep);
            for c in 0..added.len() {
                cloud.push_from(&added, c);
            }
            adam.push_zeros(added.len());
        }
    }

    let keep: Vec<bool> = (0..cloud.len())
        .map(|i| {
            let opaque = cloud.opacity(i) as f64 >= config.prune_opacity;
            let small = config.prune_max_scale <= 0.0
                || cloud.scale(i).into_iter().fold(0.0f32, f32::max) as f64 <= config.prune_max_scale;
            opaque && small
        })
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    if pruned > 0 {
        cloud.retain_mask(&keep);
        adam.retain_mask(&keep);
    }
    *stats = GradientStats::new(cloud.len());
    if cloud.is_empty() {
        return Err(TrainError::Collapse { iteration });
    }
    Ok(Some(TickEvent {
        iteration,
        kind,
        before,
        split,
        cloned,
        pruned,
        after: cloud.len(),
        gradient_threshold: threshold,
    }))
}

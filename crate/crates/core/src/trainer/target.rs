//! Prompt-keyed silhouette the toy guidance pulls toward.

use crate::keyed::{color_by_name, keyed_color};
use crate::negation::extract_maps;
use crate::splat_render::cloud::{color_to_dc, logit};
use crate::splat_render::GaussianCloud;

/// Height bands, bottom up, as fractions of the body's vertical extent.
const BANDS: [(f64, &str); 4] = [(0.06, "feet"), (0.5, "lower"), (0.82, "upper"), (f64::INFINITY, "head")];

/// Band colors: garments named by the first three MAPs (upper, lower, feet in
/// prompt order) take their modifier's color when it names one; everything
/// else gets a prompt-keyed color.
pub fn band_colors(prompt: &str) -> [[f64; 3]; 4] {
    let maps = extract_maps(prompt);
    let from_map = |k: usize, salt: &str| {
        maps.get(k)
            .and_then(|m| m.modifier.split_whitespace().find_map(color_by_name))
            .unwrap_or_else(|| keyed_color(prompt, salt))
    };
    [from_map(2, "feet"), from_map(1, "lower"), from_map(0, "upper"), keyed_color(prompt, "head")]
}

/// Copy of `cloud` recolored by height band with a common opacity.
pub fn silhouette_cloud(cloud: &GaussianCloud<f32>, prompt: &str, opacity: f64) -> GaussianCloud<f32> {
    let colors = band_colors(prompt);
    let (lo, hi) = cloud
        .positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1] as f64), hi.max(p[1] as f64)));
    let span = (hi - lo).max(1e-9);
    let mut out = cloud.clone();
    let logit_o = logit(opacity) as f32;
    for i in 0..out.len() {
        let h = (out.positions[i][1] as f64 - lo) / span;
        let band = BANDS.iter().position(|(top, _)| h < *top).unwrap_or(BANDS.len() - 1);
        out.color_dc[i] = colors[band].map(|c| color_to_dc(c) as f32);
        out.opacity_logits[i] = logit_o;
    }
    out
}

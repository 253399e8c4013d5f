//! Finite-difference check of the analytic render gradients.
//!
//! The oracle is a brute-force reference renderer that shares nothing with
//! the rasterizer except the camera matrices: it evaluates every splat at
//! every pixel, with its own quaternion and projection algebra. The
//! `1/255` skip and `0.99` clamp make the image piecewise smooth, so finite
//! differences are taken with the set of contributing (pixel, splat) pairs,
//! their order and clamp flags frozen at the base point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::backward::render_backward;
use super::camera::CameraPose;
use super::cloud::{color_to_dc, logit, GaussianCloud, ParamGroup, SH_C0};
use super::raster::{render, COV_BLUR, MAX_ALPHA, MIN_ALPHA};
use super::RenderError;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckConfig {
    pub scenes: usize,
    pub max_splats: usize,
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { scenes: 100, max_splats: 10, size: 16, step: 1e-3, tolerance: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub group: &'static str,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneReport {
    pub scene: usize,
    pub splats: usize,
    /// Largest pixel difference between the rasterizer and the reference.
    pub forward_error: f64,
    pub groups: Vec<GroupError>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub scenes: Vec<SceneReport>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// A random scene small enough for central differences over every parameter.
#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: GaussianCloud<f64>,
    pub camera: CameraPose,
    pub background: [f64; 3],
    /// Weights `w` of the scalar test loss `Σ w · image`.
    pub weights: Vec<f64>,
}

pub fn random_scene(rng: &mut impl Rng, max_splats: usize, size: usize) -> Scene {
    let n = rng.gen_range(1..=max_splats.max(1));
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        cloud.positions.push([rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
        cloud.log_scales.push(std::array::from_fn(|_| rng.gen_range(0.05f64..0.2).ln()));
        cloud.rotations.push(q);
        cloud.color_dc.push(std::array::from_fn(|_| color_to_dc(rng.gen_range(0.1..0.9))));
        cloud.opacity_logits.push(logit(rng.gen_range(0.1..0.9)));
    }
    let camera = CameraPose::new(2.0, 50.0, rng.gen_range(-20.0..20.0), rng.gen_range(-180.0..180.0), size, size);
    let background = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let weights = (0..size * size * 3).map(|_| rng.sample(StandardNormal)).collect();
    Scene { cloud, camera, background, weights }
}

/// Contributing `(splat, clamped)` pairs per pixel, front to back.
type Pattern = Vec<Vec<(usize, bool)>>;

struct RefSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    visible: bool,
}

fn rotation_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    // (w² − |v|²) I + 2 v vᵀ + 2 w [v]×
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    let v = [x, y, z];
    let d = w * w - (x * x + y * y + z * z);
    let cross = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    std::array::from_fn(|i| {
        std::array::from_fn(|j| if i == j { d } else { 0.0 } + 2.0 * v[i] * v[j] + 2.0 * w * cross[i][j])
    })
}

fn reference_splats(cloud: &GaussianCloud<f64>, camera: &CameraPose) -> Result<Vec<RefSplat>, RenderError> {
    let vp = camera.view_projection()?;
    Ok((0..cloud.len())
        .map(|i| {
            let opacity = 1.0 / (1.0 + (-cloud.opacity_logits[i]).exp());
            let color = cloud.color_dc[i].map(|d| (0.5 + SH_C0 * d).clamp(0.0, 1.0));
            let v = vp.to_view(cloud.positions[i]);
            let mut out = RefSplat { mean: [0.0; 2], conic: [0.0; 3], opacity, color, depth: v[2], visible: false };
            if !(v[2] > vp.near) {
                return out;
            }
            out.mean = vp.to_pixel(v);
            // world covariance as Σ_k s_k² r_k r_kᵀ over rotated axes
            let r = rotation_matrix(cloud.rotations[i]);
            let s = cloud.log_scales[i].map(f64::exp);
            let mut cov3 = [[0.0; 3]; 3];
            for k in 0..3 {
                for a in 0..3 {
                    for b in 0..3 {
                        cov3[a][b] += s[k] * s[k] * r[a][k] * r[b][k];
                    }
                }
            }
            // screen rows: d(pixel)/d(world) = J W
            let j = [
                [vp.fx / v[2], 0.0, -vp.fx * v[0] / (v[2] * v[2])],
                [0.0, vp.fy / v[2], -vp.fy * v[1] / (v[2] * v[2])],
            ];
            let m: [[f64; 3]; 2] =
                std::array::from_fn(|a| std::array::from_fn(|b| (0..3).map(|k| j[a][k] * vp.rotation[k][b]).sum()));
            let quad = |a: usize, b: usize| -> f64 {
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        acc += m[a][p] * cov3[p][q] * m[b][q];
                    }
                }
                acc
            };
            let (xx, xy, yy) = (quad(0, 0) + COV_BLUR, quad(0, 1), quad(1, 1) + COV_BLUR);
            let det = xx * yy - xy * xy;
            if det > 0.0 && opacity * 255.0 > 1.0 {
                out.conic = [yy / det, -xy / det, xx / det];
                out.visible = true;
            }
            out
        })
        .collect())
}

/// Renders every pixel by brute force. With `frozen`, exactly the listed
/// contributors are composited and the clamp flags are taken as given.
fn reference_render(
    cloud: &GaussianCloud<f64>,
    camera: &CameraPose,
    background: [f64; 3],
    frozen: Option<&Pattern>,
) -> Result<(Vec<f64>, Pattern), RenderError> {
    let splats = reference_splats(cloud, camera)?;
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].visible).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    let (w, h) = (camera.width, camera.height);
    let mut image = vec![0.0; w * h * 3];
    let mut pattern = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let eval = |i: usize| {
                let s = &splats[i];
                let (dx, dy) = (p[0] - s.mean[0], p[1] - s.mean[1]);
                let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
                (power, s.opacity * power.exp())
            };
            let contributors: Vec<(usize, bool)> = match frozen {
                Some(f) => f[y * w + x].clone(),
                None => order
                    .iter()
                    .filter_map(|&i| {
                        let (power, raw) = eval(i);
                        (power <= 0.0 && raw >= MIN_ALPHA).then_some((i, raw > MAX_ALPHA))
                    })
                    .collect(),
            };
            let mut t = 1.0;
            let pix = &mut image[3 * (y * w + x)..3 * (y * w + x) + 3];
            for &(i, clamped) in &contributors {
                let sigma = if clamped { MAX_ALPHA } else { eval(i).1 };
                for c in 0..3 {
                    pix[c] += splats[i].color[c] * sigma * t;
                }
                t *= 1.0 - sigma;
            }
            for c in 0..3 {
                pix[c] += background[c] * t;
            }
            pattern.push(contributors);
        }
    }
    Ok((image, pattern))
}

pub fn check_scene(scene: &Scene, index: usize, cfg: &GradCheckConfig) -> Result<SceneReport, RenderError> {
    let Scene { cloud, camera, background, weights } = scene;
    let out = render::<f64>(cloud, camera, *background)?;
    let grads = render_backward(cloud, camera, &out, weights)?;
    let (reference, pattern) = reference_render(cloud, camera, *background, None)?;
    let forward_error = out.image.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let loss = |c: &GaussianCloud<f64>| -> Result<f64, RenderError> {
        let (img, _) = reference_render(c, camera, *background, Some(&pattern))?;
        Ok(img.iter().zip(weights).map(|(a, b)| a * b).sum())
    };
    let mut groups = Vec::new();
    let mut passed = forward_error < 1e-9;
    for (g, group) in ParamGroup::ALL.into_iter().enumerate() {
        let analytic = grads.params.groups()[g].1.to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = cloud.clone();
        for (k, slot) in numeric.iter_mut().enumerate() {
            let base = probe.groups()[g].1[k];
            probe.groups_mut()[g].1[k] = base + cfg.step;
            let plus = loss(&probe)?;
            probe.groups_mut()[g].1[k] = base - cfg.step;
            let minus = loss(&probe)?;
            probe.groups_mut()[g].1[k] = base;
            *slot = (plus - minus) / (2.0 * cfg.step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (an, nn) = (norm(&analytic), norm(&numeric));
        let scale = an.max(nn);
        let relative_error = if scale < 1e-10 { 0.0 } else { norm(&diff) / scale };
        passed &= relative_error <= cfg.tolerance;
        groups.push(GroupError { group: group.name(), relative_error, analytic_norm: an, numeric_norm: nn });
    }
    Ok(SceneReport { scene: index, splats: cloud.len(), forward_error, groups, passed })
}

pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport, RenderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for index in 0..cfg.scenes {
        let scene = random_scene(&mut rng, cfg.max_splats, cfg.size);
        scenes.push(check_scene(&scene, index, cfg)?);
    }
    let max_relative_error = scenes.iter().flat_map(|s| s.groups.iter().map(|g| g.relative_error)).fold(0.0, f64::max);
    let passed = scenes.iter().all(|s| s.passed);
    Ok(GradCheckReport { config: cfg.clone(), scenes, max_relative_error, passed })
}

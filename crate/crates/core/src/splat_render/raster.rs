//! Tile-binned, depth-sorted front-to-back alpha compositing.

use crate::image::Image;
use crate::real::Real;

use super::camera::CameraPose;
use super::cloud::GaussianCloud;
use super::project::{project_with, ViewMatrices};
use super::RenderError;

pub const TILE_SIZE: usize = 16;
/// Low-pass term added to the screen covariance diagonal, in px².
pub const COV_BLUR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

/// Per-splat screen-space data shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct PreparedSplat<T> {
    pub mean: [T; 2],
    /// Inverse of the regularized screen covariance, `(xx, xy, yy)`.
    pub conic: [T; 3],
    pub opacity: T,
    pub color: [T; 3],
    pub depth: T,
    pub radius: T,
    pub visible: bool,
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`
    pub image: Vec<T>,
    /// Accumulated opacity per pixel.
    pub alpha: Vec<T>,
    pub(crate) final_transmittance: Vec<T>,
    /// Number of tile-list entries walked up to the last contributor.
    pub(crate) last_contributor: Vec<u32>,
    pub(crate) prepared: Vec<PreparedSplat<T>>,
    /// Depth-sorted splat indices per tile.
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
    pub background: [T; 3],
}

/// One splat's compositing term at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution<T> {
    pub splat: usize,
    /// `σ_i`, after the clamp.
    pub sigma: T,
    /// Transmittance in front of this splat.
    pub transmittance: T,
    pub clamped: bool,
}

impl<T: Real> RenderOutput<T> {
    pub fn to_image(&self) -> Image {
        Image::from_data(self.width, self.height, self.image.iter().map(|v| v.as_f64()).collect())
            .expect("render output has image shape")
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> T {
        self.alpha[y * self.width + x]
    }

    pub fn prepared(&self) -> &[PreparedSplat<T>] {
        &self.prepared
    }

    /// Front-to-back compositing terms at a pixel and the background remainder.
    pub fn pixel_contributions(&self, x: usize, y: usize) -> (Vec<Contribution<T>>, T) {
        let tile = &self.tiles[(y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE];
        let p = pixel_center::<T>(x, y);
        let mut t = T::one();
        let mut out = Vec::new();
        for &idx in tile {
            if let Some((sigma, _, clamped)) = splat_alpha(&self.prepared[idx as usize], p) {
                out.push(Contribution { splat: idx as usize, sigma, transmittance: t, clamped });
                t *= T::one() - sigma;
            }
        }
        (out, t)
    }
}

pub(crate) fn pixel_center<T: Real>(x: usize, y: usize) -> [T; 2] {
    [T::of(x as f64 + 0.5), T::of(y as f64 + 0.5)]
}

/// `(σ, G, clamped)` for a splat at a pixel, or `None` if it is skipped there.
#[inline]
pub(crate) fn splat_alpha<T: Real>(s: &PreparedSplat<T>, p: [T; 2]) -> Option<(T, T, bool)> {
    let dx = p[0] - s.mean[0];
    let dy = p[1] - s.mean[1];
    let power = -T::of(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > T::zero() {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    if raw < T::of(MIN_ALPHA) {
        return None;
    }
    let max = T::of(MAX_ALPHA);
    Some(if raw > max { (max, g, true) } else { (raw, g, false) })
}

pub(crate) fn prepare<T: Real>(cloud: &GaussianCloud<T>, vm: &ViewMatrices<T>) -> Vec<PreparedSplat<T>> {
    let zero = T::zero();
    (0..cloud.len())
        .map(|i| {
            let proj = project_with(vm, cloud.positions[i], cloud.log_scales[i], cloud.rotations[i]);
            let opacity = cloud.opacity(i);
            let color = cloud.color(i);
            let mut out = PreparedSplat {
                mean: proj.mean,
                conic: [zero; 3],
                opacity,
                color,
                depth: proj.depth,
                radius: zero,
                visible: false,
            };
            if proj.culled {
                return out;
            }
            let blur = T::of(COV_BLUR);
            let (a, b, c) = (proj.cov[0] + blur, proj.cov[1], proj.cov[2] + blur);
            let det = a * c - b * b;
            let reach = opacity * T::of(255.0);
            if !(det > zero) || !det.is_finite() || !(reach > T::one()) {
                return out;
            }
            out.conic = [c / det, -b / det, a / det];
            let mid = T::of(0.5) * (a + c);
            let lambda_max = mid + (mid * mid - det).max(zero).sqrt();
            // beyond this radius σ < 1/255, so tile culling never drops a contribution
            out.radius = (T::of(2.0) * reach.ln() * lambda_max).sqrt();
            out.visible = out.radius.is_finite() && out.mean.iter().all(|m| m.is_finite());
            out
        })
        .collect()
}

pub fn render<T: Real>(
    cloud: &GaussianCloud<T>,
    camera: &CameraPose,
    background: [f64; 3],
) -> Result<RenderOutput<T>, RenderError> {
    cloud.validate()?;
    let vp = camera.view_projection()?;
    let vm = ViewMatrices::<T>::new(&vp);
    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);

    let prepared = prepare(cloud, &vm);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in prepared.iter().enumerate() {
        if !s.visible {
            continue;
        }
        let r = s.radius.as_f64();
        let (mx, my) = (s.mean[0].as_f64(), s.mean[1].as_f64());
        let x0 = ((mx - r - 1.0) / TILE_SIZE as f64).floor().max(0.0);
        let y0 = ((my - r - 1.0) / TILE_SIZE as f64).floor().max(0.0);
        let x1 = ((mx + r) / TILE_SIZE as f64).floor().min(tiles_x as f64 - 1.0);
        let y1 = ((my + r) / TILE_SIZE as f64).floor().min(tiles_y as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for ty in y0 as usize..=y1 as usize {
            for tx in x0 as usize..=x1 as usize {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for list in tiles.iter_mut() {
        list.sort_by(|&a, &b| {
            let (da, db) = (prepared[a as usize].depth, prepared[b as usize].depth);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
    }

    let bg = background.map(T::of);
    let mut image = vec![T::zero(); width * height * 3];
    let mut alpha = vec![T::zero(); width * height];
    let mut final_transmittance = vec![T::one(); width * height];
    let mut last_contributor = vec![0u32; width * height];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let list = &tiles[ty * tiles_x + tx];
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let p = pixel_center::<T>(x, y);
                    let mut t = T::one();
                    let mut rgb = [T::zero(); 3];
                    let mut last = 0;
                    for (k, &idx) in list.iter().enumerate() {
                        let s = &prepared[idx as usize];
                        let Some((sigma, _, _)) = splat_alpha(s, p) else { continue };
                        for c in 0..3 {
                            rgb[c] += s.color[c] * sigma * t;
                        }
                        t *= T::one() - sigma;
                        last = k + 1;
                    }
                    let pix = y * width + x;
                    for c in 0..3 {
                        image[3 * pix + c] = rgb[c] + bg[c] * t;
                    }
                    alpha[pix] = T::one() - t;
                    final_transmittance[pix] = t;
                    last_contributor[pix] = last as u32;
                }
            }
        }
    }

    Ok(RenderOutput {
        width,
        height,
        image,
        alpha,
        final_transmittance,
        last_contributor,
        prepared,
        tiles,
        tiles_x,
        background: bg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // 15 px wide so pixel (7, 7) is centered exactly on the optical axis
    fn axis_camera() -> CameraPose {
        CameraPose::new(2.0, 50.0, 0.0, 0.0, 15, 15)
    }

    const ID: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    #[test]
    fn empty_cloud_is_background() {
        let out = render::<f64>(&GaussianCloud::new(), &axis_camera(), [0.2, 0.4, 0.6]).unwrap();
        for px in out.image.chunks(3) {
            assert_eq!(px, [0.2, 0.4, 0.6]);
        }
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn saturated_splat_hits_clamp() {
        let mut cloud = GaussianCloud::new();
        cloud.push_activated([0.0; 3], [0.2; 3], ID, [0.9, 0.1, 0.3], 0.999_999);
        let bg = [1.0, 1.0, 1.0];
        let out = render::<f64>(&cloud, &axis_camera(), bg).unwrap();
        let (contrib, rest) = out.pixel_contributions(7, 7);
        assert!(contrib[0].clamped);
        let c = cloud.color(0);
        for k in 0..3 {
            let want = 0.99 * c[k] + 0.01 * bg[k];
            assert!((out.image[3 * (7 * 15 + 7) + k] - want).abs() < 1e-12);
        }
        assert!((rest - 0.01).abs() < 1e-12);
    }

    #[test]
    fn two_half_splats() {
        let mut cloud = GaussianCloud::new();
        cloud.push_activated([0.0; 3], [0.2; 3], ID, [1.0, 0.0, 0.0], 0.5);
        cloud.push_activated([0.0; 3], [0.2; 3], ID, [0.0, 1.0, 0.0], 0.5);
        let bg = [0.0, 0.0, 1.0];
        let out = render::<f64>(&cloud, &axis_camera(), bg).unwrap();
        let (c1, c2) = (cloud.color(0), cloud.color(1));
        for k in 0..3 {
            let want = 0.5 * c1[k] + 0.25 * c2[k] + 0.25 * bg[k];
            assert!((out.image[3 * (7 * 15 + 7) + k] - want).abs() < 1e-12);
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud<f64> {
        let mut cloud = GaussianCloud::new();
        for _ in 0..n {
            cloud.push_activated(
                [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                [rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3)],
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0],
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen_range(0.05..1.0),
            );
        }
        cloud
    }

    #[test]
    fn compositing_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 40);
        let cam = CameraPose::new(1.8, 60.0, 10.0, 30.0, 40, 33);
        let out = render::<f64>(&cloud, &cam, [1.0; 3]).unwrap();
        for y in 0..33 {
            for x in 0..40 {
                let (contrib, rest) = out.pixel_contributions(x, y);
                let total: f64 = contrib.iter().map(|c| c.sigma * c.transmittance).sum::<f64>() + rest;
                assert!((total - 1.0).abs() < 1e-12);
                assert!((out.alpha_at(x, y) - (1.0 - rest)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 25);
        let cam = CameraPose::new(2.0, 50.0, -5.0, 70.0, 32, 32);
        let base = render::<f64>(&cloud, &cam, [0.5; 3]).unwrap();
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.reverse();
        order.swap(3, 11);
        let mut shuffled = GaussianCloud::new();
        for &i in &order {
            shuffled.push_from(&cloud, i);
        }
        let other = render::<f64>(&shuffled, &cam, [0.5; 3]).unwrap();
        for (a, b) in base.image.iter().zip(&other.image) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_opacity_gives_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cloud = random_cloud(&mut rng, 20);
        cloud.opacity_logits.iter_mut().for_each(|l| *l = -30.0);
        let out = render::<f64>(&cloud, &axis_camera(), [0.3, 0.3, 0.3]).unwrap();
        assert!(out.image.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn f32_matches_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 30);
        let cam = CameraPose::new(1.7, 45.0, 15.0, -40.0, 24, 24);
        let a = render::<f64>(&cloud, &cam, [1.0; 3]).unwrap();
        let b = render::<f32>(&cloud.cast(), &cam, [1.0; 3]).unwrap();
        for (x, y) in a.image.iter().zip(&b.image) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }
}

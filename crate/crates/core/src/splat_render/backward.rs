//! Reverse-mode derivative of the compositing equation.

use crate::real::Real;

use super::camera::CameraPose;
use super::cloud::{GaussianCloud, SH_C0};
use super::project::{project_backward, ViewMatrices};
use super::raster::{pixel_center, splat_alpha, RenderOutput, TILE_SIZE};
use super::RenderError;

/// Gradients in the layout of the stored parameters, plus the per-splat
/// screen-space positional gradient norm used by densification.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGradients<T> {
    pub params: GaussianCloud<T>,
    pub mean2d_norm: Vec<T>,
    pub visible: Vec<bool>,
}

impl<T: Real> CloudGradients<T> {
    pub fn zeros(n: usize) -> Self {
        Self { params: GaussianCloud::zeros(n), mean2d_norm: vec![T::zero(); n], visible: vec![false; n] }
    }
}

pub fn render_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    camera: &CameraPose,
    output: &RenderOutput<T>,
    image_gradient: &[T],
) -> Result<CloudGradients<T>, RenderError> {
    let n = cloud.len();
    cloud.validate()?;
    if output.prepared.len() != n {
        return Err(RenderError::Contract(format!(
            "render output holds {} splats, cloud has {n}",
            output.prepared.len()
        )));
    }
    if camera.width != output.width || camera.height != output.height {
        return Err(RenderError::Contract("camera resolution differs from the render output".into()));
    }
    if image_gradient.len() != output.image.len() {
        return Err(RenderError::Contract(format!(
            "image gradient has {} values, expected {}",
            image_gradient.len(),
            output.image.len()
        )));
    }

    let zero = T::zero();
    let one = T::one();
    let mut g_mean = vec![[zero; 2]; n];
    let mut g_conic = vec![[zero; 3]; n];
    let mut g_opacity = vec![zero; n];
    let mut g_color = vec![[zero; 3]; n];

    let (width, height) = (output.width, output.height);
    for (tile_id, list) in output.tiles.iter().enumerate() {
        let (tx, ty) = (tile_id % output.tiles_x, tile_id / output.tiles_x);
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                let pix = y * width + x;
                let last = output.last_contributor[pix] as usize;
                if last == 0 {
                    continue;
                }
                let g = [image_gradient[3 * pix], image_gradient[3 * pix + 1], image_gradient[3 * pix + 2]];
                if g.iter().all(|v| *v == zero) {
                    continue;
                }
                let p = pixel_center::<T>(x, y);
                let mut t = output.final_transmittance[pix];
                // color composited behind the current splat, background included
                let mut behind = output.background.map(|b| b * t);
                for &idx in list[..last].iter().rev() {
                    let i = idx as usize;
                    let s = &output.prepared[i];
                    let Some((sigma, gauss, clamped)) = splat_alpha(s, p) else { continue };
                    let t_front = t / (one - sigma);
                    let mut g_sigma = zero;
                    for c in 0..3 {
                        g_color[i][c] += g[c] * sigma * t_front;
                        g_sigma += g[c] * (s.color[c] * t_front - behind[c] / (one - sigma));
                        behind[c] += s.color[c] * sigma * t_front;
                    }
                    t = t_front;
                    if clamped {
                        continue;
                    }
                    g_opacity[i] += g_sigma * gauss;
                    let g_power = g_sigma * s.opacity * gauss;
                    let dx = p[0] - s.mean[0];
                    let dy = p[1] - s.mean[1];
                    // power = -½(a dx² + c dy²) - b dx dy, with d = p - mean
                    g_mean[i][0] += g_power * (s.conic[0] * dx + s.conic[1] * dy);
                    g_mean[i][1] += g_power * (s.conic[1] * dx + s.conic[2] * dy);
                    g_conic[i][0] += g_power * (-T::of(0.5) * dx * dx);
                    g_conic[i][1] += g_power * (-dx * dy);
                    g_conic[i][2] += g_power * (-T::of(0.5) * dy * dy);
                }
            }
        }
    }

    let vp = camera.view_projection()?;
    let vm = ViewMatrices::<T>::new(&vp);
    let mut out = CloudGradients::zeros(n);
    for i in 0..n {
        let s = &output.prepared[i];
        if !s.visible {
            continue;
        }
        out.visible[i] = true;
        out.mean2d_norm[i] = (g_mean[i][0] * g_mean[i][0] + g_mean[i][1] * g_mean[i][1]).sqrt();

        // conic Q = Σ'⁻¹: dL/dΣ' = -Q G_Q Q with G_Q symmetric (off-diagonal split in half)
        let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let half = T::of(0.5) * g_conic[i][1];
        let gq = [[g_conic[i][0], half], [half, g_conic[i][2]]];
        let mut g_cov = [[zero; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = zero;
                for k in 0..2 {
                    for l in 0..2 {
                        acc += q[a][k] * gq[k][l] * q[l][b];
                    }
                }
                g_cov[a][b] = -acc;
            }
        }
        let pg = project_backward(&vm, cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], g_mean[i], g_cov);
        out.params.positions[i] = pg.position;
        out.params.log_scales[i] = pg.log_scale;
        out.params.rotations[i] = pg.rotation;

        let alpha = s.opacity;
        out.params.opacity_logits[i] = g_opacity[i] * alpha * (one - alpha);
        for c in 0..3 {
            let raw = T::of(0.5) + T::of(SH_C0) * cloud.color_dc[i][c];
            if raw > zero && raw < one {
                out.params.color_dc[i][c] = g_color[i][c] * T::of(SH_C0);
            }
        }
    }
    Ok(out)
}

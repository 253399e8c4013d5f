//! Perspective projection of 3D Gaussians to screen-space ellipses
//! (first-order / EWA) and its reverse-mode derivative.

use crate::real::Real;

use super::camera::ViewProjection;

pub type M3<T> = [[T; 3]; 3];

/// A splat after projection. `cov` is the raw screen covariance
/// `(xx, xy, yy)` before the rasterizer's low-pass regularization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat<T> {
    pub mean: [T; 2],
    pub cov: [T; 3],
    pub depth: T,
    pub view: [T; 3],
    pub culled: bool,
}

pub(crate) struct ViewMatrices<T> {
    pub w: M3<T>,
    pub t: [T; 3],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub near: T,
}

impl<T: Real> ViewMatrices<T> {
    pub fn new(vp: &ViewProjection) -> Self {
        Self {
            w: vp.rotation.map(|r| r.map(T::of)),
            t: vp.translation.map(T::of),
            fx: T::of(vp.fx),
            fy: T::of(vp.fy),
            cx: T::of(vp.cx),
            cy: T::of(vp.cy),
            near: T::of(vp.near),
        }
    }

    fn to_view(&self, p: [T; 3]) -> [T; 3] {
        let mut out = self.t;
        for i in 0..3 {
            for k in 0..3 {
                out[i] += self.w[i][k] * p[k];
            }
        }
        out
    }

    /// Jacobian of the pinhole projection at a view-space point.
    fn jacobian(&self, v: [T; 3]) -> [[T; 3]; 2] {
        let z = T::zero();
        let iz = T::one() / v[2];
        let iz2 = iz * iz;
        [[self.fx * iz, z, -self.fx * v[0] * iz2], [z, self.fy * iz, -self.fy * v[1] * iz2]]
    }
}

pub fn normalize_quat<T: Real>(q: [T; 4]) -> ([T; 4], T) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    (q.map(|x| x / n), n)
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn quat_to_matrix<T: Real>(q: [T; 4]) -> M3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::of(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// `Σ = R diag(exp(s))² Rᵀ`
pub fn covariance_3d<T: Real>(log_scale: [T; 3], rotation: [T; 4]) -> M3<T> {
    let r = quat_to_matrix(normalize_quat(rotation).0);
    let s = log_scale.map(|v| v.exp());
    let m = rs(&r, &s);
    mul_abt(&m, &m)
}

pub fn project_gaussian<T: Real>(
    position: [T; 3],
    log_scale: [T; 3],
    rotation: [T; 4],
    vp: &ViewProjection,
) -> ProjectedSplat<T> {
    project_with(&ViewMatrices::new(vp), position, log_scale, rotation)
}

pub(crate) fn project_with<T: Real>(
    vm: &ViewMatrices<T>,
    position: [T; 3],
    log_scale: [T; 3],
    rotation: [T; 4],
) -> ProjectedSplat<T> {
    let v = vm.to_view(position);
    if !(v[2] > vm.near) {
        let z = T::zero();
        return ProjectedSplat { mean: [z; 2], cov: [z; 3], depth: v[2], view: v, culled: true };
    }
    let mean = [vm.fx * v[0] / v[2] + vm.cx, vm.fy * v[1] / v[2] + vm.cy];
    let sigma = covariance_3d(log_scale, rotation);
    let m = mul_2x3_3x3(&vm.jacobian(v), &vm.w);
    let cov = screen_cov(&m, &sigma);
    ProjectedSplat { mean, cov, depth: v[2], view: v, culled: false }
}

/// Gradients of the projection w.r.t. the stored splat parameters.
pub(crate) struct ProjectionGrad<T> {
    pub position: [T; 3],
    pub log_scale: [T; 3],
    pub rotation: [T; 4],
}

/// Reverse mode through `mean = π(W p + t)` and `cov = M Σ Mᵀ` with `M = J W`.
/// `g_cov` is the gradient w.r.t. the full symmetric 2×2 matrix.
pub(crate) fn project_backward<T: Real>(
    vm: &ViewMatrices<T>,
    position: [T; 3],
    log_scale: [T; 3],
    rotation: [T; 4],
    g_mean: [T; 2],
    g_cov: [[T; 2]; 2],
) -> ProjectionGrad<T> {
    let zero = T::zero();
    let two = T::of(2.0);
    let v = vm.to_view(position);
    let jac = vm.jacobian(v);
    let m = mul_2x3_3x3(&jac, &vm.w);

    let (qn, qlen) = normalize_quat(rotation);
    let r = quat_to_matrix(qn);
    let s = log_scale.map(|x| x.exp());
    let rsm = rs(&r, &s);
    let sigma = mul_abt(&rsm, &rsm);

    // dL/dΣ = Mᵀ G M
    let mut g_sigma = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = zero;
            for a in 0..2 {
                for b in 0..2 {
                    acc += m[a][i] * g_cov[a][b] * m[b][j];
                }
            }
            g_sigma[i][j] = acc;
        }
    }
    // dL/dM = 2 G M Σ ; dL/dJ = dL/dM Wᵀ
    let mut g_m = [[zero; 3]; 2];
    for a in 0..2 {
        for j in 0..3 {
            let mut acc = zero;
            for b in 0..2 {
                for k in 0..3 {
                    acc += g_cov[a][b] * m[b][k] * sigma[k][j];
                }
            }
            g_m[a][j] = two * acc;
        }
    }
    let mut g_j = [[zero; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            g_j[a][k] = (0..3).map(|j| g_m[a][j] * vm.w[k][j]).sum();
        }
    }

    let iz = T::one() / v[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (vm.fx, vm.fy);
    let mut g_v = [zero; 3];
    // through the Jacobian entries
    g_v[0] += g_j[0][2] * (-fx * iz2);
    g_v[1] += g_j[1][2] * (-fy * iz2);
    g_v[2] += g_j[0][0] * (-fx * iz2)
        + g_j[0][2] * (two * fx * v[0] * iz3)
        + g_j[1][1] * (-fy * iz2)
        + g_j[1][2] * (two * fy * v[1] * iz3);
    // through the projected mean
    g_v[0] += g_mean[0] * fx * iz;
    g_v[1] += g_mean[1] * fy * iz;
    g_v[2] += -g_mean[0] * fx * v[0] * iz2 - g_mean[1] * fy * v[1] * iz2;

    let g_position = [0, 1, 2].map(|k| (0..3).map(|i| vm.w[i][k] * g_v[i]).sum());

    // Σ = A Aᵀ with A = R S: dL/dA = 2 G_Σ A
    let mut g_a = [[zero; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            g_a[i][k] = two * (0..3).map(|j| g_sigma[i][j] * rsm[j][k]).sum::<T>();
        }
    }
    let mut g_log_scale = [zero; 3];
    let mut g_r = [[zero; 3]; 3];
    for k in 0..3 {
        let mut g_s = zero;
        for i in 0..3 {
            g_s += g_a[i][k] * r[i][k];
            g_r[i][k] = g_a[i][k] * s[k];
        }
        g_log_scale[k] = g_s * s[k];
    }

    let [w, x, y, z] = qn;
    let g = g_r;
    let g_qn = [
        two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - two * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - two * x * g[2][2]),
        two * (-two * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - two * y * g[2][2]),
        two * (-two * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - two * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]),
    ];
    let dot: T = (0..4).map(|i| qn[i] * g_qn[i]).sum();
    let g_rotation = [0, 1, 2, 3].map(|i| (g_qn[i] - qn[i] * dot) / qlen);

    ProjectionGrad { position: g_position, log_scale: g_log_scale, rotation: g_rotation }
}

fn rs<T: Real>(r: &M3<T>, s: &[T; 3]) -> M3<T> {
    [0, 1, 2].map(|i| [0, 1, 2].map(|k| r[i][k] * s[k]))
}

fn mul_abt<T: Real>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| a[i][k] * b[j][k]).sum()))
}

fn mul_2x3_3x3<T: Real>(a: &[[T; 3]; 2], b: &M3<T>) -> [[T; 3]; 2] {
    [0, 1].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn screen_cov<T: Real>(m: &[[T; 3]; 2], sigma: &M3<T>) -> [T; 3] {
    let entry = |a: usize, b: usize| -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                acc += m[a][i] * sigma[i][j] * m[b][j];
            }
        }
        acc
    };
    [entry(0, 0), entry(0, 1), entry(1, 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat_render::CameraPose;

    fn camera() -> ViewProjection {
        CameraPose::new(2.0, 50.0, 0.0, 0.0, 32, 32).view_projection().unwrap()
    }

    #[test]
    fn isotropic_on_axis_projects_isotropic() {
        let p = project_gaussian::<f64>([0.0; 3], [0.1f64.ln(); 3], [0.3, -0.5, 0.2, 0.7], &camera());
        assert!(!p.culled);
        assert!(p.cov[1].abs() < 1e-9);
        assert!((p.cov[0] - p.cov[2]).abs() < 1e-9);
        assert_eq!(p.mean, [16.0, 16.0]);
    }

    #[test]
    fn doubling_scale_quadruples_covariance() {
        let vp = camera();
        let pos = [0.1, -0.2, 0.3];
        let rot = [0.9, 0.1, -0.3, 0.2];
        let a = project_gaussian::<f64>(pos, [-2.0, -1.5, -2.5], rot, &vp);
        let b = project_gaussian::<f64>(pos, [-2.0 + 2f64.ln(), -1.5 + 2f64.ln(), -2.5 + 2f64.ln()], rot, &vp);
        for k in 0..3 {
            assert!((b.cov[k] - 4.0 * a.cov[k]).abs() < 1e-9 * a.cov[k].abs().max(1.0));
        }
    }

    #[test]
    fn matches_finite_difference_projection_oracle() {
        let vp = camera();
        let pos = [0.15, -0.25, 0.2];
        let log_scale = [-2.0, -1.4, -2.6];
        let rot = [0.8, 0.3, -0.4, 0.2];
        let got = project_gaussian::<f64>(pos, log_scale, rot, &vp);

        // numeric Jacobian of world point -> pixel, then J Σ Jᵀ
        let h = 1e-6;
        let pixel = |p: [f64; 3]| vp.to_pixel(vp.to_view(p));
        let mut jac = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut hi = pos;
            let mut lo = pos;
            hi[k] += h;
            lo[k] -= h;
            let (a, b) = (pixel(hi), pixel(lo));
            for r in 0..2 {
                jac[r][k] = (a[r] - b[r]) / (2.0 * h);
            }
        }
        let sigma = covariance_3d(log_scale, rot);
        let entry = |a: usize, b: usize| {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += jac[a][i] * sigma[i][j] * jac[b][j];
                }
            }
            acc
        };
        let expected = [entry(0, 0), entry(0, 1), entry(1, 1)];
        for k in 0..3 {
            assert!((got.cov[k] - expected[k]).abs() < 1e-5, "{k}: {} vs {}", got.cov[k], expected[k]);
        }
        let m = pixel(pos);
        assert!((got.mean[0] - m[0]).abs() < 1e-12 && (got.mean[1] - m[1]).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let p = project_gaussian::<f64>([0.0, 0.0, 3.0], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], &camera());
        assert!(p.culled);
    }
}

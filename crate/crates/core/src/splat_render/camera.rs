use serde::{Deserialize, Serialize};

use super::RenderError;

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

/// Spherical orbit camera around a look-at target. Y is up; azimuth 0 looks
/// at the target from +Z, positive elevation looks down from above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance: f64,
    pub fovy_deg: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub target: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

/// World-to-camera transform (x right, y down, z forward) plus pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewProjection {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn new(
        distance: f64,
        fovy_deg: f64,
        elevation_deg: f64,
        azimuth_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        Self {
            distance,
            fovy_deg,
            elevation_deg,
            azimuth_deg,
            target: [0.0; 3],
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn with_target(mut self, target: [f64; 3]) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let ok = self.distance > 0.0
            && self.distance.is_finite()
            && self.fovy_deg > 0.0
            && self.fovy_deg < 180.0
            && self.width > 0
            && self.height > 0
            && self.near > 0.0
            && self.far > self.near
            && self.elevation_deg.is_finite()
            && self.azimuth_deg.is_finite()
            && self.target.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(RenderError::Camera(format!("invalid camera {self:?}")))
        }
    }

    pub fn position(&self) -> [f64; 3] {
        let (el, az) = (self.elevation_deg.to_radians(), self.azimuth_deg.to_radians());
        let d = self.distance;
        [
            self.target[0] + d * el.cos() * az.sin(),
            self.target[1] + d * el.sin(),
            self.target[2] + d * el.cos() * az.cos(),
        ]
    }

    pub fn view_projection(&self) -> Result<ViewProjection, RenderError> {
        self.validate()?;
        let eye = self.position();
        let forward = normalize(sub(self.target, eye));
        let mut right = cross(forward, [0.0, 1.0, 0.0]);
        if norm(right) < 1e-9 {
            // looking straight up or down
            right = cross(forward, [0.0, 0.0, -1.0]);
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation =
            [0, 1, 2].map(|i| -(rotation[i][0] * eye[0] + rotation[i][1] * eye[1] + rotation[i][2] * eye[2]));
        let fy = 0.5 * self.height as f64 / (0.5 * self.fovy_deg.to_radians()).tan();
        Ok(ViewProjection {
            rotation,
            translation,
            fx: fy,
            fy,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
            near: self.near,
            far: self.far,
            width: self.width,
            height: self.height,
        })
    }
}

impl ViewProjection {
    pub fn to_view(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| {
            self.rotation[i][0] * p[0] + self.rotation[i][1] * p[1] + self.rotation[i][2] * p[2] + self.translation[i]
        })
    }

    /// Pixel coordinates of a view-space point; pixel centers sit at half-integers.
    pub fn to_pixel(&self, v: [f64; 3]) -> [f64; 2] {
        [self.fx * v[0] / v[2] + self.cx, self.fy * v[1] / v[2] + self.cy]
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    a.map(|x| x / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(m: &[[f64; 3]; 3]) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn view_is_rigid_and_centers_target() {
        for (el, az) in [(0.0, 0.0), (25.0, 130.0), (-30.0, -170.0), (90.0, 0.0)] {
            let cam = CameraPose::new(1.8, 55.0, el, az, 32, 24).with_target([0.1, 0.9, -0.2]);
            let vp = cam.view_projection().unwrap();
            let r = vp.rotation;
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
            assert!((det(&r) - 1.0).abs() < 1e-12);
            let t = vp.to_view(cam.target);
            assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12 && (t[2] - 1.8).abs() < 1e-12);
            let px = vp.to_pixel(t);
            assert!((px[0] - 16.0).abs() < 1e-9 && (px[1] - 12.0).abs() < 1e-9);
        }
    }

    #[test]
    fn front_camera_orientation() {
        // from +Z, world +X is image right and world +Y is image up
        let vp = CameraPose::new(2.0, 60.0, 0.0, 0.0, 16, 16).view_projection().unwrap();
        let px = vp.to_pixel(vp.to_view([0.1, 0.0, 0.0]));
        let py = vp.to_pixel(vp.to_view([0.0, 0.1, 0.0]));
        assert!(px[0] > 8.0);
        assert!(py[1] < 8.0);
    }

    #[test]
    fn invalid_cameras_rejected() {
        assert!(CameraPose::new(0.0, 50.0, 0.0, 0.0, 8, 8).validate().is_err());
        assert!(CameraPose::new(1.0, 180.0, 0.0, 0.0, 8, 8).validate().is_err());
        assert!(CameraPose::new(1.0, 50.0, 0.0, 0.0, 0, 8).validate().is_err());
    }
}

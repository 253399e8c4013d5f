//! Parametric humanoid body: blend shapes plus linear blend skinning.
//!
//! The rest mesh is deformed additively by shape, pose-corrective and
//! expression bases, then posed by skinning every vertex with a convex
//! combination of joint rigid transforms composed along the kinematic tree.
//!
//! A procedurally generated 24-joint humanoid is bundled
//! ([`BodyTemplate::bundled`]); any template with the same structure can be
//! loaded from the JSON asset format described in `docs/body_asset.md`.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error)]
pub enum BodyModelError {
    #[error("parameter shape mismatch for {basis}: expected {expected}, got {got}")]
    DimensionMismatch { basis: &'static str, expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("surface sampling: {0}")]
    Sampling(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rest-pose template with its deformation bases.
///
/// Bases are stored as `3V` rows (vertex-major, xyz interleaved) by `rank`
/// columns. A basis with no rows has rank zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Parent joint index per joint; the root is joint 0 with parent -1.
    pub parents: Vec<i64>,
    /// `J` rows by `V` columns.
    pub joint_regressor: Vec<Vec<f64>>,
    /// `V` rows by `J` columns.
    pub skin_weights: Vec<Vec<f64>>,
    pub shape_basis: Vec<Vec<f64>>,
    /// Rank must be `9 * (J - 1)`: one column per entry of each non-root
    /// joint's `R - I`.
    pub pose_basis: Vec<Vec<f64>>,
    pub expr_basis: Vec<Vec<f64>>,
}

/// Shape coefficients, per-joint axis-angle rotations and expression coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    /// One axis-angle vector (radians) per joint. Body, face and hand
    /// sub-blocks are contiguous ranges of this array; the bundled template
    /// only carries body joints.
    pub theta: Vec<Vec3>,
    pub psi: Vec<f64>,
}

impl BodyParams {
    /// Rest pose, mean shape, neutral expression.
    pub fn neutral(template: &BodyTemplate) -> Self {
        Self {
            beta: vec![0.0; template.shape_rank()],
            theta: vec![[0.0; 3]; template.joint_count()],
            psi: vec![0.0; template.expr_rank()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.corners(face);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]
    }

    fn corners(&self, face: usize) -> [Vec3; 3] {
        let [i, j, k] = self.faces[face];
        [self.vertices[i as usize], self.vertices[j as usize], self.vertices[k as usize]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }
}

impl BodyTemplate {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn shape_rank(&self) -> usize {
        basis_rank(&self.shape_basis)
    }

    pub fn pose_rank(&self) -> usize {
        basis_rank(&self.pose_basis)
    }

    pub fn expr_rank(&self) -> usize {
        basis_rank(&self.expr_basis)
    }

    pub fn rest_mesh(&self) -> Mesh {
        Mesh { vertices: self.vertices.clone(), faces: self.faces.clone() }
    }

    pub fn validate(&self) -> Result<(), BodyModelError> {
        let invalid = |msg: String| Err(BodyModelError::InvalidTemplate(msg));
        let nv = self.vertex_count();
        let nj = self.joint_count();
        if nv == 0 || nj == 0 {
            return invalid("template needs at least one vertex and one joint".into());
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite vertex".into());
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= nv)) {
            return invalid(format!("face {f:?} indexes past {nv} vertices"));
        }
        if self.parents[0] != -1 {
            return invalid("joint 0 must be the root (parent -1)".into());
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return invalid(format!("joint {j} has parent {p}; parents must precede children"));
            }
        }
        if self.joint_regressor.len() != nj || self.joint_regressor.iter().any(|r| r.len() != nv) {
            return invalid(format!("joint_regressor must be {nj}x{nv}"));
        }
        if self.skin_weights.len() != nv || self.skin_weights.iter().any(|r| r.len() != nj) {
            return invalid(format!("skin_weights must be {nv}x{nj}"));
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return invalid(format!("skin weights of vertex {v} must be non-negative and sum to 1 (sum {sum})"));
            }
        }
        for (name, basis) in
            [("shape_basis", &self.shape_basis), ("pose_basis", &self.pose_basis), ("expr_basis", &self.expr_basis)]
        {
            if basis.is_empty() {
                continue;
            }
            let rank = basis[0].len();
            if basis.len() != 3 * nv || basis.iter().any(|r| r.len() != rank) {
                return invalid(format!("{name} must have {} rows of equal length", 3 * nv));
            }
        }
        let pose_rank = self.pose_rank();
        if pose_rank != 0 && pose_rank != 9 * (nj - 1) {
            return invalid(format!("pose_basis rank {pose_rank} must be 0 or {}", 9 * (nj - 1)));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, BodyModelError> {
        let template: BodyTemplate = serde_json::from_str(text)?;
        template.validate()?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BodyModelError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BodyModelError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Joint locations regressed from the shaped (unposed) surface.
    pub fn joints(&self, params: &BodyParams) -> Result<Vec<Vec3>, BodyModelError> {
        self.check_params(params)?;
        let rest = self.blend(params, None);
        Ok(self.regress(&rest))
    }

    fn regress(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.joint_regressor
            .iter()
            .map(|row| {
                let mut j = [0.0; 3];
                for (w, v) in row.iter().zip(vertices) {
                    if *w != 0.0 {
                        for k in 0..3 {
                            j[k] += w * v[k];
                        }
                    }
                }
                j
            })
            .collect()
    }

    fn check_params(&self, params: &BodyParams) -> Result<(), BodyModelError> {
        let checks = [
            ("shape_basis", self.shape_rank(), params.beta.len()),
            ("expr_basis", self.expr_rank(), params.psi.len()),
            ("joint rotations", self.joint_count(), params.theta.len()),
        ];
        for (basis, expected, got) in checks {
            if expected != got {
                return Err(BodyModelError::DimensionMismatch { basis, expected, got });
            }
        }
        let all = params.beta.iter().chain(&params.psi).chain(params.theta.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(BodyModelError::InvalidParameter("non-finite body parameter".into()));
        }
        Ok(())
    }

    /// `T̄ + Bs·β + Be·ψ (+ Bp·pose_feature)`.
    fn blend(&self, params: &BodyParams, pose_feature: Option<&[f64]>) -> Vec<Vec3> {
        let mut out = self.vertices.clone();
        let mut accumulate = |basis: &[Vec<f64>], coeffs: &[f64]| {
            if basis.is_empty() || coeffs.iter().all(|c| *c == 0.0) {
                return;
            }
            for (v, p) in out.iter_mut().enumerate() {
                for k in 0..3 {
                    let row = &basis[3 * v + k];
                    p[k] += row.iter().zip(coeffs).map(|(b, c)| b * c).sum::<f64>();
                }
            }
        };
        accumulate(&self.shape_basis, &params.beta);
        accumulate(&self.expr_basis, &params.psi);
        if let Some(feature) = pose_feature {
            accumulate(&self.pose_basis, feature);
        }
        out
    }

    /// Generates the bundled low-poly humanoid (24 joints, 1152 vertices).
    pub fn bundled() -> Self {
        bundled::build()
    }
}

fn basis_rank(basis: &[Vec<f64>]) -> usize {
    basis.first().map_or(0, Vec::len)
}

/// Flattened `R(θ_j) - I` for every non-root joint, row-major.
pub fn pose_feature(theta: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * theta.len().saturating_sub(1));
    for r in theta.iter().skip(1) {
        let m = axis_angle_to_matrix(*r);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push(v - if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

/// Rest surface deformed by the shape, pose-corrective and expression bases.
pub fn shaped_vertices(template: &BodyTemplate, params: &BodyParams) -> Result<Vec<Vec3>, BodyModelError> {
    template.check_params(params)?;
    if template.pose_rank() == 0 {
        return Ok(template.blend(params, None));
    }
    let feature = pose_feature(&params.theta);
    Ok(template.blend(params, Some(&feature)))
}

/// World transform of every joint, composed root-to-leaf with rest offsets.
pub fn joint_world_transforms(
    template: &BodyTemplate,
    params: &BodyParams,
) -> Result<Vec<RigidTransform>, BodyModelError> {
    let joints = template.joints(params)?;
    let mut world: Vec<RigidTransform> = Vec::with_capacity(joints.len());
    for (j, r) in params.theta.iter().enumerate() {
        let rotation = axis_angle_to_matrix(*r);
        let transform = match template.parents[j] {
            p if p < 0 => RigidTransform { rotation, translation: joints[j] },
            p => {
                let p = p as usize;
                world[p].compose(&RigidTransform { rotation, translation: sub(joints[j], joints[p]) })
            }
        };
        world.push(transform);
    }
    Ok(world)
}

/// Relative skinning transforms: world transform with the rest joint location removed.
pub fn skinning_transforms(world: &[RigidTransform], rest_joints: &[Vec3]) -> Vec<RigidTransform> {
    world
        .iter()
        .zip(rest_joints)
        .map(|(g, j)| RigidTransform {
            rotation: g.rotation,
            translation: sub(g.translation, mat_vec(&g.rotation, *j)),
        })
        .collect()
}

/// `v' = Σ_j w_vj · A_j(v)`
pub fn linear_blend(vertices: &[Vec3], weights: &[Vec<f64>], transforms: &[RigidTransform]) -> Vec<Vec3> {
    vertices
        .iter()
        .zip(weights)
        .map(|(v, row)| {
            let mut acc = [0.0; 3];
            for (w, a) in row.iter().zip(transforms) {
                if *w != 0.0 {
                    let p = a.apply(*v);
                    for k in 0..3 {
                        acc[k] += w * p[k];
                    }
                }
            }
            acc
        })
        .collect()
}

pub fn pose_mesh(template: &BodyTemplate, params: &BodyParams) -> Result<Mesh, BodyModelError> {
    let shaped = shaped_vertices(template, params)?;
    let rest_joints = template.joints(params)?;
    let world = joint_world_transforms(template, params)?;
    let transforms = skinning_transforms(&world, &rest_joints);
    Ok(Mesh { vertices: linear_blend(&shaped, &template.skin_weights, &transforms), faces: template.faces.clone() })
}

/// Area-weighted uniform samples over the mesh surface with face normals.
pub fn sample_surface(mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<SurfaceSample>, BodyModelError> {
    if count == 0 {
        return Err(BodyModelError::Sampling("count must be at least 1".into()));
    }
    if mesh.faces.is_empty() {
        return Err(BodyModelError::Sampling("mesh has no triangles".into()));
    }
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.triangle_area(f)).collect();
    let faces =
        WeightedIndex::new(&areas).map_err(|e| BodyModelError::Sampling(format!("degenerate mesh surface: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let f = faces.sample(&mut rng);
            let [a, b, c] = mesh.corners(f);
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            let position = [0, 1, 2].map(|k| (1.0 - r1) * a[k] + r1 * (1.0 - r2) * b[k] + r1 * r2 * c[k]);
            let n = cross(sub(b, a), sub(c, a));
            let len = norm(n);
            SurfaceSample { position, normal: n.map(|x| x / len) }
        })
        .collect();
    Ok(samples)
}

pub fn axis_angle_to_matrix(r: Vec3) -> Mat3 {
    let angle = norm(r);
    if angle < 1e-12 {
        // first order; exact at zero
        return [[1.0, -r[2], r[1]], [r[2], 1.0, -r[0]], [-r[1], r[0], 1.0]];
    }
    let [x, y, z] = r.map(|v| v / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

mod bundled {
    //! Tube-per-bone humanoid in an A-pose. Y is up, the body faces +Z and
    //! its left side is +X; units are meters.

    use super::*;

    const RINGS: usize = 6;
    const SEGMENTS: usize = 8;
    const SHAPE_RANK: usize = 10;
    const EXPR_RANK: usize = 10;
    const HEAD: usize = 15;

    const PARENTS: [i64; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

    const JOINTS: [Vec3; 24] = [
        [0.0, 0.95, 0.0],
        [0.09, 0.88, 0.0],
        [-0.09, 0.88, 0.0],
        [0.0, 1.05, 0.0],
        [0.10, 0.50, 0.01],
        [-0.10, 0.50, 0.01],
        [0.0, 1.18, 0.0],
        [0.11, 0.09, -0.01],
        [-0.11, 0.09, -0.01],
        [0.0, 1.30, 0.0],
        [0.12, 0.02, 0.12],
        [-0.12, 0.02, 0.12],
        [0.0, 1.50, 0.0],
        [0.07, 1.42, 0.0],
        [-0.07, 1.42, 0.0],
        [0.0, 1.62, 0.01],
        [0.18, 1.43, 0.0],
        [-0.18, 1.43, 0.0],
        [0.36, 1.22, 0.0],
        [-0.36, 1.22, 0.0],
        [0.52, 1.02, 0.01],
        [-0.52, 1.02, 0.01],
        [0.58, 0.94, 0.01],
        [-0.58, 0.94, 0.01],
    ];

    /// Start/end radius of the tube ending at each joint (index 0 unused).
    const RADII: [(f64, f64); 24] = [
        (0.0, 0.0),
        (0.10, 0.09),
        (0.10, 0.09),
        (0.13, 0.13),
        (0.08, 0.06),
        (0.08, 0.06),
        (0.13, 0.14),
        (0.055, 0.04),
        (0.055, 0.04),
        (0.14, 0.14),
        (0.045, 0.035),
        (0.045, 0.035),
        (0.13, 0.05),
        (0.06, 0.06),
        (0.06, 0.06),
        (0.05, 0.09),
        (0.06, 0.05),
        (0.06, 0.05),
        (0.05, 0.04),
        (0.05, 0.04),
        (0.04, 0.032),
        (0.04, 0.032),
        (0.035, 0.025),
        (0.035, 0.025),
    ];

    struct VertexInfo {
        radial: Vec3,
        owner: usize,
        child: Option<usize>,
        /// position along the tube axis in [0,1]
        t: f64,
        phi: f64,
    }

    fn smoothstep(x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    }

    fn frame(d: Vec3) -> (Vec3, Vec3) {
        let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = cross(helper, d);
        let u = u.map(|x| x / norm(u));
        (u, cross(d, u))
    }

    pub(super) fn build() -> BodyTemplate {
        let nj = JOINTS.len();
        let mut vertices = Vec::new();
        let mut info = Vec::new();
        let mut faces = Vec::new();
        let mut end_rings: Vec<Vec<usize>> = vec![Vec::new(); nj];
        let mut skin_weights: Vec<Vec<f64>> = Vec::new();

        // (owner joint, child joint, start, end, r0, r1)
        let mut tubes: Vec<(usize, Option<usize>, Vec3, Vec3, f64, f64)> = (1..nj)
            .map(|j| {
                let p = PARENTS[j] as usize;
                (p, Some(j), JOINTS[p], JOINTS[j], RADII[j].0, RADII[j].1)
            })
            .collect();
        let head = JOINTS[HEAD];
        tubes.push((HEAD, None, head, [head[0], head[1] + 0.18, head[2]], 0.09, 0.02));

        for (owner, child, a, b, r0, r1) in tubes {
            let axis = sub(b, a);
            let d = axis.map(|x| x / norm(axis));
            let (u, w) = frame(d);
            let base = vertices.len();
            for ring in 0..RINGS {
                let t = ring as f64 / (RINGS - 1) as f64;
                let r = r0 + (r1 - r0) * t;
                let center = add(a, axis.map(|x| x * t));
                for s in 0..SEGMENTS {
                    let phi = std::f64::consts::TAU * s as f64 / SEGMENTS as f64;
                    let radial = add(u.map(|x| x * phi.cos()), w.map(|x| x * phi.sin()));
                    vertices.push(add(center, radial.map(|x| x * r)));
                    info.push(VertexInfo { radial, owner, child, t, phi });
                    if ring == 0 && owner == 0 && child == Some(3) {
                        end_rings[0].push(vertices.len() - 1);
                    }
                    if ring == RINGS - 1 {
                        if let Some(c) = child {
                            end_rings[c].push(vertices.len() - 1);
                        }
                    }

                    let mut weights = vec![0.0; nj];
                    if child.is_none() {
                        weights[owner] = 1.0;
                    } else {
                        let to_child = 0.5 * smoothstep((t - 0.5) / 0.5);
                        let grand = PARENTS[owner];
                        let to_grand = if grand >= 0 { 0.5 * (1.0 - smoothstep(t / 0.5)) } else { 0.0 };
                        if let (Some(c), true) = (child, to_child > 0.0) {
                            weights[c] = to_child;
                        }
                        if grand >= 0 && to_grand > 0.0 {
                            weights[grand as usize] = to_grand;
                        }
                        weights[owner] = 1.0 - to_child - to_grand;
                    }
                    skin_weights.push(weights);
                }
            }
            for ring in 0..RINGS - 1 {
                for s in 0..SEGMENTS {
                    let idx = |r: usize, s: usize| (base + r * SEGMENTS + s % SEGMENTS) as u32;
                    let (p00, p01, p10, p11) = (idx(ring, s), idx(ring, s + 1), idx(ring + 1, s), idx(ring + 1, s + 1));
                    faces.push([p00, p01, p10]);
                    faces.push([p01, p11, p10]);
                }
            }
        }

        let nv = vertices.len();
        let joint_regressor = end_rings
            .iter()
            .map(|ring| {
                let mut row = vec![0.0; nv];
                for &v in ring {
                    row[v] = 1.0 / ring.len() as f64;
                }
                row
            })
            .collect();

        let mut shape_basis = vec![vec![0.0; SHAPE_RANK]; 3 * nv];
        let mut expr_basis = vec![vec![0.0; EXPR_RANK]; 3 * nv];
        let mut pose_basis = vec![vec![0.0; 9 * (nj - 1)]; 3 * nv];
        for (v, (p, vi)) in vertices.iter().zip(&info).enumerate() {
            let [x, y, _] = *p;
            let n = vi.radial;
            let set = |basis: &mut Vec<Vec<f64>>, col: usize, disp: Vec3| {
                for k in 0..3 {
                    basis[3 * v + k][col] = disp[k];
                }
            };
            let band = |lo: f64, hi: f64| if y > lo && y < hi { 1.0 } else { 0.0 };
            set(&mut shape_basis, 0, [0.0, 0.06 * y, 0.0]);
            set(&mut shape_basis, 1, n.map(|c| 0.015 * c));
            set(&mut shape_basis, 2, [0.08 * x, 0.0, 0.0]);
            set(&mut shape_basis, 3, [0.0, 0.0, 0.01 * n[2]]);
            set(&mut shape_basis, 4, [0.0, if y < 0.9 { 0.05 * (y - 0.9) } else { 0.0 }, 0.0]);
            set(&mut shape_basis, 5, n.map(|c| 0.02 * c * band(1.0, 1.45)));
            let arm = if x.abs() > 0.2 && y > 0.9 { 1.0 } else { 0.0 };
            set(&mut shape_basis, 6, n.map(|c| 0.01 * c * arm));
            set(&mut shape_basis, 7, [0.03 * x.signum() * smoothstep((y - 1.3) / 0.1), 0.0, 0.0]);
            set(&mut shape_basis, 8, [0.1 * x * band(0.8, 1.05), 0.0, 0.0]);
            set(&mut shape_basis, 9, [0.0, 0.0, 0.03 * n[2].max(0.0) * band(1.0, 1.3)]);

            let in_head = vi.owner == HEAD || vi.child == Some(HEAD) && vi.t > 0.5;
            if in_head {
                for e in 0..EXPR_RANK {
                    let wave = ((e / 2 + 1) as f64 * vi.phi + if e % 2 == 0 { 0.0 } else { 1.0 }).cos();
                    set(&mut expr_basis, e, n.map(|c| 0.003 * wave * c));
                }
            }

            // Corrective bulge driven by the diagonal of R - I at the joints bounding this tube.
            for j in [Some(vi.owner), vi.child].into_iter().flatten().filter(|&j| j > 0) {
                let w = skin_weights_of(&info, v, j);
                for diag in [0, 4, 8] {
                    set(&mut pose_basis, 9 * (j - 1) + diag, n.map(|c| 0.01 * w * c));
                }
            }
        }

        let template = BodyTemplate {
            vertices,
            faces,
            parents: PARENTS.to_vec(),
            joint_regressor,
            skin_weights,
            shape_basis,
            pose_basis,
            expr_basis,
        };
        debug_assert!(template.validate().is_ok());
        template
    }

    fn skin_weights_of(info: &[VertexInfo], v: usize, joint: usize) -> f64 {
        let vi = &info[v];
        if vi.owner == joint {
            1.0 - 0.5 * smoothstep((vi.t - 0.5) / 0.5)
        } else {
            0.5 * smoothstep((vi.t - 0.5) / 0.5)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn two_joint_template(vertices: Vec<Vec3>, skin_weights: Vec<Vec<f64>>) -> BodyTemplate {
        let nv = vertices.len();
        // Joint 0 at the first vertex, joint 1 at the second.
        let mut regressor = vec![vec![0.0; nv]; 2];
        regressor[0][0] = 1.0;
        regressor[1][1] = 1.0;
        BodyTemplate {
            vertices,
            faces: vec![[0, 1, 2]],
            parents: vec![-1, 0],
            joint_regressor: regressor,
            skin_weights,
            shape_basis: vec![],
            pose_basis: vec![],
            expr_basis: vec![],
        }
    }

    fn random_params(template: &BodyTemplate, seed: u64, magnitude: f64) -> BodyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (rng.gen::<f64>() * 2.0 - 1.0) * magnitude;
        BodyParams {
            beta: (0..template.shape_rank()).map(|_| draw()).collect(),
            theta: (0..template.joint_count()).map(|_| [draw(), draw(), draw()]).collect(),
            psi: (0..template.expr_rank()).map(|_| draw()).collect(),
        }
    }

    #[test]
    fn bundled_template_is_valid() {
        let t = BodyTemplate::bundled();
        t.validate().unwrap();
        assert_eq!(t.joint_count(), 24);
        assert_eq!(t.vertex_count(), 1152);
        assert_eq!(t.pose_rank(), 9 * 23);
        // regressed rest joints reproduce the authored skeleton
        let joints = t.joints(&BodyParams::neutral(&t)).unwrap();
        for (a, b) in joints.iter().zip(bundled_joint_reference()) {
            assert!(norm(sub(*a, b)) < 1e-12);
        }
    }

    fn bundled_joint_reference() -> Vec<Vec3> {
        let t = BodyTemplate::bundled();
        // end-ring centroids, recomputed directly from the vertex list
        let mut out = vec![[0.0; 3]; 24];
        for (j, row) in t.joint_regressor.iter().enumerate() {
            let idx: Vec<usize> = row.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(i, _)| i).collect();
            for &i in &idx {
                for k in 0..3 {
                    out[j][k] += t.vertices[i][k] / idx.len() as f64;
                }
            }
        }
        out
    }

    #[test]
    fn neutral_params_return_rest_vertices_exactly() {
        let t = BodyTemplate::bundled();
        let v = shaped_vertices(&t, &BodyParams::neutral(&t)).unwrap();
        assert_eq!(v, t.vertices);
    }

    #[test]
    fn unit_beta_adds_first_shape_column() {
        let t = BodyTemplate::bundled();
        let mut params = BodyParams::neutral(&t);
        params.beta[0] = 1.0;
        let v = shaped_vertices(&t, &params).unwrap();
        for (i, p) in v.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(p[k], t.vertices[i][k] + t.shape_basis[3 * i + k][0]);
            }
        }
    }

    #[test]
    fn shaped_vertices_match_direct_summation() {
        let t = BodyTemplate::bundled();
        let params = random_params(&t, 11, 0.3);
        let got = shaped_vertices(&t, &params).unwrap();

        // independent re-summation: explicit rotation matrices, explicit loops
        let mut feature = Vec::new();
        for r in params.theta.iter().skip(1) {
            let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let k = [r[0] / angle, r[1] / angle, r[2] / angle];
            let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
            for i in 0..3 {
                for j in 0..3 {
                    let kx2: f64 = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
                    // Rodrigues: R - I = sinθ K + (1 - cosθ) K²
                    feature.push(angle.sin() * kx[i][j] + (1.0 - angle.cos()) * kx2);
                }
            }
        }
        for v in 0..t.vertex_count() {
            for c in 0..3 {
                let row = 3 * v + c;
                let mut x = t.vertices[v][c];
                for (i, b) in params.beta.iter().enumerate() {
                    x += t.shape_basis[row][i] * b;
                }
                for (i, f) in feature.iter().enumerate() {
                    x += t.pose_basis[row][i] * f;
                }
                for (i, e) in params.psi.iter().enumerate() {
                    x += t.expr_basis[row][i] * e;
                }
                assert!((got[v][c] - x).abs() < 1e-9, "vertex {v} axis {c}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_basis() {
        let t = BodyTemplate::bundled();
        let mut params = BodyParams::neutral(&t);
        params.psi.push(0.0);
        match shaped_vertices(&t, &params) {
            Err(BodyModelError::DimensionMismatch { basis, expected, got }) => {
                assert_eq!(basis, "expr_basis");
                assert_eq!((expected, got), (10, 11));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_pose_is_identity_map() {
        let t = BodyTemplate::bundled();
        let mut params = random_params(&t, 5, 0.5);
        params.theta = vec![[0.0; 3]; 24];
        let shaped = shaped_vertices(&t, &params).unwrap();
        let posed = pose_mesh(&t, &params).unwrap();
        let dev = shaped.iter().zip(&posed.vertices).map(|(a, b)| norm(sub(*a, *b))).fold(0.0, f64::max);
        assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn rigid_vertex_follows_rotated_joint() {
        // joint 1 sits at (0,1,0); vertex 2 is bound to it at local offset (1,0,0)
        let t = two_joint_template(
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        );
        let params = BodyParams { beta: vec![], theta: vec![[0.0; 3], [0.0, 0.0, FRAC_PI_2]], psi: vec![] };
        let posed = pose_mesh(&t, &params).unwrap();
        let local = sub(posed.vertices[2], [0.0, 1.0, 0.0]);
        assert!(norm(sub(local, [0.0, 1.0, 0.0])) < 1e-12, "{local:?}");
    }

    #[test]
    fn half_weights_give_midpoint() {
        let rigid0 = two_joint_template(
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        );
        let mut rigid1 = rigid0.clone();
        rigid1.skin_weights[2] = vec![0.0, 1.0];
        let mut blended = rigid0.clone();
        blended.skin_weights[2] = vec![0.5, 0.5];
        let params = BodyParams { beta: vec![], theta: vec![[0.0, 0.0, 0.3], [0.2, -0.4, 1.1]], psi: vec![] };
        let a = pose_mesh(&rigid0, &params).unwrap().vertices[2];
        let b = pose_mesh(&rigid1, &params).unwrap().vertices[2];
        let m = pose_mesh(&blended, &params).unwrap().vertices[2];
        for k in 0..3 {
            assert!((m[k] - 0.5 * (a[k] + b[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_rotation_rejected() {
        let t = BodyTemplate::bundled();
        let mut params = BodyParams::neutral(&t);
        params.theta[3][1] = f64::NAN;
        assert!(matches!(pose_mesh(&t, &params), Err(BodyModelError::InvalidParameter(_))));
    }

    #[test]
    fn lbs_equivariant_under_global_rigid_transform() {
        let t = BodyTemplate::bundled();
        let params = random_params(&t, 3, 0.4);
        let shaped = shaped_vertices(&t, &params).unwrap();
        let rest = t.joints(&params).unwrap();
        let world = joint_world_transforms(&t, &params).unwrap();
        let global = RigidTransform { rotation: axis_angle_to_matrix([0.3, -1.2, 0.7]), translation: [0.5, -2.0, 1.5] };
        let moved: Vec<_> = world.iter().map(|g| global.compose(g)).collect();
        let base = linear_blend(&shaped, &t.skin_weights, &skinning_transforms(&world, &rest));
        let after = linear_blend(&shaped, &t.skin_weights, &skinning_transforms(&moved, &rest));
        for (a, b) in base.iter().zip(&after) {
            assert!(norm(sub(global.apply(*a), *b)) < 1e-9);
        }
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let t = two_joint_template(
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, 0.7]],
        );
        let text = serde_json::to_string(&t).unwrap();
        let back = BodyTemplate::from_json_str(&text).unwrap();
        assert_eq!(back.vertices, t.vertices);

        let mut bad = t.clone();
        bad.skin_weights[2] = vec![0.3, 0.6];
        assert!(matches!(bad.validate(), Err(BodyModelError::InvalidTemplate(_))));
        let mut bad = t.clone();
        bad.faces[0] = [0, 1, 3];
        assert!(bad.validate().is_err());
    }

    fn right_triangle() -> Mesh {
        Mesh { vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], faces: vec![[0, 1, 2]] }
    }

    #[test]
    fn samples_stay_inside_triangle_and_repeat() {
        let mesh = right_triangle();
        let a = sample_surface(&mesh, 3, 7).unwrap();
        assert_eq!(a.len(), 3);
        for s in &a {
            let [x, y, z] = s.position;
            assert!(x >= 0.0 && y >= 0.0 && x + y <= 1.0 + 1e-12 && z == 0.0);
            assert_eq!(s.normal, [0.0, 0.0, 1.0]);
        }
        assert_eq!(a, sample_surface(&mesh, 3, 7).unwrap());
        assert_ne!(a, sample_surface(&mesh, 3, 8).unwrap());
    }

    #[test]
    fn sampling_follows_area_ratio() {
        // triangle A has area 4.5, triangle B 0.5: ratio 9:1
        let mesh = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 3.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let samples = sample_surface(&mesh, 10_000, 1).unwrap();
        let in_a = samples.iter().filter(|s| s.position[0] < 5.0).count() as f64;
        // binomial oracle: p = 0.9, sd = sqrt(n p (1-p)) = 30, ±3% of ratio 9 is well outside 3 sd
        let ratio = in_a / (10_000.0 - in_a);
        assert!((ratio / 9.0 - 1.0).abs() < 0.03, "ratio {ratio}");
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let mesh = Mesh { vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], faces: vec![[0, 1, 2]] };
        assert!(matches!(sample_surface(&mesh, 4, 0), Err(BodyModelError::Sampling(_))));
        assert!(matches!(sample_surface(&right_triangle(), 0, 0), Err(BodyModelError::Sampling(_))));
    }

    #[test]
    fn hundred_thousand_samples_on_bundled_body() {
        let mesh = BodyTemplate::bundled().rest_mesh();
        let samples = sample_surface(&mesh, 100_000, 0).unwrap();
        assert_eq!(samples.len(), 100_000);
        assert!(samples.iter().all(|s| s.position.iter().all(|v| v.is_finite())));
    }
}

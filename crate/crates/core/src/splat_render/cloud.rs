use crate::real::Real;

use super::RenderError;

/// Zeroth-order spherical harmonic constant; color = 0.5 + SH_C0 * dc.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Optimizable Gaussian scene. Parameters are stored pre-activation:
/// log scales, unnormalized `(w, x, y, z)` quaternions, DC color
/// coefficients and opacity logits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud<T> {
    pub positions: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub color_dc: Vec<[T; 3]>,
    pub opacity_logits: Vec<T>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(n: usize) -> Self {
        let z = T::zero();
        Self {
            positions: vec![[z; 3]; n],
            log_scales: vec![[z; 3]; n],
            rotations: vec![[z; 4]; n],
            color_dc: vec![[z; 3]; n],
            opacity_logits: vec![z; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let n = self.len();
        let lens = [self.log_scales.len(), self.rotations.len(), self.color_dc.len(), self.opacity_logits.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(RenderError::Contract(format!("cloud arrays disagree in length: {n} vs {lens:?}")));
        }
        Ok(())
    }

    /// Appends a splat given activated quantities.
    pub fn push_activated(&mut self, position: [T; 3], scale: [T; 3], rotation: [T; 4], color: [T; 3], opacity: T) {
        self.positions.push(position);
        self.log_scales.push(scale.map(|s| s.ln()));
        self.rotations.push(rotation);
        self.color_dc.push(color.map(color_to_dc));
        self.opacity_logits.push(logit(opacity));
    }

    pub fn push_from(&mut self, other: &GaussianCloud<T>, i: usize) {
        self.positions.push(other.positions[i]);
        self.log_scales.push(other.log_scales[i]);
        self.rotations.push(other.rotations[i]);
        self.color_dc.push(other.color_dc[i]);
        self.opacity_logits.push(other.opacity_logits[i]);
    }

    /// Keeps splats whose mask entry is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let mut out = GaussianCloud::new();
        for (i, k) in keep.iter().enumerate() {
            if *k {
                out.push_from(self, i);
            }
        }
        *self = out;
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [T; 3] {
        self.log_scales[i].map(|s| s.exp())
    }

    pub fn color(&self, i: usize) -> [T; 3] {
        self.color_dc[i].map(dc_to_color)
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let c3 = |v: &[T; 3]| v.map(|x| U::of(x.as_f64()));
        GaussianCloud {
            positions: self.positions.iter().map(c3).collect(),
            log_scales: self.log_scales.iter().map(c3).collect(),
            rotations: self.rotations.iter().map(|q| q.map(|x| U::of(x.as_f64()))).collect(),
            color_dc: self.color_dc.iter().map(c3).collect(),
            opacity_logits: self.opacity_logits.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Visits every stored scalar with its parameter group.
    pub fn groups_mut(&mut self) -> [(ParamGroup, &mut [T]); 5] {
        [
            (ParamGroup::Position, self.positions.as_flattened_mut()),
            (ParamGroup::Scale, self.log_scales.as_flattened_mut()),
            (ParamGroup::Rotation, self.rotations.as_flattened_mut()),
            (ParamGroup::Color, self.color_dc.as_flattened_mut()),
            (ParamGroup::Opacity, self.opacity_logits.as_mut_slice()),
        ]
    }

    pub fn groups(&self) -> [(ParamGroup, &[T]); 5] {
        [
            (ParamGroup::Position, self.positions.as_flattened()),
            (ParamGroup::Scale, self.log_scales.as_flattened()),
            (ParamGroup::Rotation, self.rotations.as_flattened()),
            (ParamGroup::Color, self.color_dc.as_flattened()),
            (ParamGroup::Opacity, self.opacity_logits.as_slice()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// The five optimizable attribute groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Color,
    Opacity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Position, ParamGroup::Scale, ParamGroup::Rotation, ParamGroup::Color, ParamGroup::Opacity];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Color => "color",
            ParamGroup::Opacity => "opacity",
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

pub fn dc_to_color<T: Real>(dc: T) -> T {
    (T::of(0.5) + T::of(SH_C0) * dc).max(T::zero()).min(T::one())
}

pub fn color_to_dc<T: Real>(c: T) -> T {
    (c - T::of(0.5)) / T::of(SH_C0)
}

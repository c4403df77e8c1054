//! Triangle meshes: I/O, normalization, canonical sequencing, face attributes,
//! adjacency, augmentation, surface sampling and synthetic primitives.

mod attributes;
mod augment;
mod canonical;
mod obj;
mod sampling;
mod synth;

pub use attributes::{build_adjacency, encoder_features, face_attributes, AdjacencyGraph, FaceAttributeSet, FaceAttributes, FACE_FEATURES};
pub use augment::{augment, AugmentOptions, RotationMode};
pub use canonical::{bin_midpoint, canonicalize, dequantize, normalize, quantize_coord, AssemblyMode, CanonicalMesh, FaceBins};
pub use obj::{parse_obj, write_obj};
pub use sampling::{hausdorff_distance, sample_surface_points, PointCloud, DEFAULT_HAUSDORFF_SAMPLES};
pub use synth::{generate_synthetic, random_shape, ShapeKind, SyntheticShape};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Indexed triangle mesh in model units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= n) {
                return Err(Error::validation(format!("face {i} references vertex {bad} but mesh has {n} vertices")));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::validation("non-finite vertex coordinate"));
        }
        Ok(())
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| triangle_area(&self.triangle(f))).sum()
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

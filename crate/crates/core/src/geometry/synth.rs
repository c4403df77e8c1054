//! Parametric primitives with known face counts, used as desk-scale training data.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::Mesh;
use crate::error::{Error, Result};
use crate::rng::{SeedStream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Box,
    Pyramid,
    Prism,
    Grid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Box, ShapeKind::Pyramid, ShapeKind::Prism, ShapeKind::Grid];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Box => "box",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Prism => "prism",
            ShapeKind::Grid => "grid",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "box" => Ok(ShapeKind::Box),
            "pyramid" => Ok(ShapeKind::Pyramid),
            "prism" => Ok(ShapeKind::Prism),
            "grid" => Ok(ShapeKind::Grid),
            other => Err(Error::validation(format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticShape {
    /// Axis-aligned box centered at the origin: 12 faces.
    Box { size: [f64; 3] },
    /// Square base plus apex: 6 faces.
    Pyramid { base: f64, height: f64 },
    /// Closed n-gon prism: `4n - 4` faces.
    Prism { sides: usize, radius: f64, height: f64 },
    /// `cells x cells` height-field sheet over `[-1, 1]^2`: `2 cells^2` faces.
    Grid { cells: usize, amplitude: f64 },
}

impl SyntheticShape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            SyntheticShape::Box { .. } => ShapeKind::Box,
            SyntheticShape::Pyramid { .. } => ShapeKind::Pyramid,
            SyntheticShape::Prism { .. } => ShapeKind::Prism,
            SyntheticShape::Grid { .. } => ShapeKind::Grid,
        }
    }

    pub fn expected_faces(&self) -> usize {
        match *self {
            SyntheticShape::Box { .. } => 12,
            SyntheticShape::Pyramid { .. } => 6,
            SyntheticShape::Prism { sides, .. } => 4 * sides - 4,
            SyntheticShape::Grid { cells, .. } => 2 * cells * cells,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |x: f64, what: &str| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(format!("{what} must be positive and finite, got {x}")))
            }
        };
        match *self {
            SyntheticShape::Box { size } => size.iter().try_for_each(|&s| positive(s, "box size")),
            SyntheticShape::Pyramid { base, height } => {
                positive(base, "pyramid base")?;
                positive(height, "pyramid height")
            }
            SyntheticShape::Prism { sides, radius, height } => {
                if !(3..=64).contains(&sides) {
                    return Err(Error::validation(format!("prism sides must be in 3..=64, got {sides}")));
                }
                positive(radius, "prism radius")?;
                positive(height, "prism height")
            }
            SyntheticShape::Grid { cells, amplitude } => {
                if !(1..=32).contains(&cells) {
                    return Err(Error::validation(format!("grid cells must be in 1..=32, got {cells}")));
                }
                if !amplitude.is_finite() || amplitude < 0.0 {
                    return Err(Error::validation(format!("grid amplitude must be non-negative, got {amplitude}")));
                }
                Ok(())
            }
        }
    }
}

/// Builds the primitive. The seed drives the grid's height-field phases.
pub fn generate_synthetic(shape: &SyntheticShape, seed: u64) -> Result<Mesh> {
    shape.validate()?;
    let mesh = match *shape {
        SyntheticShape::Box { size } => {
            let vertices = (0..8)
                .map(|i| {
                    let s = |bit: usize, a: usize| if i >> bit & 1 == 1 { size[a] / 2.0 } else { -size[a] / 2.0 };
                    [s(0, 0), s(1, 1), s(2, 2)]
                })
                .collect();
            let faces = vec![
                [0, 2, 3],
                [0, 3, 1],
                [4, 5, 7],
                [4, 7, 6],
                [0, 1, 5],
                [0, 5, 4],
                [2, 6, 7],
                [2, 7, 3],
                [0, 4, 6],
                [0, 6, 2],
                [1, 3, 7],
                [1, 7, 5],
            ];
            Mesh { vertices, faces }
        }
        SyntheticShape::Pyramid { base, height } => {
            let h = base / 2.0;
            let vertices = vec![[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0], [0.0, 0.0, height]];
            let faces = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4], [0, 2, 1], [0, 3, 2]];
            Mesh { vertices, faces }
        }
        SyntheticShape::Prism { sides: n, radius, height } => {
            let mut vertices = Vec::with_capacity(2 * n);
            for z in [0.0, height] {
                for i in 0..n {
                    let a = 2.0 * PI * i as f64 / n as f64;
                    vertices.push([radius * a.cos(), radius * a.sin(), z]);
                }
            }
            let mut faces = Vec::with_capacity(4 * n - 4);
            for i in 0..n {
                let j = (i + 1) % n;
                faces.push([i, j, n + j]);
                faces.push([i, n + j, n + i]);
            }
            for i in 1..n - 1 {
                faces.push([0, i + 1, i]);
                faces.push([n, n + i, n + i + 1]);
            }
            Mesh { vertices, faces }
        }
        SyntheticShape::Grid { cells: g, amplitude } => {
            let mut rng = SeedStream::new(seed).rng("grid");
            let (fx, fy) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
            let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            let mut vertices = Vec::with_capacity((g + 1) * (g + 1));
            for y in 0..=g {
                for x in 0..=g {
                    let (u, v) = (-1.0 + 2.0 * x as f64 / g as f64, -1.0 + 2.0 * y as f64 / g as f64);
                    vertices.push([u, v, amplitude * (fx * u + px).sin() * (fy * v + py).cos()]);
                }
            }
            let mut faces = Vec::with_capacity(2 * g * g);
            for y in 0..g {
                for x in 0..g {
                    let a = y * (g + 1) + x;
                    faces.push([a, a + 1, a + g + 2]);
                    faces.push([a, a + g + 2, a + g + 1]);
                }
            }
            Mesh { vertices, faces }
        }
    };
    debug_assert_eq!(mesh.faces.len(), shape.expected_faces());
    Ok(mesh)
}

/// Draws parameters for a primitive of the given kind.
///
/// Ranges keep every vertex at least a few quantization bins apart at resolution 128.
pub fn random_shape(kind: ShapeKind, rng: &mut StreamRng) -> SyntheticShape {
    match kind {
        ShapeKind::Box => SyntheticShape::Box {
            size: [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)],
        },
        ShapeKind::Pyramid => SyntheticShape::Pyramid { base: rng.random_range(0.4..1.0), height: rng.random_range(0.3..1.0) },
        ShapeKind::Prism => SyntheticShape::Prism {
            sides: rng.random_range(3..=12),
            radius: rng.random_range(0.3..0.6),
            height: rng.random_range(0.3..1.0),
        },
        ShapeKind::Grid => SyntheticShape::Grid { cells: rng.random_range(2..=5), amplitude: rng.random_range(0.05..0.5) },
    }
}

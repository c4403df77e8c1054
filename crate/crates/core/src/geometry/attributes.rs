//! Per-face geometric attributes and the face adjacency graph.

use std::collections::{BTreeSet, HashMap};

use log::warn;

use super::canonical::face_corners;
use super::{cross, dot, norm, sub, CanonicalMesh, Vec3};

/// Encoder input width per face: 9 coordinates, 3 normal, 3 angles, 1 area.
pub const FACE_FEATURES: usize = 16;

const MIN_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceAttributes {
    pub face: usize,
    pub coords: [f64; 9],
    pub normal: Vec3,
    pub angles: [f64; 3],
    pub area: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaceAttributeSet {
    pub attrs: Vec<FaceAttributes>,
    /// Faces with numerically zero area, left out of `attrs`.
    pub excluded: Vec<usize>,
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b))
}

fn triangle_attributes(face: usize, t: &[Vec3; 3]) -> Option<FaceAttributes> {
    let e1 = sub(t[1], t[0]);
    let e2 = sub(t[2], t[0]);
    let n = cross(e1, e2);
    let len = norm(n);
    let area = 0.5 * len;
    if area < MIN_AREA {
        return None;
    }
    let angles = [
        angle_between(e1, e2),
        angle_between(sub(t[0], t[1]), sub(t[2], t[1])),
        angle_between(sub(t[0], t[2]), sub(t[1], t[2])),
    ];
    let mut coords = [0.0; 9];
    for (j, v) in t.iter().enumerate() {
        coords[3 * j..3 * j + 3].copy_from_slice(v);
    }
    Some(FaceAttributes { face, coords, normal: [n[0] / len, n[1] / len, n[2] / len], angles, area })
}

/// Normals, interior angles and areas of every face, on dequantized coordinates.
pub fn face_attributes(cm: &CanonicalMesh) -> FaceAttributeSet {
    let mut set = FaceAttributeSet::default();
    for (i, t) in face_corners(cm).iter().enumerate() {
        match triangle_attributes(i, t) {
            Some(a) => set.attrs.push(a),
            None => {
                warn!("face {i} has zero area; excluded from attributes");
                set.excluded.push(i);
            }
        }
    }
    set
}

/// Row-major `n x 16` encoder input. Zero-area faces keep their coordinates
/// and get zeros for normal, angles and area.
pub fn encoder_features(cm: &CanonicalMesh) -> Vec<f64> {
    let corners = face_corners(cm);
    let mut out = Vec::with_capacity(corners.len() * FACE_FEATURES);
    for (i, t) in corners.iter().enumerate() {
        match triangle_attributes(i, t) {
            Some(a) => {
                out.extend_from_slice(&a.coords);
                out.extend_from_slice(&a.normal);
                out.extend_from_slice(&a.angles);
                out.push(a.area);
            }
            None => {
                for v in t {
                    out.extend_from_slice(v);
                }
                out.extend_from_slice(&[0.0; 7]);
            }
        }
    }
    out
}

/// Undirected graph over faces; two faces are adjacent when they share exactly two vertices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdjacencyGraph {
    pub n: usize,
    /// Sorted `(a, b)` pairs with `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub degree: Vec<usize>,
}

impl AdjacencyGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> =
            edges.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
        let mut degree = vec![0; n];
        for &(a, b) in &set {
            degree[a] += 1;
            degree[b] += 1;
        }
        Self { n, edges: set.into_iter().collect(), degree }
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == v {
                Some(b)
            } else if b == v {
                Some(a)
            } else {
                None
            }
        })
    }
}

fn shared_vertices(a: &[usize; 3], b: &[usize; 3]) -> usize {
    a.iter().filter(|v| b.contains(v)).count()
}

/// Hash-based construction through an edge -> faces map.
pub fn build_adjacency(cm: &CanonicalMesh) -> AdjacencyGraph {
    let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, f) in cm.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if a != b {
                by_edge.entry((a.min(b), a.max(b))).or_default().push(i);
            }
        }
    }
    let mut pairs = Vec::new();
    for faces in by_edge.values() {
        for (x, &i) in faces.iter().enumerate() {
            for &j in &faces[x + 1..] {
                if i != j && shared_vertices(&cm.faces[i], &cm.faces[j]) == 2 {
                    pairs.push((i, j));
                }
            }
        }
    }
    AdjacencyGraph::from_edges(cm.faces.len(), pairs)
}

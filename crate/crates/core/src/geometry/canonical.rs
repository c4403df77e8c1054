//! Normalization, quantization and the deterministic face/vertex ordering.

use std::collections::{BTreeMap, HashMap};

use super::{Mesh, Vec3};
use crate::error::{Error, Result};

/// Nine coordinate bins of one face: `x0 y0 z0 x1 y1 z1 x2 y2 z2`.
pub type FaceBins = [u32; 9];

/// Centers the bounding box at the origin and scales uniformly so the longest axis spans `[-1, 1]`.
pub fn normalize(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh.bounds().ok_or_else(|| Error::degenerate("cannot normalize a mesh without vertices"))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent <= 1e-12 {
        return Err(Error::degenerate("all vertices coincide (zero extent)"));
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let s = 2.0 / extent;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| [(v[0] - center[0]) * s, (v[1] - center[1]) * s, (v[2] - center[2]) * s])
        .collect();
    Ok(Mesh { vertices, faces: mesh.faces.clone() })
}

/// Floor binning of a coordinate in `[-1, 1]` onto `0..resolution`.
pub fn quantize_coord(c: f64, resolution: u32) -> u32 {
    let b = ((c + 1.0) / 2.0 * resolution as f64).floor();
    b.clamp(0.0, (resolution - 1) as f64) as u32
}

/// Center of bin `b`.
pub fn bin_midpoint(b: u32, resolution: u32) -> f64 {
    (b as f64 + 0.5) / resolution as f64 * 2.0 - 1.0
}

/// How to treat degenerate and duplicate faces when assembling decoded face bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    /// Drop degenerate and duplicate faces (canonicalization rules).
    Strict,
    /// Keep every face so the face count is preserved; degenerate faces stay in the list.
    Lenient,
}

/// Quantized mesh in canonical order.
///
/// Vertices are strictly sorted by `(z, y, x)`; each face starts at its lowest index
/// (cyclic rotation, winding kept); faces are sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CanonicalMesh {
    pub resolution: u32,
    pub vertices: Vec<[u32; 3]>,
    pub faces: Vec<[usize; 3]>,
}

fn zyx_key(v: &[u32; 3]) -> (u32, u32, u32) {
    (v[2], v[1], v[0])
}

fn rotate_lowest_first(f: [usize; 3]) -> [usize; 3] {
    let k = (0..3).min_by_key(|&i| f[i]).unwrap_or(0);
    [f[k], f[(k + 1) % 3], f[(k + 2) % 3]]
}

/// Shared assembly: merge equal bins, order vertices, remap, rotate and order faces.
fn assemble(resolution: u32, corner_bins: &[[u32; 3]], faces: &[[usize; 3]], mode: AssemblyMode) -> CanonicalMesh {
    let mut unique: BTreeMap<(u32, u32, u32), usize> = BTreeMap::new();
    for b in corner_bins {
        unique.entry(zyx_key(b)).or_insert(0);
    }
    let mut vertices = Vec::with_capacity(unique.len());
    for (i, (key, slot)) in unique.iter_mut().enumerate() {
        *slot = i;
        vertices.push([key.2, key.1, key.0]);
    }
    let remap: Vec<usize> = corner_bins.iter().map(|b| unique[&zyx_key(b)]).collect();
    let mut out: Vec<[usize; 3]> = faces
        .iter()
        .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
        .filter(|f| mode == AssemblyMode::Lenient || (f[0] != f[1] && f[1] != f[2] && f[0] != f[2]))
        .map(rotate_lowest_first)
        .collect();
    out.sort_unstable();
    if mode == AssemblyMode::Strict {
        out.dedup();
    }
    CanonicalMesh { resolution, vertices, faces: out }
}

/// Quantizes, merges, cleans and orders a normalized mesh.
pub fn canonicalize(mesh: &Mesh, resolution: u32) -> Result<CanonicalMesh> {
    if resolution < 2 {
        return Err(Error::validation(format!("resolution must be at least 2, got {resolution}")));
    }
    mesh.validate()?;
    let bins: Vec<[u32; 3]> = mesh
        .vertices
        .iter()
        .map(|v| [quantize_coord(v[0], resolution), quantize_coord(v[1], resolution), quantize_coord(v[2], resolution)])
        .collect();
    let cm = assemble(resolution, &bins, &mesh.faces, AssemblyMode::Strict);
    if cm.faces.is_empty() {
        return Err(Error::degenerate("no faces left after quantization cleanup"));
    }
    Ok(cm)
}

/// Bin midpoints back to model coordinates.
pub fn dequantize(cm: &CanonicalMesh) -> Mesh {
    let r = cm.resolution;
    Mesh {
        vertices: cm
            .vertices
            .iter()
            .map(|b| [bin_midpoint(b[0], r), bin_midpoint(b[1], r), bin_midpoint(b[2], r)])
            .collect(),
        faces: cm.faces.clone(),
    }
}

impl CanonicalMesh {
    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Per-face coordinate bins in sequence order.
    pub fn face_bins(&self) -> Vec<FaceBins> {
        self.faces
            .iter()
            .map(|f| {
                let mut out = [0u32; 9];
                for (j, &vi) in f.iter().enumerate() {
                    out[3 * j..3 * j + 3].copy_from_slice(&self.vertices[vi]);
                }
                out
            })
            .collect()
    }

    /// Builds a mesh from per-face bins (e.g. decoder output).
    pub fn from_face_bins(bins: &[FaceBins], resolution: u32, mode: AssemblyMode) -> Result<Self> {
        if let Some(b) = bins.iter().flatten().find(|&&b| b >= resolution) {
            return Err(Error::validation(format!("bin {b} outside resolution {resolution}")));
        }
        let corners: Vec<[u32; 3]> = bins
            .iter()
            .flat_map(|f| [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]])
            .collect();
        let faces: Vec<[usize; 3]> = (0..bins.len()).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        Ok(assemble(resolution, &corners, &faces, mode))
    }

    /// Faces with a repeated vertex index (only possible after lenient assembly).
    pub fn degenerate_faces(&self) -> Vec<usize> {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks every canonical-order invariant.
    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().flatten().any(|&b| b >= self.resolution) {
            return Err(Error::validation("vertex bin outside resolution"));
        }
        for w in self.vertices.windows(2) {
            if zyx_key(&w[0]) >= zyx_key(&w[1]) {
                return Err(Error::validation("vertices not strictly sorted by (z, y, x)"));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::validation(format!("face {i} index out of range")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::validation(format!("face {i} is degenerate")));
            }
            if f[0] > f[1] || f[0] > f[2] {
                return Err(Error::validation(format!("face {i} does not start at its lowest index")));
            }
        }
        for w in self.faces.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::validation("faces not strictly sorted"));
            }
        }
        Ok(())
    }

    /// Vertex position lookup for duplicate detection in tests and tools.
    pub fn vertex_index(&self) -> HashMap<[u32; 3], usize> {
        self.vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect()
    }
}

/// Continuous coordinates of each face corner, for reuse by attribute code.
pub(crate) fn face_corners(cm: &CanonicalMesh) -> Vec<[Vec3; 3]> {
    let m = dequantize(cm);
    (0..m.faces.len()).map(|f| m.triangle(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn normalize_cube_and_box() {
        let cube = Mesh { vertices: vec![[0.0; 3], [2.0, 2.0, 2.0]], faces: vec![] };
        let n = normalize(&cube).unwrap();
        assert_eq!(n.bounds().unwrap(), ([-1.0; 3], [1.0; 3]));
        let boxy = Mesh { vertices: vec![[0.0; 3], [4.0, 2.0, 2.0]], faces: vec![] };
        let n = normalize(&boxy).unwrap();
        assert_eq!(n.bounds().unwrap(), ([-1.0, -0.5, -0.5], [1.0, 0.5, 0.5]));
    }

    #[test]
    fn normalize_rejects_single_point() {
        let p = Mesh { vertices: vec![[3.0, 3.0, 3.0]; 4], faces: vec![] };
        assert!(matches!(normalize(&p), Err(Error::Degenerate(_))));
        assert!(matches!(normalize(&Mesh::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn quantization_endpoints_and_midpoints() {
        assert_eq!(quantize_coord(-1.0, 128), 0);
        assert_eq!(quantize_coord(1.0, 128), 127);
        assert_eq!(bin_midpoint(0, 128), -0.9921875);
        assert_eq!(bin_midpoint(63, 128), -0.0078125);
        assert_eq!(bin_midpoint(64, 128), 0.0078125);
        for b in 0..128 {
            assert_eq!(quantize_coord(bin_midpoint(b, 128), 128), b);
        }
    }

    /// Brute force: try every cyclic rotation and pick the one with the smallest first index.
    fn brute_canonical_face(f: [usize; 3]) -> [usize; 3] {
        let rots = [[f[0], f[1], f[2]], [f[1], f[2], f[0]], [f[2], f[0], f[1]]];
        *rots.iter().min_by_key(|r| r[0]).unwrap()
    }

    #[test]
    fn tetra_example_ordering() {
        let m = Mesh {
            vertices: vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            faces: vec![[1, 2, 3]],
        };
        let cm = canonicalize(&normalize(&m).unwrap(), 128).unwrap();
        let order: Vec<[u32; 3]> = cm.vertices.clone();
        // brute force over all permutations of the four vertices: exactly one is (z, y, x)-sorted
        let mut sorted_perms = 0;
        let idx = [0usize, 1, 2, 3];
        for a in idx {
            for b in idx {
                for c in idx {
                    for d in idx {
                        let p = [a, b, c, d];
                        let mut seen = [false; 4];
                        p.iter().for_each(|&i| seen[i] = true);
                        if !seen.iter().all(|&s| s) {
                            continue;
                        }
                        let ok = p.windows(2).all(|w| zyx_key(&order[w[0]]) < zyx_key(&order[w[1]]));
                        if ok {
                            sorted_perms += 1;
                            assert_eq!(p, [0, 1, 2, 3]);
                        }
                    }
                }
            }
        }
        assert_eq!(sorted_perms, 1);
        assert_eq!(cm.vertices, vec![[0, 0, 0], [127, 0, 0], [0, 127, 0], [0, 0, 127]]);
        // input face (0,1,0),(0,0,0),(1,0,0) -> indices (2,0,1) -> rotated (0,1,2)
        assert_eq!(cm.faces, vec![brute_canonical_face([2, 0, 1])]);
        assert_eq!(cm.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn merges_and_drops_degenerate_and_duplicate_faces() {
        let m = Mesh {
            vertices: vec![[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [1.0, -1.0 + 1e-4, -1.0]],
            faces: vec![[0, 1, 2], [1, 2, 0], [0, 1, 3], [0, 3, 2]],
        };
        let cm = canonicalize(&m, 128).unwrap();
        // vertex 3 merges into 1: face [0,1,3] degenerate, [0,3,2] duplicates [0,1,2]
        assert_eq!(cm.vertices.len(), 3);
        assert_eq!(cm.faces, vec![[0, 1, 2]]);
        cm.validate().unwrap();
    }

    #[test]
    fn all_degenerate_is_error() {
        let m = Mesh { vertices: vec![[0.0; 3], [1e-5, 0.0, 0.0], [0.0, 1e-5, 0.0]], faces: vec![[0, 1, 2]] };
        assert!(matches!(canonicalize(&m, 128), Err(Error::Degenerate(_))));
    }

    fn random_mesh(seed: u64) -> Mesh {
        let mut rng = SeedStream::new(seed).rng("mesh");
        let nv = rng.random_range(4..40);
        let vertices: Vec<Vec3> = (0..nv)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let nf = rng.random_range(1..60);
        let faces = (0..nf)
            .map(|_| {
                let mut idx: Vec<usize> = (0..nv).collect();
                idx.shuffle(&mut rng);
                [idx[0], idx[1], idx[2]]
            })
            .collect();
        Mesh { vertices, faces }
    }

    fn permuted(m: &Mesh, seed: u64) -> Mesh {
        let mut rng = SeedStream::new(seed).rng("perm");
        let mut perm: Vec<usize> = (0..m.vertices.len()).collect();
        perm.shuffle(&mut rng);
        let mut vertices = vec![[0.0; 3]; m.vertices.len()];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = m.vertices[old];
        }
        let mut faces: Vec<[usize; 3]> = m
            .faces
            .iter()
            .map(|f| {
                let f = [perm[f[0]], perm[f[1]], perm[f[2]]];
                let k = rng.random_range(0..3);
                [f[k], f[(k + 1) % 3], f[(k + 2) % 3]]
            })
            .collect();
        faces.shuffle(&mut rng);
        Mesh { vertices, faces }
    }

    #[test]
    fn permutation_invariance_and_idempotence() {
        for seed in 0..50 {
            let m = random_mesh(seed);
            let Ok(cm) = canonicalize(&m, 128) else { continue };
            cm.validate().unwrap();
            assert_eq!(canonicalize(&permuted(&m, seed + 1000), 128).unwrap(), cm);
            assert_eq!(canonicalize(&dequantize(&cm), 128).unwrap(), cm);
        }
    }

    #[test]
    fn face_bins_round_trip_through_strict_assembly() {
        let cm = canonicalize(&random_mesh(5), 64).unwrap();
        let back = CanonicalMesh::from_face_bins(&cm.face_bins(), 64, AssemblyMode::Strict).unwrap();
        // unreferenced vertices are not representable in the face sequence
        assert_eq!(back.faces.len(), cm.faces.len());
        assert_eq!(back.face_bins(), cm.face_bins());
    }

    #[test]
    fn lenient_assembly_keeps_face_count() {
        let bins = vec![[1, 1, 1, 1, 1, 1, 2, 2, 2], [0, 0, 0, 3, 0, 0, 0, 3, 0], [0, 0, 0, 3, 0, 0, 0, 3, 0]];
        let lenient = CanonicalMesh::from_face_bins(&bins, 8, AssemblyMode::Lenient).unwrap();
        assert_eq!(lenient.face_count(), 3);
        assert_eq!(lenient.degenerate_faces().len(), 1);
        let strict = CanonicalMesh::from_face_bins(&bins, 8, AssemblyMode::Strict).unwrap();
        assert_eq!(strict.face_count(), 1);
        assert!(CanonicalMesh::from_face_bins(&bins, 3, AssemblyMode::Strict).is_err());
    }
}

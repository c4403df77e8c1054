//! Area-weighted surface sampling and sampled Hausdorff distance.

use rand::Rng;

use super::{triangle_area, Mesh, Vec3};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::spatial::PointGrid;

pub const DEFAULT_HAUSDORFF_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform samples on the surface: faces by area, then barycentric with reflection.
pub fn sample_surface_points(mesh: &Mesh, count: usize, seed: u64) -> Result<PointCloud> {
    let (cloud, _) = sample_with_faces(mesh, count, seed)?;
    Ok(cloud)
}

pub(crate) fn sample_with_faces(mesh: &Mesh, count: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    mesh.validate()?;
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += triangle_area(&mesh.triangle(f));
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::degenerate("mesh has zero surface area"));
    }
    let mut rng = SeedStream::new(seed).rng("surface-sample");
    let mut points = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random::<f64>() * total;
        let f = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push([
            a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
            a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
            a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
        ]);
        faces.push(f);
    }
    Ok((PointCloud { points }, faces))
}

fn directed(from: &[Vec3], to: &[Vec3]) -> f64 {
    let grid = PointGrid::new(to);
    from.iter().map(|p| grid.nearest(p).0).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance between surface samples of two meshes.
/// Both meshes are sampled with the same seed.
pub fn hausdorff_distance(a: &Mesh, b: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    if a.faces.is_empty() || b.faces.is_empty() {
        return Err(Error::validation("hausdorff distance needs two non-empty meshes"));
    }
    let pa = sample_surface_points(a, samples, seed)?;
    let pb = sample_surface_points(b, samples, seed)?;
    Ok(directed(&pa.points, &pb.points).max(directed(&pb.points, &pa.points)))
}

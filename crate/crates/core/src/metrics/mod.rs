//! Set-level generative metrics over point clouds: Chamfer distance, MMD, coverage, 1-NNA and JSD.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{sample_surface_points, Mesh, PointCloud};
use crate::rng::SeedStream;
use crate::spatial::{Point, PointGrid};

/// Voxels per axis of the JSD occupancy grid.
pub const DEFAULT_JSD_RESOLUTION: usize = 28;
pub const DEFAULT_POINTS_PER_MESH: usize = 1024;

fn check_cloud(c: &PointCloud) -> Result<()> {
    if c.is_empty() {
        return Err(Error::validation("point cloud is empty"));
    }
    Ok(())
}

fn check_set(set: &[PointCloud], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::validation(format!("{what} set is empty")));
    }
    set.iter().try_for_each(check_cloud)
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
fn directed(a: &[Point], b: &PointGrid<'_>) -> f64 {
    a.iter().map(|p| b.nearest(p).0).sum::<f64>() / a.len() as f64
}

/// Sum of the two directed means of squared nearest-neighbour distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_cloud(a)?;
    check_cloud(b)?;
    let (ga, gb) = (PointGrid::new(&a.points), PointGrid::new(&b.points));
    Ok(directed(&a.points, &gb) + directed(&b.points, &ga))
}

/// Symmetric Chamfer distances among the clouds of `gen` followed by those of `refs`.
pub struct ChamferMatrix {
    n_gen: usize,
    n: usize,
    d: Vec<f64>,
}

impl ChamferMatrix {
    /// Evaluates every pair once; each cloud's grid is built a single time.
    pub fn new(gen: &[PointCloud], refs: &[PointCloud]) -> Result<Self> {
        check_set(gen, "generated")?;
        check_set(refs, "reference")?;
        let all: Vec<&PointCloud> = gen.iter().chain(refs).collect();
        let grids: Vec<PointGrid<'_>> = all.iter().map(|c| PointGrid::new(&c.points)).collect();
        let n = all.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = directed(&all[i].points, &grids[j]) + directed(&all[j].points, &grids[i]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(Self { n_gen: gen.len(), n, d })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn gen_ref(&self, g: usize, r: usize) -> f64 {
        self.at(g, self.n_gen + r)
    }

    fn n_ref(&self) -> usize {
        self.n - self.n_gen
    }

    /// Mean over references of the distance to the closest generated cloud.
    pub fn mmd(&self) -> f64 {
        let total: f64 =
            (0..self.n_ref()).map(|r| (0..self.n_gen).map(|g| self.gen_ref(g, r)).fold(f64::INFINITY, f64::min)).sum();
        total / self.n_ref() as f64
    }

    /// Fraction of references that are the nearest reference of some generated cloud.
    pub fn coverage(&self) -> f64 {
        let mut hit = vec![false; self.n_ref()];
        for g in 0..self.n_gen {
            hit[argmin((0..self.n_ref()).map(|r| self.gen_ref(g, r)))] = true;
        }
        hit.iter().filter(|&&h| h).count() as f64 / self.n_ref() as f64
    }

    /// Leave-one-out 1-NN accuracy on the pooled set labelled by membership.
    pub fn one_nna(&self) -> Result<f64> {
        if self.n_gen < 2 || self.n_ref() < 2 {
            return Err(Error::validation(format!(
                "1-NNA needs at least 2 clouds per set, got {} and {}",
                self.n_gen,
                self.n_ref()
            )));
        }
        let correct = (0..self.n)
            .filter(|&i| {
                let j = argmin((0..self.n).map(|j| if j == i { f64::INFINITY } else { self.at(i, j) }));
                (i < self.n_gen) == (j < self.n_gen)
            })
            .count();
        Ok(correct as f64 / self.n as f64)
    }
}

/// Index of the smallest value; the first one wins ties.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v < best.0 {
            best = (v, i);
        }
    }
    best.1
}

pub fn mmd(gen: &[PointCloud], refs: &[PointCloud]) -> Result<f64> {
    Ok(ChamferMatrix::new(gen, refs)?.mmd())
}

pub fn coverage(gen: &[PointCloud], refs: &[PointCloud]) -> Result<f64> {
    Ok(ChamferMatrix::new(gen, refs)?.coverage())
}

pub fn one_nna(gen: &[PointCloud], refs: &[PointCloud]) -> Result<f64> {
    ChamferMatrix::new(gen, refs)?.one_nna()
}

/// Normalized occupancy histogram of all points over `res^3` voxels of `[-1, 1]^3`.
/// Returns the histogram and the number of clamped coordinates.
fn occupancy(set: &[PointCloud], res: usize) -> (Vec<f64>, usize) {
    let mut counts = vec![0u64; res * res * res];
    let mut clamped = 0;
    let mut total = 0u64;
    for p in set.iter().flat_map(|c| &c.points) {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let x = p[a];
            if !(-1.0..=1.0).contains(&x) {
                clamped += 1;
            }
            let v = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * res as f64).floor();
            idx[a] = if v.is_nan() { 0 } else { (v as usize).min(res - 1) };
        }
        counts[(idx[2] * res + idx[1]) * res + idx[0]] += 1;
        total += 1;
    }
    (counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect(), clamped)
}

/// Jensen-Shannon divergence (natural log) between two discrete distributions.
pub fn jsd_distributions(p: &[f64], q: &[f64]) -> f64 {
    let mut kp = 0.0;
    let mut kq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = (a + b) / 2.0;
        if a > 0.0 {
            kp += a * (a / m).ln();
        }
        if b > 0.0 {
            kq += b * (b / m).ln();
        }
    }
    (0.5 * kp + 0.5 * kq).max(0.0)
}

/// JSD between the voxel occupancy distributions of the pooled points of each set.
/// Coordinates outside `[-1, 1]` are clamped with a warning.
pub fn jsd(gen: &[PointCloud], refs: &[PointCloud], resolution: usize) -> Result<f64> {
    check_set(gen, "generated")?;
    check_set(refs, "reference")?;
    if resolution == 0 {
        return Err(Error::validation("jsd grid resolution must be positive"));
    }
    let (p, cp) = occupancy(gen, resolution);
    let (q, cq) = occupancy(refs, resolution);
    if cp + cq > 0 {
        warn!("{} point coordinates outside [-1, 1] were clamped for jsd", cp + cq);
    }
    Ok(jsd_distributions(&p, &q))
}

/// Unscaled metric values; scaling happens only when formatting.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mmd: f64,
    pub cov: f64,
    /// `None` when either set has fewer than two clouds.
    pub one_nna: Option<f64>,
    pub jsd: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub points_per_mesh: usize,
    pub seed: u64,
}

impl MetricReport {
    /// Human-readable table; MMD is shown x10^3, COV and 1-NNA x10^2.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<8} {:>10.3}", "MMD", self.mmd * 1e3);
        let _ = writeln!(s, "{:<8} {:>10.2}", "COV", self.cov * 1e2);
        match self.one_nna {
            Some(v) => {
                let _ = writeln!(s, "{:<8} {:>10.2}", "1-NNA", v * 1e2);
            }
            None => {
                let _ = writeln!(s, "{:<8} {:>10}", "1-NNA", "n/a");
            }
        }
        let _ = writeln!(s, "{:<8} {:>10.5}", "JSD", self.jsd);
        let _ = write!(
            s,
            "({} generated, {} reference, {} points per mesh, seed {})",
            self.n_gen, self.n_ref, self.points_per_mesh, self.seed
        );
        s
    }

    /// One `key=value` record per line, with raw values.
    pub fn to_records(&self) -> String {
        let nna = self.one_nna.map_or("nan".to_string(), |v| format!("{v:e}"));
        format!(
            "mmd={:e}\ncov={:e}\none_nna={nna}\njsd={:e}\nn_gen={}\nn_ref={}\npoints_per_mesh={}\nseed={}\n",
            self.mmd, self.cov, self.jsd, self.n_gen, self.n_ref, self.points_per_mesh, self.seed
        )
    }
}

/// Surface samples for the `i`-th mesh of a set. The seed depends only on `i`, so equal
/// sets produce equal clouds.
pub fn sample_clouds(meshes: &[Mesh], points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let s = SeedStream::new(seed).sub("metrics-cloud");
    meshes.iter().enumerate().map(|(i, m)| sample_surface_points(m, points, s.index(i as u64).derive("points"))).collect()
}

/// Samples clouds from both mesh sets and computes every metric.
pub fn evaluate(gen: &[Mesh], refs: &[Mesh], points_per_mesh: usize, seed: u64) -> Result<MetricReport> {
    evaluate_with_grid(gen, refs, points_per_mesh, DEFAULT_JSD_RESOLUTION, seed)
}

/// [`evaluate`] with an explicit JSD voxel resolution.
pub fn evaluate_with_grid(
    gen: &[Mesh],
    refs: &[Mesh],
    points_per_mesh: usize,
    jsd_resolution: usize,
    seed: u64,
) -> Result<MetricReport> {
    if gen.is_empty() || refs.is_empty() {
        return Err(Error::validation("evaluation needs non-empty generated and reference sets"));
    }
    let gc = sample_clouds(gen, points_per_mesh, seed)?;
    let rc = sample_clouds(refs, points_per_mesh, seed)?;
    let m = ChamferMatrix::new(&gc, &rc)?;
    Ok(MetricReport {
        mmd: m.mmd(),
        cov: m.coverage(),
        one_nna: m.one_nna().ok(),
        jsd: jsd(&gc, &rc, jsd_resolution)?,
        n_gen: gen.len(),
        n_ref: refs.len(),
        points_per_mesh,
        seed,
    })
}

//! Uniform-grid nearest-neighbour search over 3-D points.
//!
//! Returns exactly the brute-force minimum: candidates are scored with the same
//! squared-distance expression, the grid only prunes cells that cannot win.

pub type Point = [f64; 3];

#[inline]
pub fn dist_sq(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub struct PointGrid<'a> {
    points: &'a [Point],
    lo: Point,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: `starts[c]..starts[c + 1]` indexes `order`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        assert!(!points.is_empty(), "PointGrid needs at least one point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(per_axis + 1));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let cells: Vec<usize> = points.iter().map(|p| Self::cell_of(p, &lo, cell, &dims)).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self { points, lo, cell, dims, starts: counts, order }
    }

    fn axis_cell(x: f64, lo: f64, cell: f64, dim: usize) -> usize {
        let c = ((x - lo) / cell).floor();
        if c < 0.0 {
            0
        } else {
            (c as usize).min(dim - 1)
        }
    }

    fn cell_of(p: &Point, lo: &Point, cell: f64, dims: &[usize; 3]) -> usize {
        let i = Self::axis_cell(p[0], lo[0], cell, dims[0]);
        let j = Self::axis_cell(p[1], lo[1], cell, dims[1]);
        let k = Self::axis_cell(p[2], lo[2], cell, dims[2]);
        (k * dims[1] + j) * dims[0] + i
    }

    /// Squared distance to the nearest stored point and its index (lowest index on ties).
    pub fn nearest(&self, p: &Point) -> (f64, usize) {
        let c = [0, 1, 2].map(|a| Self::axis_cell(p[a], self.lo[a], self.cell, self.dims[a]) as isize);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = *self.dims.iter().max().unwrap() as isize;
        for r in 0..=max_r {
            for k in (c[2] - r).max(0)..=(c[2] + r).min(self.dims[2] as isize - 1) {
                for j in (c[1] - r).max(0)..=(c[1] + r).min(self.dims[1] as isize - 1) {
                    for i in (c[0] - r).max(0)..=(c[0] + r).min(self.dims[0] as isize - 1) {
                        let shell = (i - c[0]).abs() == r || (j - c[1]).abs() == r || (k - c[2]).abs() == r;
                        if !shell {
                            continue;
                        }
                        let cell = ((k as usize) * self.dims[1] + j as usize) * self.dims[0] + i as usize;
                        for &idx in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                            let d = dist_sq(p, &self.points[idx]);
                            if d < best.0 || (d == best.0 && idx < best.1) {
                                best = (d, idx);
                            }
                        }
                    }
                }
            }
            // any point outside the explored block is at least this far away
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                let lo_edge = c[a] - r;
                let hi_edge = c[a] + r;
                if lo_edge > 0 {
                    bound = bound.min(p[a] - (self.lo[a] + lo_edge as f64 * self.cell));
                }
                if hi_edge < self.dims[a] as isize - 1 {
                    bound = bound.min(self.lo[a] + (hi_edge + 1) as f64 * self.cell - p[a]);
                }
            }
            if bound.is_infinite() {
                break;
            }
            if bound > 0.0 && best.0 < bound * bound {
                break;
            }
        }
        best
    }
}

/// Brute-force reference used by tests and tiny inputs.
pub fn nearest_brute(points: &[Point], p: &Point) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, q) in points.iter().enumerate() {
        let d = dist_sq(p, q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

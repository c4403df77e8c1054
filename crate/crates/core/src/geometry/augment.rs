//! Training-time augmentation: per-axis scaling and rotation.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normalize, Mesh, Vec3};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    None,
    /// One of four yaw rotations about z, chosen uniformly.
    QuarterTurnYaw,
    /// Uniform random rotation in SO(3).
    Arbitrary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOptions {
    pub scale_range: (f64, f64),
    pub rotation: RotationMode,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { scale_range: (0.95, 1.05), rotation: RotationMode::QuarterTurnYaw }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn yaw(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for x in q.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Scales each axis independently, optionally rotates, then re-normalizes.
pub fn augment(mesh: &Mesh, seed: u64, opts: &AugmentOptions) -> Result<Mesh> {
    let (lo, hi) = opts.scale_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(Error::validation(format!("invalid scale range ({lo}, {hi})")));
    }
    let mut rng = SeedStream::new(seed).rng("augment");
    let scale: Vec3 = [0; 3].map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) });
    let rot = match opts.rotation {
        RotationMode::None => None,
        RotationMode::QuarterTurnYaw => Some(yaw(FRAC_PI_2 * rng.random_range(0..4) as f64)),
        RotationMode::Arbitrary => Some(random_rotation(&mut rng)),
    };
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            let s = [v[0] * scale[0], v[1] * scale[1], v[2] * scale[2]];
            rot.as_ref().map_or(s, |m| mat_vec(m, s))
        })
        .collect();
    normalize(&Mesh { vertices, faces: mesh.faces.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_synthetic, SyntheticShape};

    fn sample() -> Mesh {
        let m = generate_synthetic(&SyntheticShape::Prism { sides: 5, radius: 0.4, height: 0.7 }, 0).unwrap();
        normalize(&m).unwrap()
    }

    #[test]
    fn unit_scale_without_rotation_is_identity() {
        let m = sample();
        let opts = AugmentOptions { scale_range: (1.0, 1.0), rotation: RotationMode::None };
        let a = augment(&m, 3, &opts).unwrap();
        assert_eq!(a.faces, m.faces);
        for (p, q) in a.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let m = sample();
        for rotation in [RotationMode::QuarterTurnYaw, RotationMode::Arbitrary] {
            let opts = AugmentOptions { rotation, ..Default::default() };
            assert_eq!(augment(&m, 42, &opts).unwrap(), augment(&m, 42, &opts).unwrap());
        }
    }

    #[test]
    fn counts_preserved_over_many_draws() {
        let m = sample();
        for seed in 0..100 {
            let a = augment(&m, seed, &AugmentOptions::default()).unwrap();
            assert_eq!((a.vertices.len(), a.faces.len()), (m.vertices.len(), m.faces.len()));
        }
    }

    #[test]
    fn arbitrary_rotation_is_orthonormal() {
        let mut rng = SeedStream::new(5).rng("rot");
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_scale_range_rejected() {
        let opts = AugmentOptions { scale_range: (1.1, 0.9), rotation: RotationMode::None };
        assert!(augment(&sample(), 0, &opts).is_err());
    }
}

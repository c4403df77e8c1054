//! Conditions for the velocity model and a toy encoder for cross-attention features.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{sample_surface_points, Mesh};
use crate::nn::{Real, Tensor};
use crate::rng::StreamRng;

/// Width of [`toy_condition_features`] tokens.
pub const TOY_FEATURE_DIM: usize = 16;
/// Tokens emitted by [`toy_condition_features`].
pub const TOY_TOKENS: usize = 4;
const TOY_POINTS: usize = 256;

/// Conditions for one sequence; `None` selects the null embedding.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a, F> {
    pub face_count: Option<usize>,
    pub features: Option<&'a Tensor<F>>,
}

impl<F> Conditioning<'_, F> {
    pub fn null() -> Self {
        Self { face_count: None, features: None }
    }
}

/// Independent drop decisions `[face_count, features]`, each true with probability `p`.
/// Both are always drawn so the stream position does not depend on the data.
pub fn condition_dropout(rng: &mut StreamRng, p: f64) -> [bool; 2] {
    [rng.random_bool(p), rng.random_bool(p)]
}

#[rustfmt::skip]
fn point_features(p: &[f64; 3]) -> [f64; TOY_FEATURE_DIM] {
    let [x, y, z] = *p;
    let r = (x * x + y * y + z * z).sqrt();
    [
        x, y, z,
        x * x, y * y, z * z,
        x * y, y * z, z * x,
        (PI * x).sin(), (PI * y).sin(), (PI * z).sin(),
        (PI * x).cos(), (PI * y).cos(), (PI * z).cos(),
        r,
    ]
}

/// Stand-in for an image or point-cloud encoder: surface points sorted by `(z, y, x)`, split
/// into [`TOY_TOKENS`] equal groups, each mean-pooled over fixed polynomial and Fourier features.
pub fn toy_condition_features<F: Real>(mesh: &Mesh, seed: u64) -> Result<Tensor<F>> {
    let cloud = sample_surface_points(mesh, TOY_POINTS, seed)?;
    if cloud.points.len() < TOY_TOKENS {
        return Err(Error::degenerate("too few surface points for condition features"));
    }
    let mut pts = cloud.points;
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]).then(a[1].total_cmp(&b[1])).then(a[0].total_cmp(&b[0])));
    let per = pts.len() / TOY_TOKENS;
    let mut out = Tensor::zeros(TOY_TOKENS, TOY_FEATURE_DIM);
    for k in 0..TOY_TOKENS {
        let group = &pts[k * per..if k + 1 == TOY_TOKENS { pts.len() } else { (k + 1) * per }];
        let mut acc = [0.0; TOY_FEATURE_DIM];
        for p in group {
            for (a, f) in acc.iter_mut().zip(point_features(p)) {
                *a += f;
            }
        }
        for (o, a) in out.row_mut(k).iter_mut().zip(acc) {
            *o = F::c(a / group.len() as f64);
        }
    }
    Ok(out)
}

//! Euler integration of a guided velocity field, and RePaint-style completion.

use log::warn;
use rand_distr::{Distribution, StandardNormal};

use super::CfgWeights;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::rng::SeedStream;

/// Which conditions a velocity evaluation sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Every condition replaced by its null embedding.
    Null,
    /// Face count only; any extra condition is nulled.
    Face,
    /// All supplied conditions.
    Full,
}

/// A (possibly guided) velocity model `v(z, t)`.
pub trait VelocityField<F: Real> {
    /// One velocity per requested branch, each shaped like `z`.
    fn velocities(&self, z: &Tensor<F>, t: f64, branches: &[Branch]) -> Result<Vec<Tensor<F>>>;
}

/// Adapts a closure `(z, t, branch) -> v` into a [`VelocityField`].
pub struct FnField<G>(pub G);

impl<F: Real, G: Fn(&Tensor<F>, f64, Branch) -> Result<Tensor<F>>> VelocityField<F> for FnField<G> {
    fn velocities(&self, z: &Tensor<F>, t: f64, branches: &[Branch]) -> Result<Vec<Tensor<F>>> {
        branches.iter().map(|&b| (self.0)(z, t, b)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub t: f64,
    /// Mean absolute guided velocity at this step.
    pub mean_abs_v: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<F> {
    pub z: Tensor<F>,
    /// Velocity evaluations performed, counting each guidance branch.
    pub evaluations: usize,
    pub trace: Vec<TraceRecord>,
}

/// Standard normal `rows x cols` tensor from the `noise` stream of `seed`.
pub fn gaussian_noise<F: Real>(rows: usize, cols: usize, seed: u64) -> Tensor<F> {
    let mut rng = SeedStream::new(seed).rng("noise");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| F::c(StandardNormal.sample(&mut rng))).collect())
}

fn generation_error<F: Real>(z: &Tensor<F>, reason: String) -> Error {
    Error::Generation { reason, tokens: z.data.iter().map(|x| x.f64() as f32).collect(), latent_dim: z.cols }
}

/// Known rows to re-impose after every step, together with their noise endpoint.
struct Anchor<'a, F> {
    x0: Tensor<F>,
    x1: &'a Tensor<F>,
    rows: &'a [bool],
}

impl<F: Real> Anchor<'_, F> {
    fn apply(&self, z: &mut Tensor<F>, t: f64) {
        let (a, b) = (F::c(t), F::c(1.0 - t));
        for (r, _) in self.rows.iter().enumerate().filter(|(_, &k)| k) {
            let (x0, x1) = (self.x0.row(r), self.x1.row(r));
            for ((o, &d), &n) in z.row_mut(r).iter_mut().zip(x1).zip(x0) {
                *o = if t == 1.0 { d } else { a * d + b * n };
            }
        }
    }
}

fn integrate<F: Real>(
    field: &dyn VelocityField<F>,
    z0: Tensor<F>,
    steps: usize,
    cfg: CfgWeights,
    anchor: Option<&Anchor<'_, F>>,
) -> Result<SampleOutput<F>> {
    if steps == 0 {
        return Err(Error::validation("sampler needs at least one step"));
    }
    cfg.validate()?;
    let branches = cfg.branches();
    let dt = F::c(1.0 / steps as f64);
    let mut z = z0;
    let mut trace = Vec::with_capacity(steps);
    let mut evaluations = 0;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let vs = field.velocities(&z, t, branches)?;
        evaluations += branches.len();
        if let Some(bad) = vs.iter().find(|v| v.shape() != z.shape()) {
            return Err(Error::validation(format!("velocity shape {:?} differs from state {:?}", bad.shape(), z.shape())));
        }
        let v = cfg.combine(&vs)?;
        let mean_abs = v.data.iter().map(|x| x.f64().abs()).sum::<f64>() / v.len().max(1) as f64;
        for (zi, &vi) in z.data.iter_mut().zip(&v.data) {
            *zi += dt * vi;
        }
        if !(mean_abs.is_finite() && z.all_finite()) {
            return Err(generation_error(&z, format!("non-finite state at step {k} (t={t})")));
        }
        if let Some(a) = anchor {
            a.apply(&mut z, if k + 1 == steps { 1.0 } else { (k + 1) as f64 / steps as f64 });
        }
        trace.push(TraceRecord { step: k, t, mean_abs_v: mean_abs });
    }
    Ok(SampleOutput { z, evaluations, trace })
}

/// Left-endpoint Euler from `z0` at `t = 0` to `t = 1` on a uniform grid of `steps` intervals.
pub fn euler_integrate<F: Real>(
    field: &dyn VelocityField<F>,
    z0: Tensor<F>,
    steps: usize,
    cfg: CfgWeights,
) -> Result<SampleOutput<F>> {
    integrate(field, z0, steps, cfg, None)
}

/// [`euler_integrate`] starting from [`gaussian_noise`] of `seed`.
pub fn euler_sample<F: Real>(
    field: &dyn VelocityField<F>,
    rows: usize,
    cols: usize,
    steps: usize,
    cfg: CfgWeights,
    seed: u64,
) -> Result<SampleOutput<F>> {
    integrate(field, gaussian_noise(rows, cols, seed), steps, cfg, None)
}

/// Samples the rows not flagged in `known_mask` while the flagged rows follow the
/// straight path from their initial noise to `known`. The initial noise doubles as the
/// fixed noise endpoint, so an all-false mask reproduces [`euler_sample`] with the same seed,
/// and flagged rows of the result equal `known` bit for bit.
pub fn repaint_complete<F: Real>(
    field: &dyn VelocityField<F>,
    known: &Tensor<F>,
    known_mask: &[bool],
    steps: usize,
    cfg: CfgWeights,
    seed: u64,
) -> Result<SampleOutput<F>> {
    if known_mask.len() != known.rows {
        return Err(Error::validation(format!("known mask has {} rows, tokens have {}", known_mask.len(), known.rows)));
    }
    if !known.all_finite() {
        return Err(Error::validation("known tokens must be finite"));
    }
    if known_mask.iter().all(|&k| k) {
        warn!("completion requested with every position known; returning the known tokens");
        return Ok(SampleOutput { z: known.clone(), evaluations: 0, trace: Vec::new() });
    }
    let z0 = gaussian_noise(known.rows, known.cols, seed);
    let anchor = Anchor { x0: z0.clone(), x1: known, rows: known_mask };
    integrate(field, z0, steps, cfg, Some(&anchor))
}

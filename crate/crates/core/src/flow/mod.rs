//! Rectified-flow mathematics over token tensors.
//!
//! Time runs from noise (`t = 0`, standard normal) to data (`t = 1`); the model
//! regresses the constant velocity `x1 - x0` along the straight interpolant.

mod sampler;

pub use sampler::{
    euler_integrate, euler_sample, gaussian_noise, repaint_complete, Branch, FnField, SampleOutput, TraceRecord,
    VelocityField,
};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Tensor, Var};
use crate::rng::SeedStream;

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`; the endpoints are returned exactly.
pub fn interpolant<F: Real>(x0: &Tensor<F>, x1: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    same_shape(x0, x1, "interpolant")?;
    check_time(t)?;
    Ok(if t == 0.0 {
        x0.clone()
    } else if t == 1.0 {
        x1.clone()
    } else {
        let (a, b) = (F::c(t), F::c(1.0 - t));
        x1.zip_map(x0, |d, n| a * d + b * n)
    })
}

/// Row-wise interpolant where row `r` uses time `t[r]`.
pub fn interpolant_rows<F: Real>(x0: &Tensor<F>, x1: &Tensor<F>, t: &[f64]) -> Result<Tensor<F>> {
    same_shape(x0, x1, "interpolant")?;
    if t.len() != x0.rows {
        return Err(Error::validation(format!("{} row times for {} rows", t.len(), x0.rows)));
    }
    let mut out = Tensor::zeros(x0.rows, x0.cols);
    for (r, &tr) in t.iter().enumerate() {
        check_time(tr)?;
        let (a, b) = (F::c(tr), F::c(1.0 - tr));
        for ((o, &d), &n) in out.row_mut(r).iter_mut().zip(x1.row(r)).zip(x0.row(r)) {
            *o = if tr == 1.0 { d } else if tr == 0.0 { n } else { a * d + b * n };
        }
    }
    Ok(out)
}

/// Regression target `x1 - x0`.
pub fn velocity_target<F: Real>(x0: &Tensor<F>, x1: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape(x0, x1, "velocity_target")?;
    Ok(x1.zip_map(x0, |d, n| d - n))
}

/// Logit-normal time distribution: `t = sigmoid(m + s * eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSampler {
    pub m: f64,
    pub s: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self { m: 0.5, s: 1.0 }
    }
}

impl TimeSampler {
    pub fn new(m: f64, s: f64) -> Result<Self> {
        let ts = Self { m, s };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m.is_finite() && self.s.is_finite() && self.s > 0.0) {
            return Err(Error::validation(format!("time sampler needs finite m and s > 0, got m={} s={}", self.m, self.s)));
        }
        Ok(())
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        logit_normal_density(t, self.m, self.s)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let eps: f64 = StandardNormal.sample(rng);
        let t = 1.0 / (1.0 + (-(self.m + self.s * eps)).exp());
        // Keep strictly inside (0, 1) so the density stays defined at every draw.
        t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }
}

/// `1 / (s sqrt(2 pi) t (1 - t)) * exp(-(logit(t) - m)^2 / (2 s^2))` for `t` in `(0, 1)`.
pub fn logit_normal_density(t: f64, m: f64, s: f64) -> Result<f64> {
    TimeSampler { m, s }.validate()?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::validation(format!("logit-normal density undefined at t={t}")));
    }
    let logit = (t / (1.0 - t)).ln();
    Ok((-(logit - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt() * t * (1.0 - t)))
}

/// One draw from the `time` stream of `seed`.
pub fn sample_time(sampler: &TimeSampler, seed: u64) -> f64 {
    sampler.sample(&mut SeedStream::new(seed).rng("time"))
}

/// Velocity MSE over valid rows and all channels.
pub fn flow_loss_var<F: Real>(g: &Graph<F>, v_pred: Var, v_target: Var, row_valid: &[bool]) -> Var {
    let d = g.sub(v_pred, v_target);
    g.masked_mean(g.mul(d, d), row_valid)
}

/// Scalar form of [`flow_loss_var`].
pub fn flow_loss<F: Real>(v_pred: &Tensor<F>, v_target: &Tensor<F>, row_valid: &[bool]) -> Result<f64> {
    same_shape(v_pred, v_target, "flow_loss")?;
    if row_valid.len() != v_pred.rows {
        return Err(Error::validation(format!("mask has {} rows, tensors have {}", row_valid.len(), v_pred.rows)));
    }
    if v_pred.cols == 0 || !row_valid.iter().any(|&v| v) {
        return Err(Error::validation("flow_loss has no valid slots"));
    }
    let g = Graph::<F>::new();
    let (p, t) = (g.constant(v_pred.clone()), g.constant(v_target.clone()));
    Ok(g.value(flow_loss_var(&g, p, t, row_valid)).item().f64())
}

/// Classifier-free guidance weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CfgWeights {
    /// Plain conditional prediction, one evaluation per step.
    Off,
    /// `v(null) + w (v(cond) - v(null))`.
    Single(f64),
    /// `v(null, null) + w1 (v(face, null) - v(null, null)) + w2 (v(face, extra) - v(face, null))`.
    Dual(f64, f64),
}

impl CfgWeights {
    pub const SINGLE_DEFAULT: CfgWeights = CfgWeights::Single(8.0);
    pub const DUAL_DEFAULT: CfgWeights = CfgWeights::Dual(1.0, 5.0);

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CfgWeights::Off => true,
            CfgWeights::Single(w) => w.is_finite(),
            CfgWeights::Dual(a, b) => a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("guidance weights must be finite: {self:?}")))
        }
    }

    /// Condition branches evaluated per step, in the order [`CfgWeights::combine`] expects.
    pub fn branches(&self) -> &'static [Branch] {
        match self {
            CfgWeights::Off => &[Branch::Full],
            CfgWeights::Single(_) => &[Branch::Null, Branch::Full],
            CfgWeights::Dual(..) => &[Branch::Null, Branch::Face, Branch::Full],
        }
    }

    pub fn combine<F: Real>(&self, v: &[Tensor<F>]) -> Result<Tensor<F>> {
        if v.len() != self.branches().len() {
            return Err(Error::validation(format!("{:?} expects {} velocities, got {}", self, self.branches().len(), v.len())));
        }
        match *self {
            CfgWeights::Off => Ok(v[0].clone()),
            CfgWeights::Single(w) => cfg_single(&v[0], &v[1], w),
            CfgWeights::Dual(w1, w2) => cfg_dual(&v[0], &v[1], &v[2], w1, w2),
        }
    }
}

/// `v_uncond + w * (v_cond - v_uncond)`, evaluated as `(1 - w) v_uncond + w v_cond` so that
/// `w = 0` and `w = 1` return an input bit for bit.
pub fn cfg_single<F: Real>(v_uncond: &Tensor<F>, v_cond: &Tensor<F>, w: f64) -> Result<Tensor<F>> {
    same_shape(v_uncond, v_cond, "cfg_single")?;
    let (a, b) = (F::c(1.0 - w), F::c(w));
    Ok(v_uncond.zip_map(v_cond, |u, c| a * u + b * c))
}

/// `v_nn + w1 * (v_fn - v_nn) + w2 * (v_fi - v_fn)`, evaluated as a weighted sum of the
/// three predictions; with `w2 = 0` it equals [`cfg_single`] exactly.
pub fn cfg_dual<F: Real>(v_nn: &Tensor<F>, v_fn: &Tensor<F>, v_fi: &Tensor<F>, w1: f64, w2: f64) -> Result<Tensor<F>> {
    same_shape(v_nn, v_fn, "cfg_dual")?;
    same_shape(v_nn, v_fi, "cfg_dual")?;
    let (a, b, c) = (F::c(1.0 - w1), F::c(w1 - w2), F::c(w2));
    let mut out = v_nn.clone();
    for ((o, &f), &i) in out.data.iter_mut().zip(&v_fn.data).zip(&v_fi.data) {
        *o = (a * *o + b * f) + c * i;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

//! KL regularizer, bin cross-entropy, reparameterization and reconstruction metrics.

use rand_distr::{Distribution, StandardNormal};

use super::model::{LOGVAR_MAX, LOGVAR_MIN};
use crate::error::{Error, Result};
use crate::geometry::{bin_midpoint, CanonicalMesh, FaceBins};
use crate::nn::{Graph, Real, Tensor, Var};
use crate::rng::SeedStream;

/// `mean(0.5 * (mu^2 + sigma^2 - log sigma^2))` over valid rows and all channels.
///
/// Unlike the textbook Gaussian KL there is no `-1` inside the sum, so the value at the
/// prior is 0.5 per element; gradients and minimizer are the same.
pub fn kl_loss_var<F: Real>(g: &Graph<F>, mu: Var, logvar: Var, row_valid: &[bool]) -> Var {
    let terms = g.sub(g.add(g.mul(mu, mu), g.exp(logvar)), logvar);
    g.scale(g.masked_mean(terms, row_valid), F::c(0.5))
}

/// Scalar form of [`kl_loss_var`] over equal-length slices.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() || mu.is_empty() {
        return Err(Error::validation("kl_loss needs equal, non-empty mu and logvar"));
    }
    let g = Graph::<f64>::new();
    let m = g.constant(Tensor::new(1, mu.len(), mu.to_vec()));
    let l = g.constant(Tensor::new(1, logvar.len(), logvar.to_vec()));
    Ok(g.value(kl_loss_var(&g, m, l, &[true])).item())
}

/// Mean cross-entropy over every targeted coordinate slot.
pub fn reconstruction_loss_var<F: Real>(g: &Graph<F>, logits: Var, targets: &[Option<usize>], resolution: u32) -> Var {
    let (rows, _) = g.shape(logits);
    let r = resolution as usize;
    g.cross_entropy(g.reshape(logits, rows * 9, r), targets)
}

/// Scalar form: `logits` is `n x 9R`, `target` supplies `n` faces of bins.
pub fn reconstruction_loss(logits: &Tensor<f64>, target: &[FaceBins], resolution: u32) -> Result<f64> {
    let r = resolution as usize;
    if logits.cols != 9 * r || logits.rows != target.len() || target.is_empty() {
        return Err(Error::validation(format!(
            "logits {:?} do not match {} faces at resolution {resolution}",
            logits.shape(),
            target.len()
        )));
    }
    if let Some(b) = target.iter().flatten().find(|&&b| b >= resolution) {
        return Err(Error::validation(format!("target bin {b} outside resolution {resolution}")));
    }
    let targets: Vec<Option<usize>> = target.iter().flatten().map(|&b| Some(b as usize)).collect();
    let g = Graph::<f64>::new();
    let l = g.constant(logits.clone());
    Ok(g.value(reconstruction_loss_var(&g, l, &targets, resolution)).item())
}

/// Token sequence drawn from the encoder's posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
    pub noise: Tensor<f32>,
    pub sample: Tensor<f32>,
}

impl LatentSequence {
    pub fn face_count(&self) -> usize {
        self.mu.rows
    }
}

/// Which token the pipeline uses for a face.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Mean,
    Sample(u64),
}

/// `sample = mu + exp(logvar / 2) * eps`, `eps` standard normal from the `reparam` stream.
/// `logvar` is clamped to `[-30, 20]` first.
pub fn reparameterize(mu: &Tensor<f32>, logvar: &Tensor<f32>, seed: u64) -> Result<LatentSequence> {
    if mu.shape() != logvar.shape() {
        return Err(Error::validation(format!("mu {:?} and logvar {:?} differ", mu.shape(), logvar.shape())));
    }
    let mut rng = SeedStream::new(seed).rng("reparam");
    let noise: Vec<f32> = (0..mu.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::new(mu.rows, mu.cols, noise);
    let logvar = logvar.map(|l| l.clamp(LOGVAR_MIN as f32, LOGVAR_MAX as f32));
    let mut sample = mu.clone();
    for ((s, &l), &e) in sample.data.iter_mut().zip(&logvar.data).zip(&noise.data) {
        *s += (0.5 * l).exp() * e;
    }
    Ok(LatentSequence { mu: mu.clone(), logvar, noise, sample })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconMetrics {
    /// Fraction of faces whose nine bins all match.
    pub triangle_accuracy: f64,
    /// Mean Euclidean distance between dequantized predicted and true face corners.
    pub l2_distance: f64,
}

/// Metrics on face-aligned bin sequences.
pub fn recon_metrics_bins(pred: &[FaceBins], gt: &[FaceBins], resolution: u32) -> Result<ReconMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!("face count mismatch: {} predicted vs {} true", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::validation("recon metrics need at least one face"));
    }
    let exact = pred.iter().zip(gt).filter(|(p, t)| p == t).count();
    let mut dist = 0.0;
    for (p, t) in pred.iter().zip(gt) {
        for c in 0..3 {
            let d2: f64 = (0..3)
                .map(|a| {
                    let d = bin_midpoint(p[3 * c + a], resolution) - bin_midpoint(t[3 * c + a], resolution);
                    d * d
                })
                .sum();
            dist += d2.sqrt();
        }
    }
    Ok(ReconMetrics { triangle_accuracy: exact as f64 / gt.len() as f64, l2_distance: dist / (3 * gt.len()) as f64 })
}

/// Metrics on two canonical meshes with aligned face order.
pub fn recon_metrics(pred: &CanonicalMesh, gt: &CanonicalMesh) -> Result<ReconMetrics> {
    if pred.resolution != gt.resolution {
        return Err(Error::validation("resolution mismatch"));
    }
    recon_metrics_bins(&pred.face_bins(), &gt.face_bins(), gt.resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    #[test]
    fn kl_reference_values() {
        assert!((kl_loss(&[0.0; 6], &[0.0; 6]).unwrap() - 0.5).abs() < 1e-15);
        assert!((kl_loss(&[1.0], &[0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_scalar_oracle() {
        let mut rng = SeedStream::new(2).rng("kl");
        for _ in 0..20 {
            let mu: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut oracle = 0.0;
            for i in 0..24 {
                oracle += 0.5 * (mu[i] * mu[i] + lv[i].exp() - lv[i]);
            }
            oracle /= 24.0;
            assert!((kl_loss(&mu, &lv).unwrap() - oracle).abs() < 1e-7);
        }
    }

    #[test]
    fn kl_minimum_at_prior() {
        let base = kl_loss(&[0.0], &[0.0]).unwrap();
        for d in [-1e-2, 1e-2] {
            assert!(kl_loss(&[d], &[0.0]).unwrap() > base);
            assert!(kl_loss(&[0.0], &[d]).unwrap() > base);
        }
    }

    #[test]
    fn uniform_logits_give_log_resolution() {
        let r = 16;
        let logits = Tensor::<f64>::full(2, 9 * r as usize, 0.3);
        let bins = vec![[1, 2, 3, 4, 5, 6, 7, 8, 9], [15, 0, 3, 3, 3, 3, 3, 3, 3]];
        let loss = reconstruction_loss(&logits, &bins, r).unwrap();
        assert!((loss - (r as f64).ln()).abs() < 1e-6);
        assert!(reconstruction_loss(&logits, &[[16, 0, 0, 0, 0, 0, 0, 0, 0], bins[1]], r).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let r = 8usize;
        let mut rng = SeedStream::new(5).rng("ce");
        let logits = Tensor::<f64>::new(3, 9 * r, (0..27 * r).map(|_| rng.random_range(-3.0..3.0)).collect());
        let bins: Vec<FaceBins> = (0..3).map(|_| [0; 9].map(|_| rng.random_range(0..r as u32))).collect();
        let mut oracle = 0.0;
        for f in 0..3 {
            for s in 0..9 {
                let row = &logits.row(f)[s * r..(s + 1) * r];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                oracle += lse - row[bins[f][s] as usize];
            }
        }
        oracle /= 27.0;
        assert!((reconstruction_loss(&logits, &bins, r as u32).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let r = 4usize;
        let bins = vec![[0, 1, 2, 3, 0, 1, 2, 3, 0]];
        let mut logits = Tensor::<f64>::zeros(1, 9 * r);
        for (s, &b) in bins[0].iter().enumerate() {
            logits.data[s * r + b as usize] = 60.0;
        }
        assert!(reconstruction_loss(&logits, &bins, r as u32).unwrap() < 1e-20);
    }

    #[test]
    fn reparameterize_limits_and_statistics() {
        let mu = Tensor::new(1, 2, vec![0.7f32, -1.2]);
        let collapsed = reparameterize(&mu, &Tensor::full(1, 2, -1e4), 3).unwrap();
        for (s, m) in collapsed.sample.data.iter().zip(&mu.data) {
            assert!((s - m).abs() < 1e-6);
        }
        let lv = Tensor::new(1, 2, vec![0.0f32, 1.0]);
        assert_eq!(reparameterize(&mu, &lv, 9).unwrap(), reparameterize(&mu, &lv, 9).unwrap());

        let n = 10_000;
        let big_mu = Tensor::new(n, 1, vec![0.5f32; n]);
        let big_lv = Tensor::new(n, 1, vec![(0.8f32).ln() * 2.0; n]);
        let s = reparameterize(&big_mu, &big_lv, 1).unwrap().sample;
        let mean = s.data.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = s.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = 0.8 / (n as f64).sqrt();
        let se_std = 0.8 / (2.0 * n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var.sqrt() - 0.8).abs() < 3.0 * se_std, "std {}", var.sqrt());
    }

    #[test]
    fn metrics_identity_and_single_bin_shift() {
        let gt = vec![[10, 20, 30, 40, 50, 60, 70, 80, 90], [1, 2, 3, 4, 5, 6, 7, 8, 9]];
        let m = recon_metrics_bins(&gt, &gt, 128).unwrap();
        assert_eq!((m.triangle_accuracy, m.l2_distance), (1.0, 0.0));
        let mut pred = gt.clone();
        pred[1][4] += 1;
        let m = recon_metrics_bins(&pred, &gt, 128).unwrap();
        assert_eq!(m.triangle_accuracy, 0.5);
        assert!((m.l2_distance - 1.0 / (6.0 * 64.0)).abs() < 1e-12);
        assert!(recon_metrics_bins(&pred[..1], &gt, 128).is_err());
    }
}

//! Face-token variational autoencoder: one continuous latent per triangle.

mod config;
mod latents;
mod loss;
mod model;
mod train;

pub use config::VaeConfig;
pub use latents::{LatentDataset, LatentRecord};
pub use loss::{
    kl_loss, kl_loss_var, recon_metrics, recon_metrics_bins, reconstruction_loss, reconstruction_loss_var,
    reparameterize, LatentSequence, ReconMetrics, TokenMode,
};
pub use model::{argmax_bins, FaceBatch, PreparedMesh, Vae, LOGVAR_MAX, LOGVAR_MIN};
pub use train::{train_vae, VaeStepStats, VaeTrainConfig, VaeTrainer};

use crate::error::{Error, Result};
use crate::geometry::{AssemblyMode, CanonicalMesh, FaceBins};
use crate::nn::{ParameterStore, Tensor};

/// Decodes tokens to per-face bins, aligned with the token order.
pub fn decode_bins(vae: &Vae, store: &ParameterStore<f32>, tokens: &Tensor<f32>) -> Result<Vec<FaceBins>> {
    let logits = vae.decode_tokens(store, &[tokens])?.remove(0);
    Ok(argmax_bins(&logits, vae.cfg.resolution))
}

/// Assembles decoded bins into a mesh with the same face count; fails only when every face collapsed.
pub fn assemble_decoded(bins: Vec<FaceBins>, resolution: u32) -> Result<CanonicalMesh> {
    let cm = CanonicalMesh::from_face_bins(&bins, resolution, AssemblyMode::Lenient)?;
    if cm.degenerate_faces().len() == cm.faces.len() {
        return Err(Error::Reconstruction { reason: "every decoded face is degenerate".into(), partial_bins: bins });
    }
    Ok(cm)
}

/// Encoder tokens for one mesh.
pub fn encode_tokens(
    vae: &Vae,
    store: &ParameterStore<f32>,
    mesh: &PreparedMesh,
    mode: TokenMode,
) -> Result<Tensor<f32>> {
    let (mu, logvar) = vae.encode_meshes(store, &[mesh])?.remove(0);
    Ok(match mode {
        TokenMode::Mean => mu,
        TokenMode::Sample(seed) => reparameterize(&mu, &logvar, seed)?.sample,
    })
}

/// Encode, decode and re-assemble. The output keeps the input's face count.
pub fn reconstruct(vae: &Vae, store: &ParameterStore<f32>, cm: &CanonicalMesh, mode: TokenMode) -> Result<CanonicalMesh> {
    let prepared = PreparedMesh::new(cm.clone())?;
    let tokens = encode_tokens(vae, store, &prepared, mode)?;
    assemble_decoded(decode_bins(vae, store, &tokens)?, vae.cfg.resolution)
}

/// Pooled face-aligned reconstruction metrics over a dataset, using mean tokens.
pub fn evaluate_reconstruction(
    vae: &Vae,
    store: &ParameterStore<f32>,
    meshes: &[PreparedMesh],
    batch_size: usize,
) -> Result<ReconMetrics> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for chunk in meshes.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedMesh> = chunk.iter().collect();
        let latents = vae.encode_meshes(store, &refs)?;
        let mus: Vec<&Tensor<f32>> = latents.iter().map(|(mu, _)| mu).collect();
        for (logits, m) in vae.decode_tokens(store, &mus)?.iter().zip(chunk) {
            pred.extend(argmax_bins(logits, vae.cfg.resolution));
            gt.extend_from_slice(&m.bins);
        }
    }
    recon_metrics_bins(&pred, &gt, vae.cfg.resolution)
}

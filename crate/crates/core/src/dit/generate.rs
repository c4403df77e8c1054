//! Sampling face-token sequences and decoding them to meshes.

use super::condition::Conditioning;
use super::model::Dit;
use crate::autoencoder::{assemble_decoded, decode_bins, encode_tokens, PreparedMesh, TokenMode, Vae};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, gaussian_noise, repaint_complete, Branch, CfgWeights, VelocityField};
use crate::geometry::CanonicalMesh;
use crate::nn::{PaddedLayout, ParameterStore, Tensor};

/// Trained velocity model bound to fixed per-sample conditions, in the unit-scale latent space.
pub struct DitField<'a> {
    pub model: &'a Dit,
    pub store: &'a ParameterStore<f32>,
    pub layout: PaddedLayout<f32>,
    pub face_counts: Vec<usize>,
    pub features: Vec<Option<&'a Tensor<f32>>>,
}

impl<'a> DitField<'a> {
    pub fn new(
        model: &'a Dit,
        store: &'a ParameterStore<f32>,
        face_counts: &[usize],
        features: Vec<Option<&'a Tensor<f32>>>,
    ) -> Result<Self> {
        if features.len() != face_counts.len() {
            return Err(Error::validation("one feature entry per sequence is required"));
        }
        for &n in face_counts {
            model.face_index(Some(n))?;
        }
        Ok(Self { model, store, layout: PaddedLayout::new(face_counts)?, face_counts: face_counts.to_vec(), features })
    }
}

impl VelocityField<f32> for DitField<'_> {
    /// Every branch is evaluated in one forward pass over a stacked batch.
    fn velocities(&self, z: &Tensor<f32>, t: f64, branches: &[Branch]) -> Result<Vec<Tensor<f32>>> {
        let k = branches.len();
        let lengths: Vec<usize> = (0..k).flat_map(|_| self.face_counts.iter().copied()).collect();
        let layout = PaddedLayout::with_stride(&lengths, self.layout.stride)?;
        let mut x = Tensor::zeros(z.rows * k, z.cols);
        for b in 0..k {
            x.data[b * z.len()..(b + 1) * z.len()].copy_from_slice(&z.data);
        }
        let conds: Vec<Conditioning<'_, f32>> = branches
            .iter()
            .flat_map(|&br| {
                self.face_counts.iter().zip(&self.features).map(move |(&n, &f)| match br {
                    Branch::Null => Conditioning::null(),
                    Branch::Face => Conditioning { face_count: Some(n), features: None },
                    Branch::Full => Conditioning { face_count: Some(n), features: f },
                })
            })
            .collect();
        let v = self.model.predict(self.store, &x, &layout, &vec![t; lengths.len()], &conds)?;
        Ok((0..k).map(|b| v.slice_rows(b * z.rows, z.rows)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    pub cfg: CfgWeights,
    pub steps: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { cfg: CfgWeights::SINGLE_DEFAULT, steps: 50 }
    }
}

/// One sequence to sample: its length, optional condition tokens and noise seed.
#[derive(Clone, Debug)]
pub struct GenerateRequest<'a> {
    pub face_count: usize,
    pub features: Option<&'a Tensor<f32>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub mesh: CanonicalMesh,
    /// Sampled tokens in encoder latent units, one row per face.
    pub tokens: Tensor<f32>,
    pub evaluations: usize,
}

fn check_pair(dit: &Dit, vae: &Vae) -> Result<()> {
    if dit.cfg.latent_dim != vae.cfg.latent_dim {
        return Err(Error::validation(format!(
            "velocity model latent_dim {} differs from autoencoder latent_dim {}",
            dit.cfg.latent_dim, vae.cfg.latent_dim
        )));
    }
    Ok(())
}

/// Decodes tokens and assembles a mesh with one face per token.
pub fn decode_tokens_to_mesh(vae: &Vae, vae_store: &ParameterStore<f32>, tokens: &Tensor<f32>) -> Result<CanonicalMesh> {
    let bins = decode_bins(vae, vae_store, tokens)?;
    assemble_decoded(bins, vae.cfg.resolution).map_err(|e| match e {
        Error::Reconstruction { reason, .. } => {
            Error::Generation { reason, tokens: tokens.data.clone(), latent_dim: tokens.cols }
        }
        other => other,
    })
}

/// Samples every request in one padded batch. Each sequence starts from the noise of its own seed,
/// so results do not depend on the other requests. Token rows are returned even when decoding fails.
pub fn sample_tokens(
    dit: &Dit,
    dit_store: &ParameterStore<f32>,
    requests: &[GenerateRequest<'_>],
    opts: SamplingOptions,
) -> Result<(Vec<Tensor<f32>>, usize)> {
    let counts: Vec<usize> = requests.iter().map(|r| r.face_count).collect();
    let field = DitField::new(dit, dit_store, &counts, requests.iter().map(|r| r.features).collect())?;
    let c = dit.cfg.latent_dim;
    let noise: Vec<Tensor<f32>> = requests.iter().map(|r| gaussian_noise(r.face_count, c, r.seed)).collect();
    let z0 = field.layout.pad(&noise.iter().collect::<Vec<_>>())?;
    let out = euler_integrate(&field, z0, opts.steps, opts.cfg)?;
    let inv = (1.0 / dit.cfg.latent_scale) as f32;
    let tokens = field.layout.unpad(&out.z).into_iter().map(|t| t.map(|x| x * inv)).collect();
    Ok((tokens, out.evaluations))
}

/// Samples one mesh with exactly `request.face_count` faces.
pub fn generate(
    dit: &Dit,
    dit_store: &ParameterStore<f32>,
    vae: &Vae,
    vae_store: &ParameterStore<f32>,
    request: &GenerateRequest<'_>,
    opts: SamplingOptions,
) -> Result<Generated> {
    check_pair(dit, vae)?;
    let (mut tokens, evaluations) = sample_tokens(dit, dit_store, std::slice::from_ref(request), opts)?;
    let tokens = tokens.remove(0);
    let mesh = decode_tokens_to_mesh(vae, vae_store, &tokens)?;
    Ok(Generated { mesh, tokens, evaluations })
}

/// Batched [`generate`]: one padded integration for all requests, then per-sequence decoding.
/// Decoding failures are reported per request.
pub fn generate_batch(
    dit: &Dit,
    dit_store: &ParameterStore<f32>,
    vae: &Vae,
    vae_store: &ParameterStore<f32>,
    requests: &[GenerateRequest<'_>],
    opts: SamplingOptions,
) -> Result<Vec<Result<Generated>>> {
    check_pair(dit, vae)?;
    let (tokens, evaluations) = sample_tokens(dit, dit_store, requests, opts)?;
    Ok(tokens
        .into_iter()
        .map(|tokens| Ok(Generated { mesh: decode_tokens_to_mesh(vae, vae_store, &tokens)?, tokens, evaluations }))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completed {
    pub mesh: CanonicalMesh,
    /// All `total_faces` tokens; rows `0..known` are the partial mesh's encoder means.
    pub tokens: Tensor<f32>,
    pub known: usize,
}

/// Token sequence of length `total_faces` whose first rows are the encoder means of `partial`
/// (bitwise) and whose remaining rows are sampled.
#[allow(clippy::too_many_arguments)]
pub fn complete_tokens(
    dit: &Dit,
    dit_store: &ParameterStore<f32>,
    vae: &Vae,
    vae_store: &ParameterStore<f32>,
    partial: &CanonicalMesh,
    total_faces: usize,
    features: Option<&Tensor<f32>>,
    opts: SamplingOptions,
    seed: u64,
) -> Result<Tensor<f32>> {
    check_pair(dit, vae)?;
    let known = partial.faces.len();
    if known >= total_faces {
        return Err(Error::validation(format!(
            "partial mesh has {known} faces; total_faces must exceed it (got {total_faces})"
        )));
    }
    if partial.resolution != vae.cfg.resolution {
        return Err(Error::validation(format!(
            "partial mesh resolution {} differs from autoencoder resolution {}",
            partial.resolution, vae.cfg.resolution
        )));
    }
    let mu = encode_tokens(vae, vae_store, &PreparedMesh::new(partial.clone())?, TokenMode::Mean)?;
    let c = dit.cfg.latent_dim;
    let scale = dit.cfg.latent_scale as f32;
    let mut target = Tensor::zeros(total_faces, c);
    target.data[..known * c].copy_from_slice(&mu.map(|x| x * scale).data);
    let mask: Vec<bool> = (0..total_faces).map(|r| r < known).collect();
    let field = DitField::new(dit, dit_store, &[total_faces], vec![features])?;
    let out = repaint_complete(&field, &target, &mask, opts.steps, opts.cfg, seed)?;
    let inv = 1.0 / scale;
    let mut tokens = out.z.map(|x| x * inv);
    // Known rows carry the encoder means themselves, not a rescaled copy.
    tokens.data[..known * c].copy_from_slice(&mu.data);
    Ok(tokens)
}

/// Completes `partial` to a mesh of `total_faces` faces; see [`complete_tokens`].
#[allow(clippy::too_many_arguments)]
pub fn complete(
    dit: &Dit,
    dit_store: &ParameterStore<f32>,
    vae: &Vae,
    vae_store: &ParameterStore<f32>,
    partial: &CanonicalMesh,
    total_faces: usize,
    features: Option<&Tensor<f32>>,
    opts: SamplingOptions,
    seed: u64,
) -> Result<Completed> {
    let tokens = complete_tokens(dit, dit_store, vae, vae_store, partial, total_faces, features, opts, seed)?;
    let mesh = decode_tokens_to_mesh(vae, vae_store, &tokens)?;
    Ok(Completed { mesh, tokens, known: partial.faces.len() })
}

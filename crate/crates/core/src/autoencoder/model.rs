//! Encoder and decoder networks.

use std::rc::Rc;

use super::config::VaeConfig;
use super::loss::{kl_loss_var, reconstruction_loss_var};
use crate::error::{Error, Result};
use crate::geometry::{build_adjacency, encoder_features, AdjacencyGraph, CanonicalMesh, FaceBins, FACE_FEATURES};
use crate::nn::attention::{AttentionOptions, MultiHeadAttention};
use crate::nn::batch::PaddedLayout;
use crate::nn::gcn::{normalized_adjacency, GcnLayer};
use crate::nn::layers::{Linear, RmsNorm, Sandwich, SwiGlu};
use crate::nn::{Bound, Graph, ParameterStore, Real, SparseMatrix, Tensor, Var};

/// Canonical mesh with its encoder inputs precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedMesh {
    pub mesh: CanonicalMesh,
    /// Row-major `n x 16`.
    pub features: Vec<f64>,
    pub adjacency: AdjacencyGraph,
    pub bins: Vec<FaceBins>,
}

impl PreparedMesh {
    pub fn new(mesh: CanonicalMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::validation("cannot encode a mesh without faces"));
        }
        Ok(Self { features: encoder_features(&mesh), adjacency: build_adjacency(&mesh), bins: mesh.face_bins(), mesh })
    }

    pub fn face_count(&self) -> usize {
        self.mesh.faces.len()
    }
}

/// Padded encoder inputs and reconstruction targets for several meshes.
pub struct FaceBatch<F> {
    pub layout: PaddedLayout<F>,
    pub features: Tensor<F>,
    pub adjacency: Rc<SparseMatrix<F>>,
    /// One entry per coordinate slot (`rows * 9`); `None` on padding.
    pub targets: Vec<Option<usize>>,
}

impl<F: Real> FaceBatch<F> {
    pub fn new(meshes: &[&PreparedMesh]) -> Result<Self> {
        let lengths: Vec<usize> = meshes.iter().map(|m| m.face_count()).collect();
        let layout = PaddedLayout::new(&lengths)?;
        let stride = layout.stride;
        let mut features = Tensor::zeros(layout.rows(), FACE_FEATURES);
        let mut targets = vec![None; layout.rows() * 9];
        for (b, m) in meshes.iter().enumerate() {
            let off = b * stride;
            for (i, &x) in m.features.iter().enumerate() {
                features.data[off * FACE_FEATURES + i] = F::c(x);
            }
            for (f, bins) in m.bins.iter().enumerate() {
                for (s, &bin) in bins.iter().enumerate() {
                    targets[(off + f) * 9 + s] = Some(bin as usize);
                }
            }
        }
        let graphs: Vec<&AdjacencyGraph> = meshes.iter().map(|m| &m.adjacency).collect();
        let adjacency = Rc::new(normalized_adjacency(&graphs, stride));
        Ok(Self { layout, features, adjacency, targets })
    }
}

/// Self-attention and SwiGLU, each wrapped in sandwich normalization.
#[derive(Clone, Debug)]
pub(crate) struct TransformerBlock {
    attn_norm: Sandwich,
    attn: MultiHeadAttention,
    ffn_norm: Sandwich,
    ffn: SwiGlu,
}

impl TransformerBlock {
    pub(crate) fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            attn_norm: Sandwich::new(store, &format!("{name}.attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, AttentionOptions::new(heads), false),
            ffn_norm: Sandwich::new(store, &format!("{name}.ffn"), dim),
            ffn: SwiGlu::new(store, &format!("{name}.ffn"), dim),
        }
    }

    pub(crate) fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var, layout: &PaddedLayout<F>) -> Result<Var> {
        let y = self.attn_norm.pre.forward(g, p, x);
        let a = self.attn.forward(g, p, y, y, &layout.mask, &layout.positions, &layout.positions)?;
        let x = g.add(x, self.attn_norm.post.forward(g, p, a));
        Ok(self.ffn_norm.forward(g, p, x, |y| self.ffn.forward(g, p, y)))
    }
}

/// Face-token variational autoencoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    embed: Linear,
    gcn: GcnLayer,
    enc_blocks: Vec<TransformerBlock>,
    fc_mu: Linear,
    fc_logvar: Linear,
    dec_in: Linear,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: RmsNorm,
    head_hidden: Linear,
    head_out: Linear,
}

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

impl Vae {
    /// Registers all parameters in `store`. Parameter names and order depend only on `cfg`.
    pub fn new<F: Real>(cfg: &VaeConfig, store: &mut ParameterStore<F>) -> Result<Self> {
        cfg.validate()?;
        let (he, hd) = (cfg.enc_hidden, cfg.dec_hidden);
        let out = 9 * cfg.resolution as usize;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Linear::new(store, "enc.embed", FACE_FEATURES, he, true),
            gcn: GcnLayer::new(store, "enc.gcn", he, he),
            enc_blocks: (0..cfg.enc_layers).map(|i| TransformerBlock::new(store, &format!("enc.block{i}"), he, cfg.heads)).collect(),
            fc_mu: Linear::new(store, "enc.fc_mu", he, cfg.latent_dim, true),
            fc_logvar: Linear::new(store, "enc.fc_logvar", he, cfg.latent_dim, true),
            dec_in: Linear::new(store, "dec.embed", cfg.latent_dim, hd, true),
            dec_blocks: (0..cfg.dec_layers).map(|i| TransformerBlock::new(store, &format!("dec.block{i}"), hd, cfg.heads)).collect(),
            dec_norm: RmsNorm::new(store, "dec.norm", hd),
            head_hidden: Linear::new(store, "dec.head.hidden", hd, hd, true),
            head_out: Linear::new(store, "dec.head.out", hd, out, true),
        })
    }

    /// Per-face `(mu, logvar)`, each `rows x latent_dim`; logvar is clamped to `[-30, 20]`.
    pub fn encode<F: Real>(&self, g: &Graph<F>, p: &Bound, batch: &FaceBatch<F>) -> Result<(Var, Var)> {
        let x = g.constant(batch.features.clone());
        let h0 = self.embed.forward(g, p, x);
        let mut h = g.add(h0, self.gcn.forward(g, p, h0, Rc::clone(&batch.adjacency)));
        for block in &self.enc_blocks {
            h = block.forward(g, p, h, &batch.layout)?;
        }
        let mu = self.fc_mu.forward(g, p, h);
        let logvar = g.clamp(self.fc_logvar.forward(g, p, h), F::c(LOGVAR_MIN), F::c(LOGVAR_MAX));
        Ok((mu, logvar))
    }

    /// Bin logits `rows x (9 * resolution)`; slot `s` of a face owns columns `s*R .. (s+1)*R`.
    pub fn decode<F: Real>(&self, g: &Graph<F>, p: &Bound, z: Var, layout: &PaddedLayout<F>) -> Result<Var> {
        let (rows, cols) = g.shape(z);
        if rows != layout.rows() || cols != self.cfg.latent_dim {
            return Err(Error::validation(format!(
                "decoder input {rows}x{cols}, expected {}x{}",
                layout.rows(),
                self.cfg.latent_dim
            )));
        }
        let mut h = self.dec_in.forward(g, p, z);
        for block in &self.dec_blocks {
            h = block.forward(g, p, h, layout)?;
        }
        let h = self.dec_norm.forward(g, p, h);
        let h = g.silu(self.head_hidden.forward(g, p, h));
        Ok(self.head_out.forward(g, p, h))
    }

    /// `(total, ce, kl)` for one batch; `eps` is the reparameterization noise, shaped like `mu`.
    pub fn loss<F: Real>(&self, g: &Graph<F>, p: &Bound, batch: &FaceBatch<F>, eps: Tensor<F>) -> Result<(Var, Var, Var)> {
        let (mu, logvar) = self.encode(g, p, batch)?;
        if g.shape(mu) != eps.shape() {
            return Err(Error::validation(format!("noise {:?} does not match latents {:?}", eps.shape(), g.shape(mu))));
        }
        let z = g.add(mu, g.mul(g.exp(g.scale(logvar, F::c(0.5))), g.constant(eps)));
        let logits = self.decode(g, p, z, &batch.layout)?;
        let ce = reconstruction_loss_var(g, logits, &batch.targets, self.cfg.resolution);
        let kl = kl_loss_var(g, mu, logvar, &batch.layout.valid_rows());
        let total = g.add(ce, g.scale(kl, F::c(self.cfg.kl_weight)));
        Ok((total, ce, kl))
    }

    /// Batched inference: `(mu, logvar)` per mesh.
    pub fn encode_meshes<F: Real>(
        &self,
        store: &ParameterStore<F>,
        meshes: &[&PreparedMesh],
    ) -> Result<Vec<(Tensor<F>, Tensor<F>)>> {
        let batch = FaceBatch::new(meshes)?;
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let (mu, logvar) = self.encode(&g, &p, &batch)?;
        let (mu, logvar) = (g.value(mu), g.value(logvar));
        Ok(batch.layout.unpad(&mu).into_iter().zip(batch.layout.unpad(&logvar)).collect())
    }

    /// Batched inference: bin logits per token sequence.
    pub fn decode_tokens<F: Real>(&self, store: &ParameterStore<F>, tokens: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (z, layout) = crate::nn::batch::pad_batch(tokens)?;
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let z = g.constant(z);
        let logits = self.decode(&g, &p, z, &layout)?;
        let out = g.value(logits);
        if !out.all_finite() {
            return Err(Error::numeric("decoder produced non-finite logits"));
        }
        Ok(layout.unpad(&out))
    }
}

/// Per-slot argmax over `resolution` bins (lowest bin on ties).
pub fn argmax_bins<F: Real>(logits: &Tensor<F>, resolution: u32) -> Vec<FaceBins> {
    let r = resolution as usize;
    assert_eq!(logits.cols, 9 * r, "logit width does not match resolution");
    (0..logits.rows)
        .map(|i| {
            let row = logits.row(i);
            let mut out = [0u32; 9];
            for (s, o) in out.iter_mut().enumerate() {
                let slot = &row[s * r..(s + 1) * r];
                let mut best = 0;
                for (b, &x) in slot.iter().enumerate() {
                    if x > slot[best] {
                        best = b;
                    }
                }
                *o = best as u32;
            }
            out
        })
        .collect()
}

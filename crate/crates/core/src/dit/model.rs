//! Velocity transformer over padded face-token sequences.

use std::f64::consts::LN_10;

use super::condition::Conditioning;
use super::config::DitConfig;
use crate::error::{Error, Result};
use crate::nn::attention::{sequence_positions, AttentionMask, AttentionOptions, MultiHeadAttention};
use crate::nn::layers::INIT_STD;
use crate::nn::{modulate, AdaLn, Bound, Graph, Init, Linear, PaddedLayout, ParamId, ParameterStore, Real, RmsNorm, Sandwich, SwiGlu, Tensor, Var};

/// Width of the sinusoidal time features.
pub const TIME_FREQ_DIM: usize = 256;
/// `t` in `[0, 1]` is multiplied by this before the sinusoids.
pub const TIME_SCALE: f64 = 100.0;

/// `[cos(s t w_i), sin(s t w_i)]` with `w_i = 10000^(-i / half)`, one row per time.
pub fn time_features<F: Real>(t: &[f64]) -> Tensor<F> {
    let half = TIME_FREQ_DIM / 2;
    let mut out = Tensor::zeros(t.len(), TIME_FREQ_DIM);
    for (r, &tr) in t.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let w = (-(4.0 * LN_10) * i as f64 / half as f64).exp();
            let a = TIME_SCALE * tr * w;
            row[i] = F::c(a.cos());
            row[half + i] = F::c(a.sin());
        }
    }
    out
}

#[derive(Clone, Debug)]
struct CrossAttention {
    norm: Sandwich,
    attn: MultiHeadAttention,
}

/// adaLN-Zero block: modulated self-attention, optional cross-attention and a modulated
/// SwiGLU, each branch wrapped in sandwich normalization.
#[derive(Clone, Debug)]
struct DitBlock {
    ada: AdaLn,
    attn_norm: Sandwich,
    attn: MultiHeadAttention,
    cross: Option<CrossAttention>,
    ffn_norm: Sandwich,
    ffn: SwiGlu,
}

/// Cross-attention source for one batch.
struct Context<F> {
    tokens: Var,
    mask: AttentionMask<F>,
    positions: Vec<usize>,
}

impl DitBlock {
    fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, cfg: &DitConfig) -> Self {
        let d = cfg.hidden;
        let cross = cfg.use_cross_attention.then(|| {
            let opts = AttentionOptions { use_rope: false, ..AttentionOptions::new(cfg.heads) };
            CrossAttention {
                norm: Sandwich::new(store, &format!("{name}.cross"), d),
                attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, cfg.cond_dim, opts, true),
            }
        });
        Self {
            ada: AdaLn::new(store, &format!("{name}.ada"), d, d, 6),
            attn_norm: Sandwich::new(store, &format!("{name}.attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, AttentionOptions::new(cfg.heads), false),
            cross,
            ffn_norm: Sandwich::new(store, &format!("{name}.ffn"), d),
            ffn: SwiGlu::new(store, &format!("{name}.ffn"), d),
        }
    }

    fn forward<F: Real>(
        &self,
        g: &Graph<F>,
        p: &Bound,
        x: Var,
        cond: Var,
        layout: &PaddedLayout<F>,
        ctx: Option<&Context<F>>,
    ) -> Result<Var> {
        let m = self.ada.forward(g, p, cond, &layout.rows_per_sample());
        let h = modulate(g, self.attn_norm.pre.forward(g, p, x), m[0], m[1]);
        let a = self.attn.forward(g, p, h, h, &layout.mask, &layout.positions, &layout.positions)?;
        let mut x = g.add(x, g.mul(m[2], self.attn_norm.post.forward(g, p, a)));
        if let (Some(cross), Some(ctx)) = (&self.cross, ctx) {
            let h = cross.norm.pre.forward(g, p, x);
            let a = cross.attn.forward(g, p, h, ctx.tokens, &ctx.mask, &layout.positions, &ctx.positions)?;
            x = g.add(x, cross.norm.post.forward(g, p, a));
        }
        let h = modulate(g, self.ffn_norm.pre.forward(g, p, x), m[3], m[4]);
        let f = self.ffn.forward(g, p, h);
        Ok(g.add(x, g.mul(m[5], self.ffn_norm.post.forward(g, p, f))))
    }
}

/// Rectified-flow velocity model conditioned on time, face count and optional feature tokens.
#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    face_table: ParamId,
    null_context: Option<ParamId>,
    blocks: Vec<DitBlock>,
    final_ada: AdaLn,
    final_norm: RmsNorm,
    head: Linear,
}

impl Dit {
    pub fn new<F: Real>(cfg: &DitConfig, store: &mut ParameterStore<F>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::new(store, "dit.input", cfg.latent_dim, d, true),
            time_in: Linear::new(store, "dit.time.in", TIME_FREQ_DIM, d, true),
            time_out: Linear::new(store, "dit.time.out", d, d, true),
            face_table: store.add("dit.face_count.table", cfg.max_faces + 2, d, Init::TruncNormal(INIT_STD)),
            null_context: cfg
                .use_cross_attention
                .then(|| store.add("dit.context.null", 1, cfg.cond_dim, Init::TruncNormal(INIT_STD))),
            blocks: (0..cfg.layers).map(|i| DitBlock::new(store, &format!("dit.block{i}"), cfg)).collect(),
            final_ada: AdaLn::new(store, "dit.final.ada", d, d, 2),
            final_norm: RmsNorm::new(store, "dit.final.norm", d),
            head: Linear::zeroed(store, "dit.final.head", d, cfg.latent_dim, true),
        })
    }

    /// Row of the face-count table: `1..=max_faces` map to themselves, `None` to `max_faces + 1`.
    pub fn face_index(&self, face_count: Option<usize>) -> Result<usize> {
        match face_count {
            None => Ok(self.cfg.max_faces + 1),
            Some(n) if (1..=self.cfg.max_faces).contains(&n) => Ok(n),
            Some(n) => Err(Error::validation(format!("face count {n} outside 1..={}", self.cfg.max_faces))),
        }
    }

    /// Learned face-count embeddings, one row per entry.
    pub fn embed_face_count<F: Real>(&self, g: &Graph<F>, p: &Bound, counts: &[Option<usize>]) -> Result<Var> {
        let idx = counts.iter().map(|&c| self.face_index(c)).collect::<Result<Vec<_>>>()?;
        Ok(g.gather_rows(p.var(self.face_table), &idx))
    }

    /// Sinusoidal features through a two-layer SiLU map, one row per time.
    pub fn embed_time<F: Real>(&self, g: &Graph<F>, p: &Bound, t: &[f64]) -> Result<Var> {
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::validation(format!("time {bad} outside [0, 1]")));
        }
        let h = g.silu(self.time_in.forward(g, p, g.constant(time_features(t))));
        Ok(self.time_out.forward(g, p, h))
    }

    fn context<F: Real>(
        &self,
        g: &Graph<F>,
        p: &Bound,
        conds: &[Conditioning<'_, F>],
        q_len: usize,
    ) -> Result<Option<Context<F>>> {
        let Some(null) = self.null_context else {
            if conds.iter().any(|c| c.features.is_some()) {
                return Err(Error::validation("condition features given but the model has no cross-attention"));
            }
            return Ok(None);
        };
        let d = self.cfg.cond_dim;
        let lengths: Vec<usize> = conds.iter().map(|c| c.features.map_or(1, |f| f.rows)).collect();
        let stride = lengths.iter().copied().max().unwrap_or(1);
        let mut data = Tensor::zeros(conds.len() * stride, d);
        let mut use_null = Tensor::zeros(conds.len() * stride, d);
        for (b, c) in conds.iter().enumerate() {
            match c.features {
                Some(f) if f.cols != d || f.rows == 0 => {
                    return Err(Error::validation(format!("condition features {:?} do not have width {d}", f.shape())));
                }
                Some(f) => data.data[b * stride * d..(b * stride + f.rows) * d].copy_from_slice(&f.data),
                None => use_null.row_mut(b * stride).fill(F::one()),
            }
        }
        let nulls = g.gather_rows(p.var(null), &vec![0; conds.len() * stride]);
        let tokens = g.add(g.mul(nulls, g.constant(use_null)), g.constant(data));
        let mask = AttentionMask::from_key_lengths(&lengths, q_len, stride)?;
        Ok(Some(Context { tokens, mask, positions: sequence_positions(conds.len(), stride) }))
    }

    /// Velocity for a padded batch `x` (`rows x latent_dim`). `t` and `conds` hold one entry per sample.
    pub fn forward<F: Real>(
        &self,
        g: &Graph<F>,
        p: &Bound,
        x: Var,
        layout: &PaddedLayout<F>,
        t: &[f64],
        conds: &[Conditioning<'_, F>],
    ) -> Result<Var> {
        let b = layout.batch();
        if g.shape(x) != (layout.rows(), self.cfg.latent_dim) {
            return Err(Error::validation(format!(
                "dit input {:?}, expected ({}, {})",
                g.shape(x),
                layout.rows(),
                self.cfg.latent_dim
            )));
        }
        if t.len() != b || conds.len() != b {
            return Err(Error::validation(format!("{b} samples but {} times and {} conditions", t.len(), conds.len())));
        }
        let counts: Vec<Option<usize>> = conds.iter().map(|c| c.face_count).collect();
        let cond = g.add(self.embed_time(g, p, t)?, self.embed_face_count(g, p, &counts)?);
        let ctx = self.context(g, p, conds, layout.stride)?;
        let mut h = self.input.forward(g, p, x);
        for block in &self.blocks {
            h = block.forward(g, p, h, cond, layout, ctx.as_ref())?;
        }
        let m = self.final_ada.forward(g, p, cond, &layout.rows_per_sample());
        let h = modulate(g, self.final_norm.forward(g, p, h), m[0], m[1]);
        Ok(self.head.forward(g, p, h))
    }

    /// Inference on frozen parameters. Padding rows of the result are zero.
    pub fn predict<F: Real>(
        &self,
        store: &ParameterStore<F>,
        x: &Tensor<F>,
        layout: &PaddedLayout<F>,
        t: &[f64],
        conds: &[Conditioning<'_, F>],
    ) -> Result<Tensor<F>> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let out = self.forward(&g, &p, g.constant(x.clone()), layout, t, conds)?;
        let mut v = (*g.value(out)).clone();
        if !v.all_finite() {
            return Err(Error::numeric("velocity model produced non-finite output"));
        }
        for (r, ok) in layout.valid_rows().into_iter().enumerate() {
            if !ok {
                v.row_mut(r).fill(F::zero());
            }
        }
        Ok(v)
    }
}

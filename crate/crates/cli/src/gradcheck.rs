//! Finite-difference gradient suite over every differentiable block, in double precision.

use std::rc::Rc;
use std::time::Instant;

use meshflow_core::autoencoder::{FaceBatch, PreparedMesh, Vae, VaeConfig};
use meshflow_core::dit::{Conditioning, Dit, DitConfig};
use meshflow_core::geometry::{canonicalize, generate_synthetic, normalize, SyntheticShape};
use meshflow_core::nn::attention::{sequence_positions, ROPE_BASE};
use meshflow_core::nn::{
    grad_check, jitter_parameters, modulate, normalized_adjacency, projection_loss, AdaLn, AttentionMask,
    AttentionOptions, GcnLayer, GradCheckConfig, GradCheckReport, MultiHeadAttention, PaddedLayout, ParameterStore,
    Sandwich, SwiGlu, Tensor,
};
use meshflow_core::rng::SeedStream;
use meshflow_core::Result;
use rand_distr::{Distribution, StandardNormal};

/// Relative-error threshold for a passing block.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Narrow widths; seconds.
    Small,
    /// Default model widths, including the full autoencoder and velocity model.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "small" => Ok(Profile::Small),
            "desk" => Ok(Profile::Desk),
            _ => Err(format!("unknown profile {s:?} (expected small or desk)")),
        }
    }
}

/// One named check. The closure builds its own parameters and runs [`grad_check`].
pub struct GradCase {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<GradCheckReport>>,
}

impl GradCase {
    pub fn new(name: &str, run: impl Fn() -> Result<GradCheckReport> + 'static) -> Self {
        Self { name: name.to_string(), run: Box::new(run) }
    }
}

#[derive(Debug)]
pub struct CaseResult {
    pub name: String,
    pub outcome: Result<GradCheckReport>,
    pub seconds: f64,
}

impl CaseResult {
    pub fn max_rel_err(&self) -> f64 {
        self.outcome.as_ref().map_or(f64::INFINITY, |r| r.max_rel_err())
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= TOLERANCE
    }
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed).rng("gradcheck-input");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn fd_config(entries: usize) -> GradCheckConfig {
    GradCheckConfig { max_entries: entries, ..GradCheckConfig::default() }
}

fn prepared(shape: &SyntheticShape, resolution: u32) -> PreparedMesh {
    let m = generate_synthetic(shape, 0).expect("valid primitive");
    PreparedMesh::new(canonicalize(&normalize(&m).expect("normalizable"), resolution).expect("canonical"))
        .expect("non-empty mesh")
}

struct Widths {
    dim: usize,
    heads: usize,
    entries: usize,
    vae: VaeConfig,
    dit: DitConfig,
}

fn widths(profile: Profile) -> Widths {
    match profile {
        Profile::Small => Widths {
            dim: 8,
            heads: 2,
            entries: 24,
            vae: VaeConfig {
                resolution: 16,
                enc_layers: 1,
                enc_hidden: 8,
                dec_layers: 1,
                dec_hidden: 8,
                heads: 2,
                latent_dim: 3,
                kl_weight: 0.1,
            },
            dit: DitConfig {
                layers: 2,
                hidden: 16,
                heads: 2,
                latent_dim: 3,
                max_faces: 16,
                use_cross_attention: true,
                cond_dim: 4,
                latent_scale: 1.0,
            },
        },
        Profile::Desk => Widths {
            dim: 64,
            heads: 4,
            entries: 6,
            vae: VaeConfig { kl_weight: 0.1, ..VaeConfig::desk() },
            dit: DitConfig { use_cross_attention: true, ..DitConfig::desk() },
        },
    }
}

/// The block cases of a profile, in report order.
pub fn suite(profile: Profile) -> Vec<GradCase> {
    let w = widths(profile);
    let (d, h, e) = (w.dim, w.heads, w.entries);
    let mut cases = Vec::new();

    for (label, rope, qk) in [("attention", false, false), ("attention+rope", true, false), ("attention+rope+qknorm", true, true)] {
        cases.push(GradCase::new(&format!("{label} (masked)"), move || {
            let mut store = ParameterStore::<f64>::new(1);
            let opts = AttentionOptions { heads: h, use_rope: rope, rope_base: ROPE_BASE, use_qk_norm: qk };
            let attn = MultiHeadAttention::new(&mut store, "attn", d, d, opts, false);
            let layout = PaddedLayout::<f64>::new(&[3, 5])?;
            let x = randn(layout.rows(), d, 2);
            grad_check(
                &mut store,
                |g, p| {
                    let xv = g.constant(x.clone());
                    let out = attn.forward(g, p, xv, xv, &layout.mask, &layout.positions, &layout.positions)?;
                    Ok(projection_loss(g, out, 3))
                },
                &fd_config(e),
            )
        }));
    }

    cases.push(GradCase::new("cross-attention (masked context)", move || {
        let mut store = ParameterStore::<f64>::new(4);
        let opts = AttentionOptions { use_rope: false, use_qk_norm: true, ..AttentionOptions::new(h) };
        let attn = MultiHeadAttention::new(&mut store, "cross", d, 5, opts, false);
        let x = randn(8, d, 5);
        let ctx = randn(6, 5, 6);
        let mask = AttentionMask::from_key_lengths(&[2, 3], 4, 3)?;
        grad_check(
            &mut store,
            |g, p| {
                let out = attn.forward(g, p, g.constant(x.clone()), g.constant(ctx.clone()), &mask, &sequence_positions(2, 4), &sequence_positions(2, 3))?;
                Ok(projection_loss(g, out, 7))
            },
            &fd_config(e),
        )
    }));

    cases.push(GradCase::new("swiglu", move || {
        let mut store = ParameterStore::<f64>::new(8);
        let ffn = SwiGlu::new(&mut store, "ffn", d);
        let x = randn(5, d, 9);
        grad_check(&mut store, |g, p| Ok(projection_loss(g, ffn.forward(g, p, g.constant(x.clone())), 10)), &fd_config(e))
    }));

    cases.push(GradCase::new("sandwich block (rmsnorm + swiglu)", move || {
        let mut store = ParameterStore::<f64>::new(11);
        let block = Sandwich::new(&mut store, "block", d);
        let ffn = SwiGlu::new(&mut store, "block.ffn", d);
        jitter_parameters(&mut store, 0.1, 12);
        let x = randn(5, d, 13);
        grad_check(
            &mut store,
            |g, p| {
                let out = block.forward(g, p, g.constant(x.clone()), |hh| ffn.forward(g, p, hh));
                Ok(projection_loss(g, out, 14))
            },
            &fd_config(e),
        )
    }));

    cases.push(GradCase::new("adaln modulation", move || {
        let mut store = ParameterStore::<f64>::new(15);
        let ada = AdaLn::new(&mut store, "ada", 6, d, 3);
        jitter_parameters(&mut store, 0.1, 16);
        let cond = randn(2, 6, 17);
        let x = randn(5, d, 18);
        grad_check(
            &mut store,
            |g, p| {
                let m = ada.forward(g, p, g.constant(cond.clone()), &[2, 3]);
                let y = modulate(g, g.constant(x.clone()), m[0], m[1]);
                Ok(projection_loss(g, g.mul(y, m[2]), 19))
            },
            &fd_config(e),
        )
    }));

    cases.push(GradCase::new("gcn layer", move || {
        let mut store = ParameterStore::<f64>::new(20);
        let gcn = GcnLayer::new(&mut store, "gcn", 7, d);
        let a = prepared(&SyntheticShape::Box { size: [1.0, 0.6, 0.8] }, 32);
        let b = prepared(&SyntheticShape::Pyramid { base: 1.0, height: 0.7 }, 32);
        let adj = Rc::new(normalized_adjacency::<f64>(&[&a.adjacency, &b.adjacency], 12));
        let x = randn(24, 7, 21);
        grad_check(&mut store, |g, p| Ok(projection_loss(g, gcn.forward(g, p, g.constant(x.clone()), adj.clone()), 22)), &fd_config(e))
    }));

    let vae_cfg = w.vae.clone();
    cases.push(GradCase::new("autoencoder (encoder + decoder + loss)", move || {
        let r = vae_cfg.resolution;
        let a = prepared(&SyntheticShape::Pyramid { base: 1.0, height: 0.6 }, r);
        let b = prepared(&SyntheticShape::Box { size: [1.0, 0.5, 0.8] }, r);
        let mut store = ParameterStore::<f64>::new(23);
        let vae = Vae::new(&vae_cfg, &mut store)?;
        jitter_parameters(&mut store, 0.05, 24);
        let batch = FaceBatch::<f64>::new(&[&a, &b])?;
        let eps = randn(batch.layout.rows(), vae_cfg.latent_dim, 25);
        grad_check(&mut store, |g, p| Ok(vae.loss(g, p, &batch, eps.clone())?.0), &fd_config(e))
    }));

    let dit_cfg = w.dit.clone();
    cases.push(GradCase::new("velocity transformer (cross-attention on)", move || {
        let mut store = ParameterStore::<f64>::new(26);
        let dit = Dit::new(&dit_cfg, &mut store)?;
        jitter_parameters(&mut store, 0.05, 27);
        let feats = randn(2, dit_cfg.cond_dim, 28);
        let layout = PaddedLayout::<f64>::new(&[2, 3])?;
        let x = randn(layout.rows(), dit_cfg.latent_dim, 29);
        let conds = [Conditioning { face_count: Some(2), features: Some(&feats) }, Conditioning { face_count: None, features: None }];
        grad_check(
            &mut store,
            |g, p| Ok(projection_loss(g, dit.forward(g, p, g.constant(x.clone()), &layout, &[0.2, 0.7], &conds)?, 30)),
            &fd_config(e),
        )
    }));

    cases
}

/// Runs every case, timing each.
pub fn run_cases(cases: &[GradCase]) -> Vec<CaseResult> {
    cases
        .iter()
        .map(|c| {
            let start = Instant::now();
            let outcome = (c.run)();
            CaseResult { name: c.name.clone(), outcome, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

/// One line per case; failing cases also list their offending parameters. Timings go to the log
/// so the text is reproducible.
pub fn format_results(results: &[CaseResult]) -> String {
    let mut s = String::new();
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        log::info!("{} took {:.1}s", r.name, r.seconds);
        match &r.outcome {
            Ok(rep) => {
                s.push_str(&format!("{status} {:<44} max_rel_err={:.3e}\n", r.name, rep.max_rel_err()));
                if !r.passed() {
                    for p in rep.failures(TOLERANCE) {
                        s.push_str(&format!("     offender {} rel_err={:.3e}\n", p.name, p.rel_err));
                    }
                }
            }
            Err(e) => s.push_str(&format!("{status} {:<44} error: {e}\n", r.name)),
        }
    }
    s
}

//! Masked multi-head attention with optional QK-norm and rotary position embedding.

use std::rc::Rc;

use super::graph::{AttnShape, Graph, Var};
use super::layers::Linear;
use super::params::{Bound, ParameterStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;
const QK_NORM_EPS: f64 = 1e-6;

/// Additive key-padding bias: `0` for valid keys, [`Real::MASK_NEG`] for padding.
///
/// Every query row of a sample sees the same key bias, so the score-matrix mask is
/// `entry(b, i, j) = key_bias[b * k_len + j]` for all `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<F> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    key_bias: Vec<F>,
}

impl<F: Real> AttentionMask<F> {
    /// All positions valid.
    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self { batch, q_len, k_len, key_bias: vec![F::zero(); batch * k_len] }
    }

    /// Keys `0..lengths[b]` valid for sample `b`, the rest padding.
    pub fn from_key_lengths(lengths: &[usize], q_len: usize, k_len: usize) -> Result<Self> {
        let mut key_bias = Vec::with_capacity(lengths.len() * k_len);
        for &l in lengths {
            if l > k_len {
                return Err(Error::validation(format!("key length {l} exceeds padded length {k_len}")));
            }
            key_bias.extend((0..k_len).map(|j| if j < l { F::zero() } else { F::MASK_NEG }));
        }
        Ok(Self { batch: lengths.len(), q_len, k_len, key_bias })
    }

    pub fn entry(&self, b: usize, _i: usize, j: usize) -> F {
        self.key_bias[b * self.k_len + j]
    }

    pub fn key_valid(&self, b: usize, j: usize) -> bool {
        self.key_bias[b * self.k_len + j] == F::zero()
    }

    pub fn key_bias(&self) -> &[F] {
        &self.key_bias
    }

    /// Dense `q_len x k_len` bias for sample `b`.
    pub fn matrix(&self, b: usize) -> Tensor<F> {
        let mut t = Tensor::zeros(self.q_len, self.k_len);
        for i in 0..self.q_len {
            for j in 0..self.k_len {
                t.data[i * self.k_len + j] = self.entry(b, i, j);
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    pub heads: usize,
    pub use_rope: bool,
    pub rope_base: f64,
    pub use_qk_norm: bool,
}

impl AttentionOptions {
    pub fn new(heads: usize) -> Self {
        Self { heads, use_rope: true, rope_base: ROPE_BASE, use_qk_norm: true }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Query rows with no valid key; their output is zero.
    pub fully_masked_rows: usize,
}

/// `softmax(norm(q) norm(k)^T / sqrt(d) + mask) v` per head, with RoPE applied to the
/// (normalized) queries and keys.
///
/// `q` has `batch * q_len` rows, `k`/`v` have `batch * k_len` rows; positions index
/// rows of `q` and `k` respectively.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention<F: Real>(
    g: &Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask<F>,
    q_positions: &[usize],
    k_positions: &[usize],
    opts: &AttentionOptions,
) -> Result<AttentionOutput> {
    let (qr, qc) = g.shape(q);
    let (kr, kc) = g.shape(k);
    let (vr, vc) = g.shape(v);
    if qc != kc || qc != vc {
        return Err(Error::validation(format!("attention width mismatch: q {qc}, k {kc}, v {vc}")));
    }
    if kr != vr {
        return Err(Error::validation(format!("attention key/value rows mismatch: {kr} vs {vr}")));
    }
    if qr != mask.batch * mask.q_len || kr != mask.batch * mask.k_len {
        return Err(Error::validation(format!(
            "mask shape {}x{}x{} does not match q rows {qr}, k rows {kr}",
            mask.batch, mask.q_len, mask.k_len
        )));
    }
    if opts.heads == 0 || qc % opts.heads != 0 {
        return Err(Error::validation(format!("{} heads do not divide width {qc}", opts.heads)));
    }
    let dh = qc / opts.heads;
    let (mut q, mut k) = (q, k);
    if opts.use_qk_norm {
        q = g.layer_norm(q, dh, F::c(QK_NORM_EPS));
        k = g.layer_norm(k, dh, F::c(QK_NORM_EPS));
    }
    if opts.use_rope {
        if dh % 2 != 0 {
            return Err(Error::validation(format!("rope needs an even head dimension, got {dh}")));
        }
        if q_positions.len() != qr || k_positions.len() != kr {
            return Err(Error::validation("rope positions length mismatch"));
        }
        q = g.rope(q, q_positions, opts.heads, F::c(opts.rope_base));
        k = g.rope(k, k_positions, opts.heads, F::c(opts.rope_base));
    }
    let before = g.fully_masked_rows();
    let shape = AttnShape { batch: mask.batch, q_len: mask.q_len, k_len: mask.k_len, heads: opts.heads };
    let out = g.attention(q, k, v, shape, Rc::new(mask.key_bias.clone()));
    Ok(AttentionOutput { out, fully_masked_rows: g.fully_masked_rows() - before })
}

/// Applies the rotary rotation to every row of `x`, treating the whole row as one head.
pub fn rope_rotate<F: Real>(x: &Tensor<F>, positions: &[usize], base: f64) -> Result<Tensor<F>> {
    if x.cols % 2 != 0 {
        return Err(Error::validation(format!("rope needs an even dimension, got {}", x.cols)));
    }
    if positions.len() != x.rows {
        return Err(Error::validation("rope positions length mismatch"));
    }
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.rope(v, positions, 1, F::c(base));
    Ok((*g.value(out)).clone())
}

/// Position of each row in a `batch x len` row-major layout.
pub fn sequence_positions(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..len).collect()
}

/// Projections around [`masked_attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub opts: AttentionOptions,
}

impl MultiHeadAttention {
    /// `ctx_dim` is the width of the key/value source (equal to `dim` for self-attention).
    /// A zeroed output projection makes the module contribute nothing at initialization.
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        opts: AttentionOptions,
        zero_out: bool,
    ) -> Self {
        let out = if zero_out {
            Linear::zeroed(store, &format!("{name}.out"), dim, dim, true)
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim, true)
        };
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false),
            k: Linear::new(store, &format!("{name}.k"), ctx_dim, dim, false),
            v: Linear::new(store, &format!("{name}.v"), ctx_dim, dim, false),
            out,
            opts,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        g: &Graph<F>,
        p: &Bound,
        x: Var,
        ctx: Var,
        mask: &AttentionMask<F>,
        q_positions: &[usize],
        k_positions: &[usize],
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, ctx);
        let v = self.v.forward(g, p, ctx);
        let att = masked_attention(g, q, k, v, mask, q_positions, k_positions, &self.opts)?;
        Ok(self.out.forward(g, p, att.out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(heads: usize, rope: bool, qk: bool) -> AttentionOptions {
        AttentionOptions { heads, use_rope: rope, rope_base: ROPE_BASE, use_qk_norm: qk }
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn single_position_returns_value_row() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(1, 4, &[0.3, -1.0, 2.0, 0.1]));
        let k = g.constant(Tensor::from_f64(1, 4, &[1.0, 0.5, -0.2, 0.0]));
        let vv = Tensor::from_f64(1, 4, &[5.0, -6.0, 7.0, 8.5]);
        let v = g.constant(vv.clone());
        let mask = AttentionMask::full(1, 1, 1);
        let out = masked_attention(&g, q, k, v, &mask, &[0], &[0], &opts(2, true, true)).unwrap();
        assert_eq!(*g.value(out.out), vv);
    }

    #[test]
    fn masked_second_key_returns_first_value() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(2, 2, &[0.3, -1.0, 2.0, 0.1]));
        let k = g.constant(Tensor::from_f64(2, 2, &[1.0, 0.5, -0.2, 3.0]));
        let v = g.constant(Tensor::from_f64(2, 2, &[5.0, -6.0, 100.0, 200.0]));
        let mask = AttentionMask::from_key_lengths(&[1], 2, 2).unwrap();
        let out = masked_attention(&g, q, k, v, &mask, &[0, 1], &[0, 1], &opts(1, false, false)).unwrap();
        assert_eq!(g.value(out.out).data, vec![5.0, -6.0, 5.0, -6.0]);
    }

    #[test]
    fn fully_masked_sample_outputs_zero_and_flags() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_f64(4, 2, &[1.0; 8]);
        let (q, k, v) = (g.constant(t.clone()), g.constant(t.clone()), g.constant(t));
        let mask = AttentionMask::from_key_lengths(&[2, 0], 2, 2).unwrap();
        let pos = sequence_positions(2, 2);
        let out = masked_attention(&g, q, k, v, &mask, &pos, &pos, &opts(1, true, false)).unwrap();
        assert_eq!(out.fully_masked_rows, 2);
        assert_eq!(&g.value(out.out).data[4..], &[0.0; 4]);
    }

    #[test]
    fn padded_outputs_match_truncated_sequence() {
        let (len, pad, width) = (3, 5, 8);
        let data = lcg(7, pad * width * 3);
        let full = |off: usize, rows: usize| Tensor::<f64>::from_f64(rows, width, &data[off..off + rows * width]);
        let run = |rows: usize, mask: AttentionMask<f64>| {
            let g = Graph::new();
            let q = g.constant(full(0, rows));
            let k = g.constant(full(pad * width, rows));
            let v = g.constant(full(2 * pad * width, rows));
            let pos: Vec<usize> = (0..rows).collect();
            let out = masked_attention(&g, q, k, v, &mask, &pos, &pos, &opts(2, true, true)).unwrap();
            (*g.value(out.out)).clone()
        };
        // the padded run sees the same first rows for q/k/v as the truncated run
        let _ = full;
        let g_trunc = {
            let g = Graph::new();
            let mk = |off: usize| Tensor::<f64>::from_f64(len, width, &data[off..off + len * width]);
            let q = g.constant(mk(0));
            let k = g.constant(mk(pad * width));
            let v = g.constant(mk(2 * pad * width));
            let pos: Vec<usize> = (0..len).collect();
            let out = masked_attention(&g, q, k, v, &AttentionMask::full(1, len, len), &pos, &pos, &opts(2, true, true))
                .unwrap();
            (*g.value(out.out)).clone()
        };
        let padded = run(pad, AttentionMask::from_key_lengths(&[len], pad, pad).unwrap());
        for r in 0..len {
            for c in 0..width {
                assert!((padded.at(r, c) - g_trunc.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qk_norm_bounds_scores() {
        // recompute the scores the op sees and check |score| <= sqrt(d)
        let width = 16;
        let data = lcg(11, 2 * 6 * width);
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(6, width, &data[..6 * width]).map(|x| x * 1e3));
        let k = g.constant(Tensor::from_f64(6, width, &data[6 * width..]).map(|x| x * 1e-3));
        let qn = g.value(g.layer_norm(q, width, 1e-6));
        let kn = g.value(g.layer_norm(k, width, 1e-6));
        let s = crate::nn::tensor::matmul(&qn, false, &kn, true);
        let bound = (width as f64).sqrt();
        for &x in &s.data {
            assert!((x / bound).abs() <= bound + 1e-4);
        }
    }

    #[test]
    fn rope_identity_at_zero_and_norm_preserving() {
        let x = Tensor::<f64>::from_f64(2, 6, &lcg(3, 12));
        let r0 = rope_rotate(&x, &[0, 0], ROPE_BASE).unwrap();
        assert_eq!(r0, x);
        let r = rope_rotate(&x, &[5, 17], ROPE_BASE).unwrap();
        for i in 0..2 {
            let a: f64 = x.row(i).iter().map(|v| v * v).sum();
            let b: f64 = r.row(i).iter().map(|v| v * v).sum();
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-6);
        }
        assert!(rope_rotate(&Tensor::<f64>::zeros(1, 5), &[1], ROPE_BASE).is_err());
    }

    #[test]
    fn rope_inner_product_depends_on_offset_only() {
        let q = Tensor::<f64>::from_f64(1, 8, &lcg(21, 8));
        let k = Tensor::<f64>::from_f64(1, 8, &lcg(22, 8));
        let dot = |m: usize, n: usize| {
            let a = rope_rotate(&q, &[m], ROPE_BASE).unwrap();
            let b = rope_rotate(&k, &[n], ROPE_BASE).unwrap();
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(3, 1) - dot(7, 5)).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(2, 4));
        let k = g.constant(Tensor::zeros(2, 6));
        let mask = AttentionMask::full(1, 2, 2);
        let r = masked_attention(&g, q, k, k, &mask, &[0, 1], &[0, 1], &opts(1, false, false));
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}

//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a leaf created with [`Graph::leaf`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{matmul, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: receives the output gradient and a per-parent "needs gradient"
/// flag, returns one optional gradient per parent.
pub type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Sparse matrix in coordinate form, used for graph propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, F)>,
}

impl<F: Real> SparseMatrix<F> {
    pub fn to_dense(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            t.data[r * self.cols + c] += v;
        }
        t
    }
}

/// Batch layout for the fused attention op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    masked_rows: Cell<usize>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn col_sums<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for (o, &x) in out.data.iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), masked_rows: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of query rows that found no unmasked key so far; their attention output is zero.
    pub fn fully_masked_rows(&self) -> usize {
        self.masked_rows.get()
    }

    fn push_node(&self, value: Tensor<F>, parents: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, requires_grad, backward });
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        self.push_node(value, Vec::new(), true, None)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push_node(value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation with a hand-written backward pass.
    pub fn custom(
        &self,
        value: Tensor<F>,
        parents: &[Var],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let back: Option<BackwardFn<F>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push_node(value, parents.iter().map(|p| p.0).collect(), requires_grad, back)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() requires a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = matmul(&av, false, &bv, false);
        self.custom(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| matmul(g, false, &bv, true)),
                need[1].then(|| matmul(&av, true, g, false)),
            ]
        })
    }

    /// `x * w + b` with `w` stored `in x out` and `b` as `1 x out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = matmul(&xv, false, &wv, false);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols), "bias shape mismatch");
            for r in 0..out.rows {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.custom(out, &parents, move |g, need| {
            let mut v = vec![
                need[0].then(|| matmul(g, false, &wv, true)),
                need[1].then(|| matmul(&xv, true, g, false)),
            ];
            if has_bias {
                v.push(need[2].then(|| col_sums(g)));
            }
            v
        })
    }

    /// Sparse constant matrix times `x`.
    pub fn spmm(&self, a: Rc<SparseMatrix<F>>, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(a.cols, xv.rows, "spmm shape mismatch");
        let mut out = Tensor::zeros(a.rows, xv.cols);
        for &(r, c, w) in &a.entries {
            let src = xv.row(c).to_vec();
            for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                *o += w * s;
            }
        }
        let cols = xv.cols;
        let x_rows = xv.rows;
        self.custom(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(x_rows, cols);
            for &(r, c, w) in &a.entries {
                let gr = g.row(r).to_vec();
                for (o, s) in dx.row_mut(c).iter_mut().zip(gr) {
                    *o += w * s;
                }
            }
            vec![Some(dx)]
        })
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.custom(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom(out, &[a, b], |g, need| vec![Some(g.clone()), need[1].then(|| g.map(|x| -x))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.custom(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)),
                need[1].then(|| g.zip_map(&av, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(out, &[a], move |g, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.custom(out, &[a], |g, _| vec![Some(g.clone())])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.shape(), (1, av.cols), "add_row shape mismatch");
        let mut out = (*av).clone();
        for i in 0..out.rows {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&rv.data) {
                *o += x;
            }
        }
        self.custom(out, &[a, r], |g, need| vec![Some(g.clone()), need[1].then(|| col_sums(g))])
    }

    /// Repeats row `i` of `a` `counts[i]` times, stacking the copies in order.
    pub fn repeat_rows(&self, a: Var, counts: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, counts.len(), "repeat_rows count mismatch");
        let total: usize = counts.iter().sum();
        let mut out = Tensor::zeros(total, av.cols);
        let mut r = 0;
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.row_mut(r).copy_from_slice(av.row(i));
                r += 1;
            }
        }
        let counts = counts.to_vec();
        let (rows, cols) = av.shape();
        self.custom(out, &[a], move |g, _| {
            let mut d = Tensor::zeros(rows, cols);
            let mut r = 0;
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                    r += 1;
                }
            }
            vec![Some(d)]
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let sig = |x: F| F::one() / (F::one() + (-x).exp());
        let out = av.map(|x| x * sig(x));
        self.custom(out, &[a], move |g, _| {
            let d = av.zip_map(g, |x, gy| {
                let s = sig(x);
                gy * s * (F::one() + x * (F::one() - s))
            });
            vec![Some(d)]
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = Rc::new(self.value(a).map(|x| x.exp()));
        let y = Rc::clone(&out);
        self.custom((*out).clone(), &[a], move |g, _| vec![Some(g.zip_map(&y, |gy, yy| gy * yy))])
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.max(lo).min(hi));
        self.custom(out, &[a], move |g, _| {
            vec![Some(av.zip_map(g, |x, gy| if x >= lo && x <= hi { gy } else { F::zero() }))]
        })
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::new(rows, cols, av.data.clone());
        let (r0, c0) = av.shape();
        self.custom(out, &[a], move |g, _| vec![Some(Tensor::new(r0, c0, g.data.clone()))])
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let s: F = av.data.iter().copied().sum();
        let (r, c) = av.shape();
        self.custom(Tensor::scalar(s), &[a], move |g, _| vec![Some(Tensor::full(r, c, g.item()))])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = F::c(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }

    /// Mean over all elements of rows flagged valid.
    pub fn masked_mean(&self, a: Var, row_valid: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, row_valid.len(), "masked_mean mask length mismatch");
        let valid = row_valid.iter().filter(|&&v| v).count();
        assert!(valid > 0, "masked_mean with no valid rows");
        let denom = F::c((valid * av.cols) as f64);
        let mut s = F::zero();
        for (r, &ok) in row_valid.iter().enumerate() {
            if ok {
                for &x in av.row(r) {
                    s += x;
                }
            }
        }
        let mask = row_valid.to_vec();
        let (rows, cols) = av.shape();
        self.custom(Tensor::scalar(s / denom), &[a], move |g, _| {
            let gv = g.item() / denom;
            let mut d = Tensor::zeros(rows, cols);
            for (r, &ok) in mask.iter().enumerate() {
                if ok {
                    d.row_mut(r).fill(gv);
                }
            }
            vec![Some(d)]
        })
    }

    // ---- shape ----

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let (rows, cols) = av.shape();
        self.custom(out, &[a], move |g, _| {
            let mut d = Tensor::zeros(rows, cols);
            for r in 0..rows {
                d.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
            }
            vec![Some(d)]
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows;
        assert!(vals.iter().all(|v| v.rows == rows), "concat_cols row mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| v.cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        self.custom(out, parts, move |g, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut d = Tensor::zeros(rows, w);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    Some(d)
                })
                .collect()
        })
    }

    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(idx.len(), tv.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < tv.rows, "gather_rows index {i} out of range");
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let idx = idx.to_vec();
        let (rows, cols) = tv.shape();
        self.custom(out, &[table], move |g, _| {
            let mut d = Tensor::zeros(rows, cols);
            for (r, &i) in idx.iter().enumerate() {
                for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            vec![Some(d)]
        })
    }

    // ---- normalization ----

    /// LayerNorm without affine parameters over consecutive column groups of width `group`.
    pub fn layer_norm(&self, a: Var, group: usize, eps: F) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.cols % group == 0, "layer_norm group must divide width");
        let n = F::c(group as f64);
        let mut out = Tensor::zeros(av.rows, av.cols);
        let mut inv_std = Vec::with_capacity(av.rows * av.cols / group);
        for r in 0..av.rows {
            for (src, dst) in av.row(r).chunks(group).zip(out.row_mut(r).chunks_mut(group)) {
                let mu = src.iter().copied().sum::<F>() / n;
                let var = src.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() / n;
                let is = F::one() / (var + eps).sqrt();
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = (x - mu) * is;
                }
                inv_std.push(is);
            }
        }
        let y = Rc::new(out.clone());
        self.custom(out, &[a], move |g, _| {
            let mut d = Tensor::zeros(y.rows, y.cols);
            let mut k = 0;
            for r in 0..y.rows {
                let yr = y.row(r).to_vec();
                let gr = g.row(r).to_vec();
                for ((dy, yy), dd) in gr.chunks(group).zip(yr.chunks(group)).zip(d.row_mut(r).chunks_mut(group)) {
                    let mg = dy.iter().copied().sum::<F>() / n;
                    let mgy = dy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<F>() / n;
                    let is = inv_std[k];
                    k += 1;
                    for ((o, &a), &b) in dd.iter_mut().zip(dy).zip(yy) {
                        *o = is * (a - mg - b * mgy);
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Root-mean-square normalization with a learnable `1 x n` gain.
    pub fn rms_norm(&self, a: Var, gain: Var, eps: F) -> Var {
        let (av, gv) = (self.value(a), self.value(gain));
        assert_eq!(gv.shape(), (1, av.cols), "rms_norm gain shape mismatch");
        let n = F::c(av.cols as f64);
        let mut out = Tensor::zeros(av.rows, av.cols);
        let mut inv = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let x = av.row(r);
            let ir = F::one() / (x.iter().map(|&v| v * v).sum::<F>() / n + eps).sqrt();
            for ((o, &xx), &gg) in out.row_mut(r).iter_mut().zip(x).zip(&gv.data) {
                *o = xx * ir * gg;
            }
            inv.push(ir);
        }
        self.custom(out, &[a, gain], move |g, need| {
            let mut dx = Tensor::zeros(av.rows, av.cols);
            let mut dg = Tensor::zeros(1, av.cols);
            for r in 0..av.rows {
                let x = av.row(r);
                let gr = g.row(r);
                let ir = inv[r];
                let mut dot = F::zero();
                for ((&gy, &gg), &xx) in gr.iter().zip(&gv.data).zip(x) {
                    dot += gy * gg * xx;
                }
                let coef = dot * ir * ir / n;
                for (((o, &gy), &gg), &xx) in dx.row_mut(r).iter_mut().zip(gr).zip(&gv.data).zip(x) {
                    *o = ir * (gy * gg - xx * coef);
                }
                for ((o, &gy), &xx) in dg.data.iter_mut().zip(gr).zip(x) {
                    *o += gy * xx * ir;
                }
            }
            vec![need[0].then_some(dx), need[1].then_some(dg)]
        })
    }

    // ---- attention ----

    /// Rotary position embedding on interleaved pairs within each head.
    pub fn rope(&self, a: Var, positions: &[usize], heads: usize, base: F) -> Var {
        let av = self.value(a);
        assert_eq!(positions.len(), av.rows, "rope positions length mismatch");
        assert!(heads > 0 && av.cols % heads == 0, "rope heads must divide width");
        let dh = av.cols / heads;
        assert!(dh % 2 == 0, "rope head dimension must be even");
        let table = rope_table::<F>(positions, dh, base);
        let out = apply_rope(&av, &table, heads, dh, false);
        self.custom(out, &[a], move |g, _| vec![Some(apply_rope(g, &table, heads, dh, true))])
    }

    /// Fused multi-head scaled dot-product attention with an additive per-key bias.
    ///
    /// `q` is `(batch * q_len) x (heads * dh)`, `k`/`v` are `(batch * k_len) x (heads * dh)`,
    /// `key_bias` has one entry per key row. Query rows whose keys are all masked produce zeros.
    pub fn attention(&self, q: Var, k: Var, v: Var, shape: AttnShape, key_bias: Rc<Vec<F>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnShape { batch, q_len, k_len, heads } = shape;
        assert_eq!(qv.rows, batch * q_len, "attention query rows mismatch");
        assert_eq!(kv.rows, batch * k_len, "attention key rows mismatch");
        assert_eq!(vv.rows, batch * k_len, "attention value rows mismatch");
        assert_eq!(qv.cols, kv.cols, "attention q/k width mismatch");
        assert_eq!(qv.cols, vv.cols, "attention q/v width mismatch");
        assert_eq!(key_bias.len(), batch * k_len, "attention key bias length mismatch");
        assert!(heads > 0 && qv.cols % heads == 0, "attention heads must divide width");
        let dh = qv.cols / heads;
        let scale = F::one() / F::c(dh as f64).sqrt();
        let half = F::MASK_NEG / F::c(2.0);

        let mut out = Tensor::zeros(qv.rows, qv.cols);
        let mut probs: Vec<Tensor<F>> = Vec::with_capacity(batch * heads);
        let mut masked = 0;
        for b in 0..batch {
            let bias = &key_bias[b * k_len..(b + 1) * k_len];
            let dead = bias.iter().all(|&x| x <= half);
            if dead {
                masked += q_len;
            }
            for h in 0..heads {
                let qb = head_block(&qv, b * q_len, q_len, h, dh);
                let kb = head_block(&kv, b * k_len, k_len, h, dh);
                let vb = head_block(&vv, b * k_len, k_len, h, dh);
                let mut s = matmul(&qb, false, &kb, true);
                if dead {
                    s = Tensor::zeros(q_len, k_len);
                } else {
                    for i in 0..q_len {
                        let row = s.row_mut(i);
                        for (x, &bb) in row.iter_mut().zip(bias) {
                            *x = *x * scale + bb;
                        }
                        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let mut z = F::zero();
                        for x in row.iter_mut() {
                            *x = (*x - mx).exp();
                            z += *x;
                        }
                        for x in row.iter_mut() {
                            *x /= z;
                        }
                    }
                }
                let o = matmul(&s, false, &vb, false);
                scatter_head(&mut out, &o, b * q_len, h, dh);
                probs.push(s);
            }
        }
        self.masked_rows.set(self.masked_rows.get() + masked);

        self.custom(out, &[q, k, v], move |g, need| {
            let mut dq = Tensor::zeros(qv.rows, qv.cols);
            let mut dk = Tensor::zeros(kv.rows, kv.cols);
            let mut dv = Tensor::zeros(vv.rows, vv.cols);
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[b * heads + h];
                    let go = head_block(g, b * q_len, q_len, h, dh);
                    if need[2] {
                        let dvb = matmul(p, true, &go, false);
                        scatter_head(&mut dv, &dvb, b * k_len, h, dh);
                    }
                    if !(need[0] || need[1]) {
                        continue;
                    }
                    let vb = head_block(&vv, b * k_len, k_len, h, dh);
                    let mut ds = matmul(&go, false, &vb, true);
                    for i in 0..q_len {
                        let pr = p.row(i);
                        let dr = ds.row_mut(i);
                        let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in dr.iter_mut().zip(pr) {
                            *d = pp * (*d - dot) * scale;
                        }
                    }
                    if need[0] {
                        let kb = head_block(&kv, b * k_len, k_len, h, dh);
                        scatter_head(&mut dq, &matmul(&ds, false, &kb, false), b * q_len, h, dh);
                    }
                    if need[1] {
                        let qb = head_block(&qv, b * q_len, q_len, h, dh);
                        scatter_head(&mut dk, &matmul(&ds, true, &qb, false), b * k_len, h, dh);
                    }
                }
            }
            vec![need[0].then_some(dq), need[1].then_some(dk), need[2].then_some(dv)]
        })
    }

    // ---- losses ----

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "cross_entropy target count mismatch");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy with no targets");
        let denom = F::c(count as f64);
        let mut soft = Tensor::zeros(lv.rows, lv.cols);
        let mut loss = F::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < lv.cols, "cross_entropy target {t} out of range");
            let row = lv.row(r);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            loss += lz - row[t];
            for (s, &x) in soft.row_mut(r).iter_mut().zip(row) {
                *s = (x - lz).exp();
            }
        }
        let targets = targets.to_vec();
        self.custom(Tensor::scalar(loss / denom), &[logits], move |g, _| {
            let gv = g.item() / denom;
            let mut d = soft.clone();
            for (r, t) in targets.iter().enumerate() {
                match *t {
                    Some(t) => {
                        d.data[r * d.cols + t] -= F::one();
                        for x in d.row_mut(r) {
                            *x *= gv;
                        }
                    }
                    None => d.row_mut(r).fill(F::zero()),
                }
            }
            vec![Some(d)]
        })
    }
}

fn head_block<F: Real>(t: &Tensor<F>, row0: usize, rows: usize, h: usize, dh: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(rows, dh);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&t.row(row0 + i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head<F: Real>(t: &mut Tensor<F>, block: &Tensor<F>, row0: usize, h: usize, dh: usize) {
    for i in 0..block.rows {
        let dst = &mut t.row_mut(row0 + i)[h * dh..(h + 1) * dh];
        for (d, &s) in dst.iter_mut().zip(block.row(i)) {
            *d += s;
        }
    }
}

/// Per-position `(cos, sin)` for each rotated pair.
fn rope_table<F: Real>(positions: &[usize], dh: usize, base: F) -> Vec<Vec<(F, F)>> {
    let half = dh / 2;
    positions
        .iter()
        .map(|&p| {
            (0..half)
                .map(|i| {
                    let freq = base.f64().powf(-2.0 * i as f64 / dh as f64);
                    let ang = p as f64 * freq;
                    (F::c(ang.cos()), F::c(ang.sin()))
                })
                .collect()
        })
        .collect()
}

fn apply_rope<F: Real>(x: &Tensor<F>, table: &[Vec<(F, F)>], heads: usize, dh: usize, inverse: bool) -> Tensor<F> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let src = x.row(r);
        let rot = &table[r];
        let dst = out.row_mut(r);
        for h in 0..heads {
            for (i, &(c, s)) in rot.iter().enumerate() {
                let j = h * dh + 2 * i;
                let s = if inverse { -s } else { s };
                let (a, b) = (src[j], src[j + 1]);
                dst[j] = a * c - b * s;
                dst[j + 1] = a * s + b * c;
            }
        }
    }
    out
}

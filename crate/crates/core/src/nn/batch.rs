//! Variable-length sequences packed into zero-padded `[batch * stride, width]` row blocks.

use super::attention::{sequence_positions, AttentionMask};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Row layout, key-padding mask and positions for a padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedLayout<F> {
    pub lengths: Vec<usize>,
    pub stride: usize,
    pub mask: AttentionMask<F>,
    pub positions: Vec<usize>,
}

impl<F: Real> PaddedLayout<F> {
    /// Pads every sequence to the longest length.
    pub fn new(lengths: &[usize]) -> Result<Self> {
        let stride = lengths.iter().copied().max().ok_or_else(|| Error::validation("empty batch"))?;
        Self::with_stride(lengths, stride)
    }

    pub fn with_stride(lengths: &[usize], stride: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        if lengths.contains(&0) {
            return Err(Error::validation("batch contains an empty sequence"));
        }
        let mask = AttentionMask::from_key_lengths(lengths, stride, stride)?;
        Ok(Self { lengths: lengths.to_vec(), stride, mask, positions: sequence_positions(lengths.len(), stride) })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.lengths.len() * self.stride
    }

    pub fn valid_rows(&self) -> Vec<bool> {
        self.lengths.iter().flat_map(|&l| (0..self.stride).map(move |j| j < l)).collect()
    }

    /// Number of rows per sample, for broadcasting per-sample vectors over tokens.
    pub fn rows_per_sample(&self) -> Vec<usize> {
        vec![self.stride; self.lengths.len()]
    }

    /// Stacks sequences into the padded layout; padding rows are exactly zero.
    pub fn pad(&self, seqs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if seqs.len() != self.lengths.len() {
            return Err(Error::validation("sequence count does not match layout"));
        }
        let cols = seqs[0].cols;
        let mut out = Tensor::zeros(self.rows(), cols);
        for (b, s) in seqs.iter().enumerate() {
            if s.cols != cols || s.rows != self.lengths[b] {
                return Err(Error::validation(format!(
                    "sequence {b} has shape {:?}, expected ({}, {cols})",
                    s.shape(),
                    self.lengths[b]
                )));
            }
            out.data[b * self.stride * cols..(b * self.stride + s.rows) * cols].copy_from_slice(&s.data);
        }
        Ok(out)
    }

    /// Inverse of [`pad`](Self::pad): valid rows of each sample.
    pub fn unpad(&self, t: &Tensor<F>) -> Vec<Tensor<F>> {
        assert_eq!(t.rows, self.rows(), "unpad row count mismatch");
        self.lengths.iter().enumerate().map(|(b, &l)| t.slice_rows(b * self.stride, l)).collect()
    }
}

/// Zero-pads a list of sequences to the longest one.
pub fn pad_batch<F: Real>(seqs: &[&Tensor<F>]) -> Result<(Tensor<F>, PaddedLayout<F>)> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.rows).collect();
    let layout = PaddedLayout::new(&lengths)?;
    Ok((layout.pad(seqs)?, layout))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, base: f64) -> Tensor<f64> {
        Tensor::new(rows, 3, (0..rows * 3).map(|i| base + i as f64).collect())
    }

    #[test]
    fn equal_lengths_have_no_padding() {
        let (a, b) = (seq(4, 0.0), seq(4, 100.0));
        let (_, layout) = pad_batch(&[&a, &b]).unwrap();
        assert!(layout.mask.key_bias().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_sample_gets_masked_columns() {
        let (a, b) = (seq(2, 0.0), seq(5, 100.0));
        let (t, layout) = pad_batch(&[&a, &b]).unwrap();
        let masked = (0..5).filter(|&j| !layout.mask.key_valid(0, j)).count();
        assert_eq!(masked, 3);
        assert!((0..5).all(|j| layout.mask.key_valid(1, j)));
        assert!(t.data[6..15].iter().all(|&x| x == 0.0));
        assert_eq!(layout.unpad(&t), vec![a, b]);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(pad_batch::<f64>(&[]).is_err());
        let e = Tensor::<f64>::zeros(0, 3);
        assert!(pad_batch(&[&e]).is_err());
    }
}

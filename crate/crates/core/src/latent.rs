//! Encoder outputs in their flattened form.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::model::tensor::Matrix;

/// An encoder output `z` (or its clipped / noised forms).
///
/// Stored token-major: `tokens` rows of `width` features each, so the flat
/// vector of length `n = tokens · width` is just `data`. The recurrent
/// baseline uses a single row of width `2 · hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub tokens: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentVector {
    pub fn new(tokens: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if tokens * width != data.len() {
            return invalid_arg(format!(
                "latent of {} values cannot be viewed as {tokens}x{width}",
                data.len()
            ));
        }
        Ok(LatentVector { tokens, width, data })
    }

    pub fn zeros(tokens: usize, width: usize) -> Self {
        LatentVector {
            tokens,
            width,
            data: vec![0.0; tokens * width],
        }
    }

    /// Flattens a per-token matrix (token index outer, feature index inner).
    pub fn flatten(per_token: &Matrix) -> Self {
        LatentVector {
            tokens: per_token.rows,
            width: per_token.cols,
            data: per_token.data.clone(),
        }
    }

    /// Rebuilds the `tokens × width` matrix from a flat vector.
    pub fn unflatten(flat: &[f64], tokens: usize, width: usize) -> Result<Matrix> {
        if flat.len() != tokens * width {
            return invalid_arg(format!(
                "flat latent has length {}, expected {tokens}·{width} = {}",
                flat.len(),
                tokens * width
            ));
        }
        Ok(Matrix::from_vec(tokens, width, flat.to_vec()))
    }

    pub fn per_token(&self) -> Matrix {
        Matrix::from_vec(self.tokens, self.width, self.data.clone())
    }

    pub fn dimension(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_is_token_major() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let z = LatentVector::flatten(&m);
        assert_eq!(z.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(LatentVector::unflatten(&z.data, 2, 2).unwrap(), m);
    }

    #[test]
    fn toy_dimension() {
        assert_eq!(LatentVector::zeros(20, 32).dimension(), 640);
    }

    #[test]
    fn unflatten_rejects_length_mismatch() {
        assert!(LatentVector::unflatten(&[1.0, 2.0, 3.0], 2, 2).is_err());
    }
}

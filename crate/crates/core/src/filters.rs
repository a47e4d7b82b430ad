//! Convolution filter banks and the keep/prune partition over their filters.

use serde::{Deserialize, Serialize};

use crate::error::{MfpError, Result};
use crate::tensor::Tensor;

/// Weights of one convolution layer, shaped `[out_channels, in_channels, K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: Tensor,
}

impl FilterBank {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(MfpError::InvalidArgument(format!(
                "filter bank must be [out, in, K, K], got {s:?}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Length of one flattened filter, `in_channels * K * K`.
    pub fn filter_len(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn filter(&self, j: usize) -> &[f64] {
        let g = self.filter_len();
        &self.weights.data()[j * g..(j + 1) * g]
    }

    pub fn filter_mut(&mut self, j: usize) -> &mut [f64] {
        let g = self.filter_len();
        &mut self.weights.data_mut()[j * g..(j + 1) * g]
    }

    pub fn is_zero_filter(&self, j: usize) -> bool {
        self.filter(j).iter().all(|&v| v == 0.0)
    }
}

/// Row `j` of the result is filter `j` flattened row-major, giving a
/// `[out_channels, in_channels * K * K]` matrix.
pub fn flatten_filters(layer: &FilterBank) -> Tensor {
    layer
        .weights()
        .clone()
        .reshape(&[layer.out_channels(), layer.filter_len()])
        .expect("filter bank shape is consistent")
}

/// Inverse of [`flatten_filters`].
pub fn unflatten_filters(rows: Tensor, in_channels: usize, kernel: usize) -> Result<FilterBank> {
    rows.expect_rank("unflatten_filters", 2)?;
    let out = rows.shape()[0];
    FilterBank::new(rows.reshape(&[out, in_channels, kernel, kernel])?)
}

/// Keep/prune flags for the filters of one layer; `keep[j] == false` marks
/// filter `j` as pruned. Keep and prune sets are complementary by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn all_keep(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    /// Mask of length `n` pruning exactly `pruned` (indices must be `< n`).
    pub fn from_pruned(n: usize, pruned: &[usize]) -> Result<Self> {
        let mut keep = vec![true; n];
        for &j in pruned {
            if j >= n {
                return Err(MfpError::InvalidMask(format!("index {j} out of range for {n} filters")));
            }
            keep[j] = false;
        }
        Ok(Self { keep })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.len() - self.kept_count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.keep[j]).collect()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.keep[j]).collect()
    }

    pub fn is_all_keep(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// Number of filters removed from a layer of `n` at rate `rate`: `floor(rate * n)`.
///
/// A 1e-9 slack absorbs representation error so that e.g. `0.29 * 100` floors to 29.
pub fn pruned_count_for_rate(n: usize, rate: f64) -> usize {
    ((rate * n as f64 + 1e-9).floor().max(0.0) as usize).min(n)
}

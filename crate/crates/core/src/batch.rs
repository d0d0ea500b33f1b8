//! Core tensor shapes: weight matrices and activation batches.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense weight matrix of one linear layer, `out_channels x in_channels`.
pub type WeightMatrix = Array2<f64>;

/// A `B x N x C` batch of activations, stored as a `(B*N) x C` token matrix.
///
/// Every operation in the toolkit treats activations token-row-wise; the
/// batch/token split is only needed for the fluctuation metric and container
/// round-trips, so the 3-D shape is carried as bookkeeping next to a 2-D view.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    batches: usize,
    tokens_per_batch: usize,
    data: Array2<f64>,
}

impl ActivationBatch {
    /// Wrap a `(B*N) x C` token matrix.
    pub fn new(batches: usize, tokens_per_batch: usize, data: Array2<f64>) -> Result<Self> {
        if batches == 0 || tokens_per_batch == 0 || data.ncols() == 0 {
            return Err(Error::EmptyInput("activation batch has a zero dim".into()));
        }
        if data.nrows() != batches * tokens_per_batch {
            return Err(Error::DimMismatch(format!(
                "expected {}x{} = {} token rows, got {}",
                batches,
                tokens_per_batch,
                batches * tokens_per_batch,
                data.nrows()
            )));
        }
        Ok(Self {
            batches,
            tokens_per_batch,
            data,
        })
    }

    /// Single-batch constructor for `N x C` data.
    pub fn from_tokens(data: Array2<f64>) -> Result<Self> {
        let tokens = data.nrows();
        Self::new(1, tokens, data)
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.tokens_per_batch
    }

    /// Total token rows (B*N).
    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// `(B*N) x C` view.
    pub fn tokens(&self) -> &Array2<f64> {
        &self.data
    }

    /// Replace the token matrix, keeping the batch split. The channel count
    /// may change (rotations preserve it, but callers may project).
    pub fn with_tokens(&self, data: Array2<f64>) -> Result<Self> {
        Self::new(self.batches, self.tokens_per_batch, data)
    }

    /// Logical element count B*N*C.
    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// First `n` batches (all batches when `n >= B`).
    pub fn take_batches(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("cannot take zero batches".into()));
        }
        if n >= self.batches {
            return Ok(self.clone());
        }
        let rows = n * self.tokens_per_batch;
        let data = self.data.slice(ndarray::s![..rows, ..]).to_owned();
        Self::new(n, self.tokens_per_batch, data)
    }
}

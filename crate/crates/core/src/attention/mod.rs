//! Attention tensors, head aggregation and per-token importance scores.

mod atns;

pub use atns::{read_atns, read_atns_file, write_atns, write_atns_file, AtnsError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rankmetrics::{RankError, ScoreVector};

/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("need at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("need at least 2 tokens, got {0}")]
    TooFewTokens(usize),
    #[error("need at least one head")]
    NoHeads,
    #[error("layout covers {layout} tokens but the sequence has {seq_len}")]
    LayoutMismatch { layout: usize, seq_len: usize },
    #[error("no visual tokens in layout")]
    NoVisualTokens,
    #[error("expected {expected} attention weights, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("negative or non-finite weight {value} at layer {layer} head {head} row {row}")]
    BadWeight {
        layer: usize,
        head: usize,
        row: usize,
        value: f64,
    },
    #[error("row {row} of layer {layer} head {head} sums to {sum}")]
    RowSum {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Where the language and visual tokens sit in the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_language: usize,
    pub n_visual: usize,
    pub visual_offset: usize,
}

impl TokenLayout {
    /// Language tokens first, visual tokens after them.
    pub fn language_first(n_language: usize, n_visual: usize) -> Self {
        Self {
            n_language,
            n_visual,
            visual_offset: n_language,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.n_language + self.n_visual
    }

    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.visual_offset..self.visual_offset + self.n_visual
    }

    fn validate(&self, seq_len: usize) -> Result<(), AttentionError> {
        if self.n_visual == 0 {
            return Err(AttentionError::NoVisualTokens);
        }
        if self.seq_len() != seq_len || self.visual_offset + self.n_visual > seq_len {
            return Err(AttentionError::LayoutMismatch {
                layout: self.seq_len(),
                seq_len,
            });
        }
        Ok(())
    }
}

/// Row-stochastic attention weights for every layer and head of one frame,
/// stored layer-major, then head-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    seq_len: usize,
    layout: TokenLayout,
    data: Vec<f64>,
}

impl AttentionStack {
    pub fn new(
        layers: usize,
        heads: usize,
        seq_len: usize,
        layout: TokenLayout,
        data: Vec<f64>,
    ) -> Result<Self, AttentionError> {
        let stack = Self::new_unchecked(layers, heads, seq_len, layout, data)?;
        stack.check_rows()?;
        Ok(stack)
    }

    /// Validates shapes only; row sums are left to [`AttentionStack::check_rows`].
    pub(crate) fn new_unchecked(
        layers: usize,
        heads: usize,
        seq_len: usize,
        layout: TokenLayout,
        data: Vec<f64>,
    ) -> Result<Self, AttentionError> {
        if layers < 2 {
            return Err(AttentionError::TooFewLayers(layers));
        }
        if heads == 0 {
            return Err(AttentionError::NoHeads);
        }
        if seq_len < 2 {
            return Err(AttentionError::TooFewTokens(seq_len));
        }
        layout.validate(seq_len)?;
        let expected = layers * heads * seq_len * seq_len;
        if data.len() != expected {
            return Err(AttentionError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            layout,
            data,
        })
    }

    /// Every weight is finite and non-negative, every row sums to 1 within
    /// [`ROW_SUM_TOLERANCE`].
    pub fn check_rows(&self) -> Result<(), AttentionError> {
        let n = self.seq_len;
        for layer in 0..self.layers {
            for head in 0..self.heads {
                let m = self.matrix(layer, head);
                for row in 0..n {
                    let r = &m[row * n..(row + 1) * n];
                    if let Some(&value) = r.iter().find(|v| !v.is_finite() || **v < 0.0) {
                        return Err(AttentionError::BadWeight {
                            layer,
                            head,
                            row,
                            value,
                        });
                    }
                    let sum: f64 = r.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(AttentionError::RowSum { layer, head, row, sum });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The N x N matrix of one head, row-major.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let nn = self.seq_len * self.seq_len;
        let start = (layer * self.heads + head) * nn;
        &self.data[start..start + nn]
    }

    /// Column sums of the head-mean attention matrix over all N columns.
    pub fn column_mass(&self, layer: usize) -> Result<Vec<f64>, AttentionError> {
        if layer >= self.layers {
            return Err(AttentionError::LayerOutOfRange {
                layer,
                layers: self.layers,
            });
        }
        let n = self.seq_len;
        let mut mean = vec![0.0; n * n];
        for head in 0..self.heads {
            for (acc, &w) in mean.iter_mut().zip(self.matrix(layer, head)) {
                *acc += w;
            }
        }
        let inv = 1.0 / self.heads as f64;
        let mut cols = vec![0.0; n];
        for row in mean.chunks_exact(n) {
            for (c, &w) in cols.iter_mut().zip(row) {
                *c += w * inv;
            }
        }
        Ok(cols)
    }

    /// Total head-mean column mass minus N. Zero for an intact stack.
    pub fn mass_defect(&self, layer: usize) -> Result<f64, AttentionError> {
        Ok(self.column_mass(layer)?.iter().sum::<f64>() - self.seq_len as f64)
    }
}

/// Scores for the visual tokens, one series entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScoreSeries {
    pub from_layer: usize,
    pub per_layer: Vec<ScoreVector>,
}

/// Attention mass each visual token receives at `layer`: the column sum of
/// the head-mean attention matrix, summed over every source row.
pub fn importance_scores(stack: &AttentionStack, layer: usize) -> Result<ScoreVector, AttentionError> {
    let cols = stack.column_mass(layer)?;
    Ok(ScoreVector::new(cols[stack.layout.visual_range()].to_vec())?)
}

pub fn score_series(stack: &AttentionStack, from_layer: usize) -> Result<LayerScoreSeries, AttentionError> {
    if from_layer + 2 > stack.layers {
        return Err(AttentionError::LayerOutOfRange {
            layer: from_layer,
            layers: stack.layers,
        });
    }
    let per_layer = (from_layer..stack.layers)
        .map(|l| importance_scores(stack, l))
        .collect::<Result<_, _>>()?;
    Ok(LayerScoreSeries { from_layer, per_layer })
}

/// Model dimensions for the analytic cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
}

/// Analytic attention-block FLOPs for a run that keeps `n_active` visual
/// tokens from layer `prune_from` onward.
///
/// Per layer: `2 N^2 d` for QK^T and AV plus `4 N d^2` for the four
/// projections. Softmax and MLP are not counted, so only ratios between runs
/// carry meaning.
pub fn flops_estimate(n_active: usize, layout: TokenLayout, dims: ModelDims, prune_from: usize) -> f64 {
    let d = dims.d_model as f64;
    let per_layer = |n: usize| {
        let n = n as f64;
        2.0 * n * n * d + 4.0 * n * d * d
    };
    let full = per_layer(layout.seq_len());
    let pruned = per_layer(layout.n_language + n_active);
    (0..dims.layers)
        .map(|l| if l < prune_from { full } else { pruned })
        .sum()
}

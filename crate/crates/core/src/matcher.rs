//! Predicted-to-ground-truth object matching under a combined spatial and
//! semantic cost:
//!
//! `cost = lambda_spatial * (1 - IoU) + lambda_semantic * (1 - sim(label_pred, label_gt))`

use serde::{Deserialize, Serialize};

use crate::assignment::solve_lexicographic;
use crate::geometry::{iou, DegenerateBox};
use crate::scene_graph::ObjectNode;
use crate::text::lemma_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub spatial: f64,
    pub semantic: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { spatial: 1.0, semantic: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("label is empty")]
    EmptyLabel,
    #[error(transparent)]
    Degenerate(#[from] DegenerateBox),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred index, gt index)` in ascending pred order.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// 1 for labels with identical lemma sets, otherwise Jaccard overlap of the
/// lemmatized, case-folded token sets.
pub fn semantic_similarity(a: &str, b: &str) -> Result<f64, MatchError> {
    let (ta, tb) = (lemma_tokens(a), lemma_tokens(b));
    if ta.is_empty() || tb.is_empty() {
        return Err(MatchError::EmptyLabel);
    }
    if ta == tb {
        return Ok(1.0);
    }
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    Ok(inter as f64 / union as f64)
}

pub fn pair_cost(pred: &ObjectNode, gt: &ObjectNode, weights: CostWeights) -> Result<f64, MatchError> {
    let overlap = iou(&pred.bbox, &gt.bbox)?;
    let sim = semantic_similarity(&pred.label, &gt.label)?;
    Ok(weights.spatial * (1.0 - overlap) + weights.semantic * (1.0 - sim))
}

/// Minimum-cost matching of cardinality `min(pred, gt)`.
///
/// Ties resolve to the lowest gt index for the lowest pred index first.
pub fn match_objects(pred: &[ObjectNode], gt: &[ObjectNode], weights: CostWeights) -> Result<MatchResult, MatchError> {
    let mut costs = Vec::with_capacity(pred.len() * gt.len());
    for p in pred {
        for g in gt {
            costs.push(pair_cost(p, g, weights)?);
        }
    }
    Ok(match_cost_matrix(&costs, pred.len(), gt.len()))
}

/// Matching on an explicit row-major `rows x cols` cost matrix.
pub fn match_cost_matrix(costs: &[f64], rows: usize, cols: usize) -> MatchResult {
    assert_eq!(costs.len(), rows * cols, "cost matrix shape");
    if rows == 0 || cols == 0 {
        return MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
            unmatched_pred: (0..rows).collect(),
            unmatched_gt: (0..cols).collect(),
        };
    }
    let n = rows.max(cols);
    let sentinel = costs.iter().fold(0.0_f64, |m, &c| m.max(c)) + 1.0;
    let mut square = vec![sentinel; n * n];
    for r in 0..rows {
        square[r * n..r * n + cols].copy_from_slice(&costs[r * cols..(r + 1) * cols]);
    }
    let solution = solve_lexicographic(&square, n, rows);

    let mut pairs = Vec::new();
    let mut unmatched_pred = Vec::new();
    let mut gt_taken = vec![false; cols];
    for (r, &c) in solution.assignment.iter().enumerate().take(rows) {
        if c < cols {
            pairs.push((r, c));
            gt_taken[c] = true;
        } else {
            unmatched_pred.push(r);
        }
    }
    let unmatched_gt = (0..cols).filter(|&c| !gt_taken[c]).collect();
    let total_cost = pairs.iter().map(|&(r, c)| costs[r * cols + c]).sum();
    MatchResult { pairs, total_cost, unmatched_pred, unmatched_gt }
}

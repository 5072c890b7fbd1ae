//! Accuracy over cumulative query sets and multi-seed aggregation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::SeenClassMask;
use crate::model::{predict, GraphInput, ModelError, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("empty query set")]
    EmptyQuery,
    #[error("query label {0} is not visible")]
    HiddenLabel(usize),
    #[error("{nodes} query nodes but {labels} labels")]
    LengthMismatch { nodes: usize, labels: usize },
    #[error("no classes are visible")]
    NothingVisible,
    #[error("runs disagree in shape: {0}")]
    ShapeMismatch(&'static str),
    #[error("no runs to aggregate")]
    NoRuns,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Highest-scoring visible class of `row`; ties go to the lowest class id.
pub fn argmax_visible(logits: &Tensor, row: usize, visible: &[usize]) -> usize {
    let r = logits.row(row);
    let mut best = visible[0];
    for &c in &visible[1..] {
        if r[c] > r[best] {
            best = c;
        }
    }
    best
}

/// Number of `nodes` whose prediction matches the paired label.
pub fn count_correct(logits: &Tensor, nodes: &[usize], labels: &[usize], mask: &SeenClassMask) -> Result<usize, EvalError> {
    if nodes.len() != labels.len() {
        return Err(EvalError::LengthMismatch { nodes: nodes.len(), labels: labels.len() });
    }
    let visible = mask.visible();
    if visible.is_empty() {
        return Err(EvalError::NothingVisible);
    }
    let mut correct = 0;
    for (&n, &y) in nodes.iter().zip(labels) {
        if !mask.is_visible(y) {
            return Err(EvalError::HiddenLabel(y));
        }
        if argmax_visible(logits, n, &visible) == y {
            correct += 1;
        }
    }
    Ok(correct)
}

pub fn accuracy_from_logits(logits: &Tensor, nodes: &[usize], labels: &[usize], mask: &SeenClassMask) -> Result<f64, EvalError> {
    if nodes.is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    Ok(count_correct(logits, nodes, labels, mask)? as f64 / nodes.len() as f64)
}

/// Eval-mode accuracy of `params` on `query_nodes` with paired `labels`.
pub fn evaluate_accuracy(
    params: &ParamSet,
    input: &GraphInput,
    query_nodes: &[usize],
    labels: &[usize],
    mask: &SeenClassMask,
) -> Result<f64, EvalError> {
    if query_nodes.is_empty() {
        return Err(EvalError::EmptyQuery);
    }
    accuracy_from_logits(&predict(params, input)?, query_nodes, labels, mask)
}

/// Accuracy after one stage of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    /// 0 for the base stage, `i` after novel task `i`.
    pub stage: usize,
    pub seen_classes: usize,
    /// Accuracy over the union of all visible query sets.
    pub overall: f64,
    /// Accuracy on each visible task's query set, base first.
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<StageRow>,
}

impl AccuracyMatrix {
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn last(&self) -> Option<&StageRow> {
        self.rows.last()
    }

    /// Problems with the matrix shape or value ranges; empty when valid.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            if row.stage != i {
                out.push("stage index out of order");
            }
            if row.per_task.len() != i + 1 {
                out.push("row i must have i+1 per-task entries");
            }
            if !(0.0..=1.0).contains(&row.overall) || row.per_task.iter().any(|a| !(0.0..=1.0).contains(a)) {
                out.push("accuracy outside [0,1]");
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd { mean, std: libm::sqrt(var) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub stage: usize,
    pub overall: MeanStd,
    pub per_task: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub rows: Vec<AggregateRow>,
}

/// Entrywise mean and population standard deviation over runs.
pub fn aggregate(runs: &[AccuracyMatrix]) -> Result<AggregateReport, EvalError> {
    let first = runs.first().ok_or(EvalError::NoRuns)?;
    for r in runs {
        if r.rows.len() != first.rows.len() {
            return Err(EvalError::ShapeMismatch("stage count"));
        }
        if r.rows.iter().zip(&first.rows).any(|(a, b)| a.per_task.len() != b.per_task.len()) {
            return Err(EvalError::ShapeMismatch("per-task width"));
        }
    }
    let rows = (0..first.rows.len())
        .map(|s| {
            let overall: Vec<f64> = runs.iter().map(|r| r.rows[s].overall).collect();
            let per_task = (0..first.rows[s].per_task.len())
                .map(|t| mean_std(&runs.iter().map(|r| r.rows[s].per_task[t]).collect::<Vec<_>>()))
                .collect();
            AggregateRow { stage: s, overall: mean_std(&overall), per_task }
        })
        .collect();
    Ok(AggregateReport { runs: runs.len(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mask(total: usize, visible: &[usize]) -> SeenClassMask {
        SeenClassMask::with_visible(total, visible)
    }

    #[test]
    fn one_hot_logits_are_perfect() {
        let labels = [2usize, 0, 1, 2];
        let mut data = vec![0.0; 12];
        for (r, &y) in labels.iter().enumerate() {
            data[r * 3 + y] = 1.0;
        }
        let logits = Tensor::matrix(4, 3, data);
        let acc = accuracy_from_logits(&logits, &[0, 1, 2, 3], &labels, &mask(3, &[0, 1, 2])).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn ties_go_to_lowest_visible_class() {
        let logits = Tensor::zeros(&[5, 4]);
        let m = mask(4, &[0, 1, 2, 3]);
        let nodes = [0, 1, 2, 3, 4];
        assert_eq!(accuracy_from_logits(&logits, &nodes, &[0; 5], &m).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&logits, &nodes, &[3; 5], &m).unwrap(), 0.0);
        // the lowest *visible* class wins
        let m = mask(4, &[1, 3]);
        assert_eq!(accuracy_from_logits(&logits, &nodes, &[1; 5], &m).unwrap(), 1.0);
    }

    #[test]
    fn hidden_columns_never_win() {
        let logits = Tensor::matrix(1, 3, vec![0.0, 1.0, 9.0]);
        let acc = accuracy_from_logits(&logits, &[0], &[1], &mask(3, &[0, 1])).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn errors() {
        let logits = Tensor::zeros(&[2, 2]);
        let m = mask(2, &[0]);
        assert_eq!(accuracy_from_logits(&logits, &[], &[], &m), Err(EvalError::EmptyQuery));
        assert_eq!(accuracy_from_logits(&logits, &[0], &[1], &m), Err(EvalError::HiddenLabel(1)));
    }

    fn matrix(vals: &[(f64, &[f64])]) -> AccuracyMatrix {
        AccuracyMatrix {
            rows: vals
                .iter()
                .enumerate()
                .map(|(i, (o, p))| StageRow { stage: i, seen_classes: 2 * (i + 1), overall: *o, per_task: p.to_vec() })
                .collect(),
        }
    }

    #[test]
    fn single_run_has_zero_spread() {
        let a = matrix(&[(0.9, &[0.9]), (0.7, &[0.6, 0.8])]);
        assert!(a.violations().is_empty());
        let agg = aggregate(&[a]).unwrap();
        for row in &agg.rows {
            assert_eq!(row.overall.std, 0.0);
            assert!(row.per_task.iter().all(|m| m.std == 0.0));
        }
    }

    #[test]
    fn two_point_formula() {
        let a = matrix(&[(0.9, &[0.9]), (0.6, &[0.5, 0.7])]);
        let b = matrix(&[(0.5, &[0.5]), (0.7, &[0.6, 0.8])]);
        let agg = aggregate(&[a, b]).unwrap();
        let o = agg.rows[0].overall;
        assert!((o.mean - 0.7).abs() < 1e-15);
        assert!((o.std - 0.2).abs() < 1e-15);
        let t = agg.rows[1].per_task[1];
        assert!((t.mean - 0.75).abs() < 1e-15);
        assert!((t.std - 0.05).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = matrix(&[(0.9, &[0.9])]);
        let b = matrix(&[(0.9, &[0.9]), (0.7, &[0.6, 0.8])]);
        assert!(matches!(aggregate(&[a, b]), Err(EvalError::ShapeMismatch(_))));
        assert_eq!(aggregate(&[]), Err(EvalError::NoRuns));
    }

    #[test]
    fn malformed_matrix_is_reported() {
        let a = matrix(&[(1.2, &[0.9, 0.1])]);
        assert_eq!(a.violations().len(), 2);
    }
}

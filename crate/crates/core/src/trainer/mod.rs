//! Optimizers, meta-training and the incremental stage.

mod buffer;
mod incremental;
mod meta;
mod optim;

pub use buffer::*;
pub use incremental::*;
pub use meta::*;
pub use optim::*;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::episodes::EpisodeError;
use crate::eval::EvalError;
use crate::graph::{normalize_adjacency_with, GraphDataset, Normalization};
use crate::losses::{KdSir, LossError, SeenClassMask};
use crate::model::{GraphInput, ModelError, HIDDEN};

/// How the base-stage parameters are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaAlgorithm {
    /// Full-batch Adam on base support cross-entropy.
    Plain,
    /// Each pseudo-task adapts independently from the shared initialization.
    Maml,
    /// Pseudo-tasks are chained; one outer step through the whole sequence.
    Mctf,
}

/// Which part of the graph forward passes may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    /// All nodes and edges at every stage; only labels arrive over time.
    #[default]
    Transductive,
    /// Propagation restricted to nodes of classes seen so far.
    InducedSubgraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub weight_decay: f64,
    pub inner_steps: usize,
    pub meta_epochs: usize,
    pub inc_finetune_steps: usize,
    pub dropout: f64,
    pub meta: MetaAlgorithm,
    pub use_kd: bool,
    pub use_sir: bool,
    /// Apply the KD/SIR terms during meta-training too, not only in the
    /// incremental stage.
    pub meta_cl_loss: bool,
    /// Outer cross-entropy over all query sets so far instead of the current
    /// one.
    pub outer_ce_on_union: bool,
    /// Store one node per base class in the incremental buffer before the
    /// first novel task.
    pub seed_base_buffer: bool,
    pub visibility: Visibility,
    pub normalization: Normalization,
    pub hidden: (usize, usize),
    /// Abort when any loss exceeds this value.
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.005,
            outer_lr: 0.005,
            weight_decay: 5e-4,
            inner_steps: 1,
            meta_epochs: 300,
            inc_finetune_steps: 5,
            dropout: 0.5,
            meta: MetaAlgorithm::Mctf,
            use_kd: true,
            use_sir: true,
            meta_cl_loss: true,
            outer_ce_on_union: false,
            seed_base_buffer: true,
            visibility: Visibility::Transductive,
            normalization: Normalization::Symmetric,
            hidden: HIDDEN,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg| Err(TrainError::Config(msg));
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.inner_steps < 1 {
            return bad("inner_steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.hidden.0 < 1 || self.hidden.1 < 1 {
            return bad("hidden widths must be positive");
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be positive");
        }
        Ok(())
    }

    pub fn use_mctf(&self) -> bool {
        self.meta == MetaAlgorithm::Mctf
    }

    /// Regularizer for the meta stage.
    pub fn meta_plugin(&self) -> KdSir {
        if self.meta_cl_loss {
            KdSir::new(self.use_kd, self.use_sir)
        } else {
            KdSir::new(false, false)
        }
    }

    pub fn incremental_plugin(&self) -> KdSir {
        KdSir::new(self.use_kd, self.use_sir)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error("{phase} loss diverged at step {step}: {loss}")]
    Diverged { phase: &'static str, step: usize, loss: f64 },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Instrumentation accumulated over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub gradient_calls: u64,
    pub second_order_calls: u64,
    pub kd_evals: u64,
    pub sir_evals: u64,
    /// Largest tape observed in any single step.
    pub peak_tape_nodes: u64,
}

impl Counters {
    fn record_tape(&mut self, tape: &crate::autodiff::Tape) {
        self.gradient_calls += tape.gradient_calls() as u64;
        self.second_order_calls += tape.higher_order_calls() as u64;
        self.peak_tape_nodes = self.peak_tape_nodes.max(tape.len() as u64);
    }

    fn record_plugin(&mut self, plugin: &KdSir) {
        self.kd_evals += plugin.kd_evals();
        self.sir_evals += plugin.sir_evals();
    }

    pub fn merge(&mut self, other: &Counters) {
        self.gradient_calls += other.gradient_calls;
        self.second_order_calls += other.second_order_calls;
        self.kd_evals += other.kd_evals;
        self.sir_evals += other.sir_evals;
        self.peak_tape_nodes = self.peak_tape_nodes.max(other.peak_tape_nodes);
    }
}

pub(crate) fn guard(loss: f64, limit: f64, phase: &'static str, step: usize) -> Result<(), TrainError> {
    if loss.is_finite() && loss <= limit {
        Ok(())
    } else {
        Err(TrainError::Diverged { phase, step, loss })
    }
}

/// Builds forward-pass inputs under a visibility policy.
pub struct StageInputs<'d> {
    dataset: &'d GraphDataset,
    visibility: Visibility,
    normalization: Normalization,
    full: GraphInput,
}

impl<'d> StageInputs<'d> {
    pub fn new(dataset: &'d GraphDataset, visibility: Visibility, normalization: Normalization) -> Result<Self, TrainError> {
        let adj = normalize_adjacency_with(dataset.edges(), dataset.num_nodes(), normalization)
            .expect("dataset edges are validated");
        let full = GraphInput::new(adj, dataset.features())?;
        Ok(Self { dataset, visibility, normalization, full })
    }

    pub fn dataset(&self) -> &'d GraphDataset {
        self.dataset
    }

    /// The input for a stage in which the classes of `mask` are visible.
    pub fn input_for(&self, mask: &SeenClassMask) -> Result<GraphInput, TrainError> {
        match self.visibility {
            Visibility::Transductive => Ok(self.full.clone()),
            Visibility::InducedSubgraph => {
                let visible: Vec<bool> = self.dataset.labels().iter().map(|&y| mask.is_visible(y)).collect();
                let edges: Vec<_> =
                    self.dataset.edges().iter().copied().filter(|&(u, v)| visible[u] && visible[v]).collect();
                let adj = normalize_adjacency_with(&edges, self.dataset.num_nodes(), self.normalization)
                    .expect("dataset edges are validated");
                Ok(GraphInput::new(adj, self.dataset.features())?)
            }
        }
    }
}

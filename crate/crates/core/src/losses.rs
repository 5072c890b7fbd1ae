//! Loss terms for the three training phases and the continual-learning
//! extension point.
//!
//! Every phase loss has the shape `CE(batch) + regularizer`, where the
//! regularizer comes from a [`ContinualLoss`] implementation. The default,
//! [`KdSir`], combines mean-squared distillation against a frozen teacher with
//! cross-entropy on a single replayed node per seen class.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, OnceCell};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::model::{gcn_forward, predict, ForwardMode, GraphInput, ModelError, ParamSet, ParamVars};
use crate::tensor::Tensor;
use crate::trainer::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} belongs to a class that is not visible yet")]
    HiddenLabel(usize),
    #[error("{rows} logit rows but {labels} labels")]
    RowMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Classes encountered so far. Only visible classes take part in the softmax
/// normalizer and in distillation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenClassMask {
    seen: Vec<bool>,
}

impl SeenClassMask {
    pub fn new(total_classes: usize) -> Self {
        Self { seen: vec![false; total_classes] }
    }

    pub fn with_visible(total_classes: usize, classes: &[usize]) -> Self {
        let mut m = Self::new(total_classes);
        m.reveal(classes);
        m
    }

    pub fn reveal(&mut self, classes: &[usize]) {
        for &c in classes {
            self.seen[c] = true;
        }
    }

    pub fn is_visible(&self, class: usize) -> bool {
        self.seen.get(class).copied().unwrap_or(false)
    }

    /// Visible class ids in increasing order.
    pub fn visible(&self) -> Vec<usize> {
        self.seen.iter().enumerate().filter(|(_, &s)| s).map(|(c, _)| c).collect()
    }

    pub fn count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn total(&self) -> usize {
        self.seen.len()
    }
}

fn zero<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean over rows of `-log softmax` restricted to the visible columns.
pub fn masked_cross_entropy<'t>(logits: Var<'t>, labels: &[usize], mask: &SeenClassMask) -> Result<Var<'t>, LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let rows = logits.value().rows();
    if rows != labels.len() {
        return Err(LossError::RowMismatch { rows, labels: labels.len() });
    }
    let visible = mask.visible();
    let mut onehot = Tensor::zeros(&[rows, visible.len()]);
    for (r, &label) in labels.iter().enumerate() {
        let pos = visible.binary_search(&label).map_err(|_| LossError::HiddenLabel(label))?;
        onehot.data_mut()[r * visible.len() + pos] = 1.0;
    }
    let x = logits.select_cols(&visible);
    let picked = x.mul(logits.tape().constant(onehot)).sum_cols();
    Ok(x.logsumexp_rows().sub(picked).mean())
}

/// `(1 / (b c)) * ||teacher - student||^2` over the `rows` and visible columns,
/// given full-graph logits. The teacher side is a constant.
pub fn kd_from_logits<'t>(
    teacher: &Tensor,
    student: Var<'t>,
    rows: &[usize],
    mask: &SeenClassMask,
) -> Result<Var<'t>, LossError> {
    if rows.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let visible = mask.visible();
    let target = teacher.select_rows(rows).transpose().select_rows(&visible).transpose();
    let pred = student.select_rows(rows).select_cols(&visible);
    let scale = 1.0 / (rows.len() * visible.len()) as f64;
    Ok(pred.sub(student.tape().constant(target)).square().sum().scale(scale))
}

/// Distillation between a frozen teacher and the student, both evaluated
/// without dropout.
pub fn kd_loss<'t>(
    teacher: &ParamSet,
    student: &ParamVars<'t>,
    rows: &[usize],
    input: &GraphInput,
    mask: &SeenClassMask,
) -> Result<Var<'t>, LossError> {
    let t = predict(teacher, input)?;
    let s = gcn_forward(student, input, ForwardMode::Eval)?;
    kd_from_logits(&t, s, rows, mask)
}

/// Cross-entropy on the buffered nodes; exact zero for an empty buffer.
pub fn sir_from_logits<'t>(
    student: Var<'t>,
    buffer: &ReplayBuffer,
    mask: &SeenClassMask,
) -> Result<Var<'t>, LossError> {
    if buffer.is_empty() {
        return Ok(zero(student.tape()));
    }
    let (nodes, labels) = buffer.rows();
    masked_cross_entropy(student.select_rows(&nodes), &labels, mask)
}

pub fn sir_loss<'t>(
    params: &ParamVars<'t>,
    buffer: &ReplayBuffer,
    input: &GraphInput,
    mask: &SeenClassMask,
) -> Result<Var<'t>, LossError> {
    if buffer.is_empty() {
        return Ok(zero(params.tape()));
    }
    let logits = gcn_forward(params, input, ForwardMode::Eval)?;
    sir_from_logits(logits, buffer, mask)
}

/// Frozen parameter snapshot whose Eval-mode logits are computed on demand.
pub struct Teacher<'a> {
    params: ParamSet,
    input: &'a GraphInput,
    logits: OnceCell<Tensor>,
}

impl<'a> Teacher<'a> {
    pub fn new(params: ParamSet, input: &'a GraphInput) -> Self {
        Self { params, input, logits: OnceCell::new() }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn logits(&self) -> Result<&Tensor, LossError> {
        if let Some(l) = self.logits.get() {
            return Ok(l);
        }
        let l = predict(&self.params, self.input)?;
        Ok(self.logits.get_or_init(|| l))
    }
}

/// Everything a regularizer hook may look at.
pub struct LossContext<'a, 't> {
    /// Full-graph logits of the parameters being trained.
    pub student: Var<'t>,
    pub teacher: &'a Teacher<'a>,
    pub buffer: &'a ReplayBuffer,
    /// Query nodes of earlier pseudo-tasks, distilled in the outer phase.
    pub past_queries: &'a [usize],
    pub mask: &'a SeenClassMask,
    pub stage: usize,
}

/// Continual-learning regularizer plugged into all three phases.
pub trait ContinualLoss {
    fn inner_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError>;
    fn outer_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError>;
    fn incremental_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError>;
}

/// No regularization: every hook is zero.
pub struct PlainCe;

impl ContinualLoss for PlainCe {
    fn inner_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        Ok(zero(ctx.student.tape()))
    }
    fn outer_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        Ok(zero(ctx.student.tape()))
    }
    fn incremental_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        Ok(zero(ctx.student.tape()))
    }
}

/// Distillation plus single-instance replay, each switchable for ablations.
/// Counts how often each term is actually evaluated.
#[derive(Debug, Default)]
pub struct KdSir {
    pub use_kd: bool,
    pub use_sir: bool,
    kd_evals: Cell<u64>,
    sir_evals: Cell<u64>,
}

impl KdSir {
    pub fn new(use_kd: bool, use_sir: bool) -> Self {
        Self { use_kd, use_sir, ..Self::default() }
    }

    pub fn kd_evals(&self) -> u64 {
        self.kd_evals.get()
    }

    pub fn sir_evals(&self) -> u64 {
        self.sir_evals.get()
    }

    fn kd<'t>(&self, ctx: &LossContext<'_, 't>, rows: &[usize]) -> Result<Var<'t>, LossError> {
        if !self.use_kd || rows.is_empty() {
            return Ok(zero(ctx.student.tape()));
        }
        self.kd_evals.set(self.kd_evals.get() + 1);
        kd_from_logits(ctx.teacher.logits()?, ctx.student, rows, ctx.mask)
    }

    fn sir<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        if !self.use_sir || ctx.buffer.is_empty() {
            return Ok(zero(ctx.student.tape()));
        }
        self.sir_evals.set(self.sir_evals.get() + 1);
        sir_from_logits(ctx.student, ctx.buffer, ctx.mask)
    }

    fn buffered_terms<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        let (nodes, _) = ctx.buffer.rows();
        Ok(self.kd(ctx, &nodes)?.add(self.sir(ctx)?))
    }
}

impl ContinualLoss for KdSir {
    fn inner_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        self.buffered_terms(ctx)
    }

    // The outer phase sees no support data, hence no replay term.
    fn outer_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        self.kd(ctx, ctx.past_queries)
    }

    fn incremental_term<'t>(&self, ctx: &LossContext<'_, 't>) -> Result<Var<'t>, LossError> {
        self.buffered_terms(ctx)
    }
}

/// Rows of the student logits and their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub nodes: &'a [usize],
    pub labels: &'a [usize],
}

fn batch_ce<'t>(ctx: &LossContext<'_, 't>, batch: Batch<'_>) -> Result<Var<'t>, LossError> {
    if batch.nodes.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    masked_cross_entropy(ctx.student.select_rows(batch.nodes), batch.labels, ctx.mask)
}

/// Inner-loop loss: CE on the pseudo-task support plus the inner hook.
pub fn inner_loss<'t>(
    ctx: &LossContext<'_, 't>,
    support: Batch<'_>,
    plugin: &dyn ContinualLoss,
) -> Result<Var<'t>, LossError> {
    Ok(batch_ce(ctx, support)?.add(plugin.inner_term(ctx)?))
}

/// Outer-loop loss: CE on the query batch plus the outer hook.
pub fn outer_loss<'t>(
    ctx: &LossContext<'_, 't>,
    query: Batch<'_>,
    plugin: &dyn ContinualLoss,
) -> Result<Var<'t>, LossError> {
    Ok(batch_ce(ctx, query)?.add(plugin.outer_term(ctx)?))
}

/// Incremental-stage loss: CE on the novel support plus the incremental hook.
pub fn incremental_loss<'t>(
    ctx: &LossContext<'_, 't>,
    support: Batch<'_>,
    plugin: &dyn ContinualLoss,
) -> Result<Var<'t>, LossError> {
    Ok(batch_ce(ctx, support)?.add(plugin.incremental_term(ctx)?))
}

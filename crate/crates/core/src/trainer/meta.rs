use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, guard, sgd_step_differentiable, update_buffer, AdamState, BufferScope, Counters, MetaAlgorithm,
    ReplayBuffer, StageInputs, TrainConfig, TrainError};
use crate::autodiff::{Tape, Var};
use crate::episodes::{sample_meta_episode, MetaEpisode, PseudoTask, SplitConfig, TaskSpec};
use crate::losses::{inner_loss, masked_cross_entropy, outer_loss, Batch, ContinualLoss, KdSir, LossContext,
    SeenClassMask, Teacher};
use crate::model::{gcn_forward, init_params_with_widths, ForwardMode, GraphInput, ParamSet, ParamVars};
use crate::tensor::Tensor;
use crate::{seeded_rng, RunRng};

/// Base-stage data shared by every meta epoch.
pub struct MetaData<'a> {
    pub input: &'a GraphInput,
    pub base: &'a TaskSpec,
    pub split: &'a SplitConfig,
    pub num_classes: usize,
}

/// Everything random about one meta epoch, fixed up front so the epoch
/// objective is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub episode: MetaEpisode,
    pub buffer_seed: u64,
    pub dropout_seed: u64,
}

pub fn plan_epoch(base: &TaskSpec, split: &SplitConfig, rng: &mut RunRng) -> Result<EpochPlan, TrainError> {
    let episode = sample_meta_episode(base, split, rng)?;
    Ok(EpochPlan { episode, buffer_seed: rng.random(), dropout_seed: rng.random() })
}

fn forward<'t>(params: &ParamVars<'t>, input: &GraphInput, rate: f64, rng: &mut RunRng) -> Result<Var<'t>, TrainError> {
    Ok(gcn_forward(params, input, ForwardMode::Train { rate, rng })?)
}

/// Output of an episode objective.
pub struct MetaObjective<'t> {
    /// Sum of the per-pseudo-task outer losses.
    pub total: Var<'t>,
    pub task_losses: Vec<f64>,
    /// Parameter values each pseudo-task distilled from, in episode order.
    pub teachers: Vec<ParamSet>,
}

/// `m` differentiable SGD steps on the inner loss from `start`. `teacher`
/// is normally a snapshot of `start`.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop_adapt<'t>(
    start: &ParamVars<'t>,
    teacher: &Teacher<'_>,
    task: &PseudoTask,
    buffer: &ReplayBuffer,
    mask: &SeenClassMask,
    input: &GraphInput,
    cfg: &TrainConfig,
    plugin: &dyn ContinualLoss,
    dropout_rng: &mut RunRng,
) -> Result<ParamVars<'t>, TrainError> {
    let (nodes, labels) = task.support_pairs();
    let mut params = start.clone();
    for _ in 0..cfg.inner_steps {
        let student = forward(&params, input, cfg.dropout, dropout_rng)?;
        let ctx = LossContext { student, teacher, buffer, past_queries: &[], mask, stage: 0 };
        let loss = inner_loss(&ctx, Batch { nodes: &nodes, labels: &labels }, plugin)?;
        guard(loss.value().item(), cfg.divergence_limit, "inner", 0)?;
        params = sgd_step_differentiable(&params, loss, cfg.inner_lr)?;
    }
    Ok(params)
}

/// The chained episode objective: pseudo-task `i` starts from the adapted
/// parameters of task `i-1`, and the outer losses of all tasks are summed.
/// `buffer` is filled as the episode proceeds and left for the caller to
/// clear.
pub fn mctf_objective<'t>(
    theta: &ParamVars<'t>,
    plan: &EpochPlan,
    data: &MetaData<'_>,
    cfg: &TrainConfig,
    plugin: &dyn ContinualLoss,
    buffer: &mut ReplayBuffer,
) -> Result<MetaObjective<'t>, TrainError> {
    mctf_objective_with_teachers(theta, plan, data, cfg, plugin, buffer, None)
}

/// [`mctf_objective`] with the per-task teachers pinned to `frozen` instead
/// of the current task-start parameters. Teachers carry no gradient, so
/// finite differences of the objective only agree with the analytic
/// gradient when the teachers stay put.
#[allow(clippy::too_many_arguments)]
pub fn mctf_objective_with_teachers<'t>(
    theta: &ParamVars<'t>,
    plan: &EpochPlan,
    data: &MetaData<'_>,
    cfg: &TrainConfig,
    plugin: &dyn ContinualLoss,
    buffer: &mut ReplayBuffer,
    frozen: Option<&[ParamSet]>,
) -> Result<MetaObjective<'t>, TrainError> {
    if frozen.is_some_and(|f| f.len() != plan.episode.sequence.len()) {
        return Err(TrainError::Config("one frozen teacher per pseudo-task required"));
    }
    let mut dropout_rng = seeded_rng(plan.dropout_seed);
    let mut buffer_rng = seeded_rng(plan.buffer_seed);
    let mut mask = SeenClassMask::new(data.num_classes);
    let mut past_queries: Vec<usize> = Vec::new();
    let (mut seen_q_nodes, mut seen_q_labels) = (Vec::new(), Vec::new());
    let mut params = theta.clone();
    let mut total: Option<Var<'t>> = None;
    let mut task_losses = Vec::with_capacity(plan.episode.sequence.len());
    let mut teachers = Vec::with_capacity(plan.episode.sequence.len());
    for (i, task) in plan.episode.sequence.iter().enumerate() {
        mask.reveal(&task.classes);
        let snapshot = match frozen {
            Some(f) => f[i].clone(),
            None => params.values(),
        };
        let teacher = Teacher::new(snapshot.clone(), data.input);
        teachers.push(snapshot);
        let adapted =
            inner_loop_adapt(&params, &teacher, task, buffer, &mask, data.input, cfg, plugin, &mut dropout_rng)?;
        let (q_nodes, q_labels) = task.query_pairs();
        seen_q_nodes.extend_from_slice(&q_nodes);
        seen_q_labels.extend_from_slice(&q_labels);
        let student = forward(&adapted, data.input, cfg.dropout, &mut dropout_rng)?;
        let ctx = LossContext {
            student,
            teacher: &teacher,
            buffer,
            past_queries: &past_queries,
            mask: &mask,
            stage: task_losses.len(),
        };
        let query = if cfg.outer_ce_on_union {
            Batch { nodes: &seen_q_nodes, labels: &seen_q_labels }
        } else {
            Batch { nodes: &q_nodes, labels: &q_labels }
        };
        let loss = outer_loss(&ctx, query, plugin)?;
        guard(loss.value().item(), cfg.divergence_limit, "outer", task_losses.len())?;
        task_losses.push(loss.value().item());
        total = Some(match total {
            None => loss,
            Some(t) => t.add(loss),
        });
        update_buffer(buffer, &task.support, &mut buffer_rng)?;
        past_queries.extend_from_slice(&q_nodes);
        params = adapted;
    }
    let total = total.ok_or(TrainError::Config("empty meta episode"))?;
    Ok(MetaObjective { total, task_losses, teachers })
}

/// Classic MAML: every pseudo-task adapts from `theta` on its own support
/// with plain cross-entropy, and the query losses are summed.
pub fn maml_objective<'t>(
    theta: &ParamVars<'t>,
    plan: &EpochPlan,
    data: &MetaData<'_>,
    cfg: &TrainConfig,
) -> Result<MetaObjective<'t>, TrainError> {
    let mut dropout_rng = seeded_rng(plan.dropout_seed);
    let mut total: Option<Var<'t>> = None;
    let mut task_losses = Vec::new();
    for task in &plan.episode.sequence {
        let mask = SeenClassMask::with_visible(data.num_classes, &task.classes);
        let (s_nodes, s_labels) = task.support_pairs();
        let mut params = theta.clone();
        for _ in 0..cfg.inner_steps {
            let logits = forward(&params, data.input, cfg.dropout, &mut dropout_rng)?;
            let loss = masked_cross_entropy(logits.select_rows(&s_nodes), &s_labels, &mask)?;
            guard(loss.value().item(), cfg.divergence_limit, "inner", 0)?;
            params = sgd_step_differentiable(&params, loss, cfg.inner_lr)?;
        }
        let (q_nodes, q_labels) = task.query_pairs();
        let logits = forward(&params, data.input, cfg.dropout, &mut dropout_rng)?;
        let loss = masked_cross_entropy(logits.select_rows(&q_nodes), &q_labels, &mask)?;
        guard(loss.value().item(), cfg.divergence_limit, "outer", task_losses.len())?;
        task_losses.push(loss.value().item());
        total = Some(match total {
            None => loss,
            Some(t) => t.add(loss),
        });
    }
    let total = total.ok_or(TrainError::Config("empty meta episode"))?;
    Ok(MetaObjective { total, task_losses, teachers: Vec::new() })
}

/// Base-stage learner state carried across epochs.
#[derive(Debug, Clone)]
pub struct MetaLearner {
    pub params: ParamSet,
    pub adam: AdamState,
    meta_buffer: ReplayBuffer,
    pub counters: Counters,
}

/// Result of a single epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub task_losses: Vec<f64>,
    pub tape_nodes: usize,
}

impl MetaLearner {
    pub fn new(params: ParamSet) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, meta_buffer: ReplayBuffer::new(BufferScope::MetaEpoch), counters: Counters::default() }
    }

    /// The within-epoch replay store; empty between epochs.
    pub fn meta_buffer(&self) -> &ReplayBuffer {
        &self.meta_buffer
    }

    fn apply(&mut self, tape: &Tape, theta: &ParamVars<'_>, total: Var<'_>, cfg: &TrainConfig) -> Result<(), TrainError> {
        let grads = tape.gradient(total, theta.vars(), false)?;
        let grads: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
        adam_step(&mut self.adam, &mut self.params, &grads, cfg.outer_lr, cfg.weight_decay);
        Ok(())
    }

    /// One MCTF epoch: build the chained objective, differentiate it with
    /// respect to the pre-episode parameters, take one Adam step.
    pub fn mctf_epoch(&mut self, plan: &EpochPlan, data: &MetaData<'_>, cfg: &TrainConfig, plugin: &KdSir) -> Result<EpochStats, TrainError> {
        let tape = Tape::new();
        let theta = self.params.register(&tape);
        let result = mctf_objective(&theta, plan, data, cfg, plugin, &mut self.meta_buffer);
        self.meta_buffer.clear();
        let obj = result?;
        self.apply(&tape, &theta, obj.total, cfg)?;
        self.counters.record_tape(&tape);
        Ok(EpochStats { loss: obj.total.value().item(), task_losses: obj.task_losses, tape_nodes: tape.len() })
    }

    pub fn maml_epoch(&mut self, plan: &EpochPlan, data: &MetaData<'_>, cfg: &TrainConfig) -> Result<EpochStats, TrainError> {
        let tape = Tape::new();
        let theta = self.params.register(&tape);
        let obj = maml_objective(&theta, plan, data, cfg)?;
        self.apply(&tape, &theta, obj.total, cfg)?;
        self.counters.record_tape(&tape);
        Ok(EpochStats { loss: obj.total.value().item(), task_losses: obj.task_losses, tape_nodes: tape.len() })
    }

    /// One full-batch Adam step on base-support cross-entropy.
    pub fn plain_epoch(&mut self, data: &MetaData<'_>, cfg: &TrainConfig, rng: &mut RunRng) -> Result<EpochStats, TrainError> {
        let tape = Tape::new();
        let theta = self.params.register(&tape);
        let mask = SeenClassMask::with_visible(data.num_classes, &data.base.classes);
        let (nodes, labels) = data.base.support_pairs();
        let logits = forward(&theta, data.input, cfg.dropout, rng)?;
        let loss = masked_cross_entropy(logits.select_rows(&nodes), &labels, &mask)?;
        let value = loss.value().item();
        guard(value, cfg.divergence_limit, "base", 0)?;
        self.apply(&tape, &theta, loss, cfg)?;
        self.counters.record_tape(&tape);
        Ok(EpochStats { loss: value, task_losses: Vec::new(), tape_nodes: tape.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOutcome {
    pub params: ParamSet,
    pub loss_curve: Vec<f64>,
    pub counters: Counters,
}

/// Runs `cfg.meta_epochs` epochs of the configured algorithm from a fresh
/// initialization.
pub fn meta_train(inputs: &StageInputs<'_>, base: &TaskSpec, split: &SplitConfig, cfg: &TrainConfig) -> Result<MetaOutcome, TrainError> {
    cfg.validate()?;
    let dataset = inputs.dataset();
    let mut rng = seeded_rng(cfg.seed);
    let init = init_params_with_widths(dataset.num_features(), cfg.hidden, dataset.num_classes(), rng.random());
    let base_mask = SeenClassMask::with_visible(dataset.num_classes(), &base.classes);
    let input = inputs.input_for(&base_mask)?;
    let data = MetaData { input: &input, base, split, num_classes: dataset.num_classes() };
    let plugin = cfg.meta_plugin();
    let mut learner = MetaLearner::new(init);
    let mut loss_curve = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 0..cfg.meta_epochs {
        let stats = match cfg.meta {
            MetaAlgorithm::Plain => learner.plain_epoch(&data, cfg, &mut rng),
            MetaAlgorithm::Maml => learner.maml_epoch(&plan_epoch(base, split, &mut rng)?, &data, cfg),
            MetaAlgorithm::Mctf => learner.mctf_epoch(&plan_epoch(base, split, &mut rng)?, &data, cfg, &plugin),
        }
        .map_err(|e| match e {
            TrainError::Diverged { phase, loss, .. } => TrainError::Diverged { phase, step: epoch, loss },
            other => other,
        })?;
        loss_curve.push(stats.loss);
    }
    learner.counters.record_plugin(&plugin);
    Ok(MetaOutcome { params: learner.params, loss_curve, counters: learner.counters })
}

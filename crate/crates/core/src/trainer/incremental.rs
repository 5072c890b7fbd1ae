use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, guard, meta_train, update_buffer, AdamState, BufferScope, Counters, MetaOutcome, ReplayBuffer,
    StageInputs, TrainConfig, TrainError};
use crate::autodiff::Tape;
use crate::episodes::{build_task_stream, SplitConfig, TaskSpec, TaskStream};
use crate::eval::{count_correct, AccuracyMatrix, StageRow};
use crate::graph::GraphDataset;
use crate::losses::{incremental_loss, Batch, KdSir, LossContext, SeenClassMask, Teacher};
use crate::model::{gcn_forward, predict, ForwardMode, GraphInput, ParamSet};
use crate::tensor::Tensor;
use crate::{seeded_rng, RunRng};

/// Outcome of the incremental stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub accuracy: AccuracyMatrix,
    /// Fine-tuning losses, one list per novel task.
    pub inc_losses: Vec<Vec<f64>>,
    /// Buffer size after each stage, base first.
    pub buffer_sizes: Vec<usize>,
    pub counters: Counters,
    pub final_params: ParamSet,
}

/// Accuracy row for `stage` over the query sets of `tasks`.
fn stage_row(stage: usize, logits: &Tensor, tasks: &[&TaskSpec], mask: &SeenClassMask) -> Result<StageRow, TrainError> {
    let (mut correct, mut total) = (0usize, 0usize);
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (nodes, labels) = task.query_pairs();
        if nodes.is_empty() {
            return Err(crate::eval::EvalError::EmptyQuery.into());
        }
        let c = count_correct(logits, &nodes, &labels, mask)?;
        per_task.push(c as f64 / nodes.len() as f64);
        correct += c;
        total += nodes.len();
    }
    Ok(StageRow { stage, seen_classes: mask.count(), overall: correct as f64 / total as f64, per_task })
}

fn fine_tune(
    params: &mut ParamSet,
    task: &TaskSpec,
    teacher: &Teacher<'_>,
    buffer: &ReplayBuffer,
    mask: &SeenClassMask,
    input: &GraphInput,
    cfg: &TrainConfig,
    plugin: &KdSir,
    stage: usize,
    rng: &mut RunRng,
    counters: &mut Counters,
) -> Result<Vec<f64>, TrainError> {
    let (nodes, labels) = task.support_pairs();
    let mut adam = AdamState::new(params);
    let mut losses = Vec::with_capacity(cfg.inc_finetune_steps);
    for step in 0..cfg.inc_finetune_steps {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let student = gcn_forward(&vars, input, ForwardMode::Train { rate: cfg.dropout, rng })?;
        let ctx = LossContext { student, teacher, buffer, past_queries: &[], mask, stage };
        let loss = incremental_loss(&ctx, Batch { nodes: &nodes, labels: &labels }, plugin)?;
        let value = loss.value().item();
        guard(value, cfg.divergence_limit, "incremental", step)?;
        let grads: Vec<Tensor> =
            tape.gradient(loss, vars.vars(), false)?.iter().map(|g| (*g.value()).clone()).collect();
        adam_step(&mut adam, params, &grads, cfg.outer_lr, cfg.weight_decay);
        counters.record_tape(&tape);
        losses.push(value);
    }
    Ok(losses)
}

/// Learns the novel tasks one after another from their support sets only,
/// evaluating on every query set seen so far after each task.
pub fn incremental_stage(theta: &ParamSet, stream: &TaskStream, inputs: &StageInputs<'_>, cfg: &TrainConfig) -> Result<StageReport, TrainError> {
    cfg.validate()?;
    let num_classes = inputs.dataset().num_classes();
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed_1dc5_0000_0001);
    let mut buffer_rng = seeded_rng(rng.random());
    let plugin = cfg.incremental_plugin();
    let mut counters = Counters::default();
    let mut params = theta.clone();
    let mut mask = SeenClassMask::with_visible(num_classes, &stream.base.classes);
    let mut buffer = ReplayBuffer::new(BufferScope::IncrementalStage);
    if cfg.seed_base_buffer {
        update_buffer(&mut buffer, &stream.base.support, &mut buffer_rng)?;
    }
    let mut seen: Vec<&TaskSpec> = alloc::vec![&stream.base];
    let input = inputs.input_for(&mask)?;
    let mut rows = alloc::vec![stage_row(0, &predict(&params, &input)?, &seen, &mask)?];
    let mut buffer_sizes = alloc::vec![buffer.len()];
    let mut inc_losses = Vec::with_capacity(stream.novel.len());
    for (i, task) in stream.novel.iter().enumerate() {
        let stage = i + 1;
        mask.reveal(&task.classes);
        let input = inputs.input_for(&mask)?;
        let teacher = Teacher::new(params.clone(), &input);
        let losses = fine_tune(
            &mut params, task, &teacher, &buffer, &mask, &input, cfg, &plugin, stage, &mut rng, &mut counters,
        )
        .map_err(|e| match e {
            TrainError::Diverged { phase, loss, .. } => TrainError::Diverged { phase, step: stage, loss },
            other => other,
        })?;
        inc_losses.push(losses);
        update_buffer(&mut buffer, &task.support, &mut buffer_rng)?;
        seen.push(task);
        rows.push(stage_row(stage, &predict(&params, &input)?, &seen, &mask)?);
        buffer_sizes.push(buffer.len());
    }
    counters.record_plugin(&plugin);
    Ok(StageReport { accuracy: AccuracyMatrix { rows }, inc_losses, buffer_sizes, counters, final_params: params })
}

/// A complete run: split, meta-train, incremental stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub stream: TaskStream,
    pub meta: MetaOutcome,
    pub stage: StageReport,
}

pub fn train_and_evaluate(dataset: &GraphDataset, split: &SplitConfig, cfg: &TrainConfig) -> Result<RunOutcome, TrainError> {
    let stream = build_task_stream(dataset, split)?;
    let inputs = StageInputs::new(dataset, cfg.visibility, cfg.normalization)?;
    let meta = meta_train(&inputs, &stream.base, split, cfg)?;
    let stage = incremental_stage(&meta.params, &stream, &inputs, cfg)?;
    Ok(RunOutcome { stream, meta, stage })
}

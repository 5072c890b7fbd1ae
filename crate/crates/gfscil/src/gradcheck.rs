//! Finite-difference checks of every analytic gradient path: tape
//! primitives, the GCN, the regularized losses and the chained
//! meta-gradient.

use std::collections::BTreeMap;

use gfscil_core::autodiff::{SparseOperand, Tape, Var};
use gfscil_core::episodes::{build_task_stream, SplitConfig};
use gfscil_core::graph::{generate_sbm, GraphDataset, SbmConfig};
use gfscil_core::losses::{incremental_loss, outer_loss, Batch, KdSir, LossContext, SeenClassMask, Teacher};
use gfscil_core::model::{gcn_forward, init_params_with_widths, ForwardMode, GraphInput, ParamSet};
use gfscil_core::oracle::{finite_diff_gradient, flatten_vars, max_rel_error, reference_maml_gradient, FdSpec, MamlProblem};
use gfscil_core::seeded_rng;
use gfscil_core::tensor::Tensor;
use gfscil_core::trainer::{
    mctf_objective, mctf_objective_with_teachers, plan_epoch, update_buffer, BufferScope, MetaData, ReplayBuffer,
    TrainConfig,
};

/// Relative-error bound shared by every check.
pub const TOLERANCE: f64 = 1e-4;

/// A deliberately wrong derivative rule: every pullback of `op` is scaled by
/// `factor` on the tapes whose gradients are being checked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        format!("{:<30} max rel error {:.3e} (tol {:.0e}) {verdict}", self.name, self.max_rel_error, self.tolerance)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("gradient check {check} could not run: {msg}")]
pub struct GradCheckError {
    pub check: &'static str,
    pub msg: String,
}

fn fail<E: std::fmt::Display>(check: &'static str) -> impl Fn(E) -> GradCheckError {
    move |e| GradCheckError { check, msg: e.to_string() }
}

fn new_tape(fault: Option<Fault>) -> Tape {
    let tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f.op, f.factor);
    }
    tape
}

/// Twelve nodes in three classes of four, four features.
struct Fixture {
    ds: GraphDataset,
    input: GraphInput,
    split: SplitConfig,
}

fn fixture() -> Fixture {
    let ds = generate_sbm(&SbmConfig {
        classes: 3,
        nodes_per_class: 4,
        intra_edge_prob: 0.7,
        inter_edge_prob: 0.1,
        feature_dim: 4,
        feature_noise: 0.8,
        mean_scale: 1.0,
        seed: 5,
    })
    .expect("fixture config is valid");
    let input = GraphInput::new(ds.normalized_adjacency(), ds.features()).expect("fixture shapes agree");
    let split = SplitConfig {
        n_way: 2,
        k_shot: 1,
        r_query: 1,
        base_class_count: 3,
        num_novel_tasks: Some(0),
        meta_query_cap: 4,
        seed: 5,
    };
    Fixture { ds, input, split }
}

/// Widths (3, 2) with biases in (0.1, 0.5): zero biases would leave whole
/// rows sitting on ReLU kinks.
fn params(nfeat: usize, nclass: usize, seed: u64) -> ParamSet {
    let mut p = init_params_with_widths(nfeat, (3, 2), nclass, seed);
    let offsets = init_params_with_widths(nfeat, (3, 2), nclass, seed + 100);
    for (i, t) in p.tensors_mut().iter_mut().enumerate().filter(|(i, _)| i % 2 == 1) {
        // a Glorot weight row supplies the pseudo-random offsets
        let src = offsets.tensors()[i - 1].data();
        let scale = src.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (j, b) in t.data_mut().iter_mut().enumerate() {
            *b = 0.3 + 0.2 * src[j % src.len()] / scale;
        }
    }
    p
}

fn compare(name: impl Into<String>, analytic: &[f64], theta: &[f64], objective: impl FnMut(&[f64]) -> f64) -> Result<Check, String> {
    let spec = FdSpec::default();
    let fd = finite_diff_gradient(objective, theta, spec).map_err(|e| e.to_string())?;
    Ok(Check { name: name.into(), max_rel_error: max_rel_error(analytic, &fd, spec.floor), tolerance: TOLERANCE })
}

/// A composite of every tape primitive, including a second-order term.
fn primitive_objective<'t>(tape: &'t Tape, x: &[Var<'t>], adj: &SparseOperand, second_order: bool) -> Result<Var<'t>, String> {
    let [w, b, z] = x else { unreachable!() };
    let n = adj.matrix().rows();
    let h = z.matmul(*w).spmm_left(adj).add_row_broadcast(*b).relu();
    let lse = h.logsumexp_rows();
    let picked = h.select_rows(&[0, 2]).concat_rows(h.select_rows(&[1])).scatter_rows(&[3, 0, 1], n);
    let gated = picked.mul(h).sub(h.scale(0.5)).transpose();
    let s = gated.sum_rows().broadcast_rows(2).square().mean();
    let c = lse.broadcast_cols(3).exp().scale(1e-2).sum_cols().sum();
    let e = b.sum().expand(&[2, 2]).square().sum();
    let mut out = s.add(c).add(e).add(w.select_cols(&[1]).sum());
    if second_order {
        let g = tape.gradient(out, &[*w], true).map_err(|e| e.to_string())?;
        out = out.add(g[0].square().sum());
    }
    Ok(out)
}

fn primitives(fault: Option<Fault>) -> Result<Vec<Check>, GradCheckError> {
    const NAME: &str = "autodiff/primitives";
    let f = fixture();
    let adj = f.ds.normalized_adjacency();
    let z = f.ds.features().clone();
    let w = params(4, 3, 2).tensors()[0].clone();
    let b = Tensor::vector((0..3).map(|i| 0.2 + 0.1 * i as f64).collect());
    let theta: Vec<f64> = w.data().iter().chain(b.data()).chain(z.data()).copied().collect();
    let unflat = |flat: &[f64]| {
        let (wd, rest) = flat.split_at(w.len());
        let (bd, zd) = rest.split_at(b.len());
        [
            Tensor::from_vec(w.shape(), wd.to_vec()),
            Tensor::from_vec(b.shape(), bd.to_vec()),
            Tensor::from_vec(z.shape(), zd.to_vec()),
        ]
    };
    let mut checks = Vec::new();
    for (label, second_order) in [("first-order", false), ("second-order", true)] {
        let tape = new_tape(fault);
        let vars: Vec<Var<'_>> = unflat(&theta).into_iter().map(|t| tape.param(t)).collect();
        let obj = primitive_objective(&tape, &vars, adj.operand(), second_order).map_err(fail(NAME))?;
        let g = flatten_vars(&tape.gradient(obj, &vars, false).map_err(fail(NAME))?);
        let value = |flat: &[f64]| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = unflat(flat).into_iter().map(|t| tape.param(t)).collect();
            primitive_objective(&tape, &vars, adj.operand(), second_order).map(|v| v.value().item()).unwrap_or(f64::NAN)
        };
        checks.push(compare(format!("{NAME}/{label}"), &g, &theta, value).map_err(fail(NAME))?);
    }
    Ok(checks)
}

fn ce_value(p: &ParamSet, input: &GraphInput, nodes: &[usize], labels: &[usize], mask: &SeenClassMask) -> f64 {
    let tape = Tape::new();
    let v = p.register(&tape);
    gcn_forward(&v, input, ForwardMode::Eval)
        .ok()
        .and_then(|l| gfscil_core::losses::masked_cross_entropy(l.select_rows(nodes), labels, mask).ok())
        .map_or(f64::NAN, |l| l.value().item())
}

fn model(fault: Option<Fault>) -> Result<Check, GradCheckError> {
    const NAME: &str = "model/gcn-cross-entropy";
    let f = fixture();
    let theta = params(4, 3, 3);
    let nodes: Vec<usize> = (0..f.ds.num_nodes()).collect();
    let labels = f.ds.labels();
    let mask = SeenClassMask::with_visible(3, &[0, 1, 2]);
    let tape = new_tape(fault);
    let v = theta.register(&tape);
    let logits = gcn_forward(&v, &f.input, ForwardMode::Eval).map_err(fail(NAME))?;
    let loss = gfscil_core::losses::masked_cross_entropy(logits, labels, &mask).map_err(fail(NAME))?;
    let g = flatten_vars(&tape.gradient(loss, v.vars(), false).map_err(fail(NAME))?);
    compare(NAME, &g, &theta.flatten(), |x| ce_value(&theta.with_flat(x), &f.input, &nodes, labels, &mask)).map_err(fail(NAME))
}

fn losses(fault: Option<Fault>) -> Result<Vec<Check>, GradCheckError> {
    const NAME: &str = "losses";
    let f = fixture();
    let theta = params(4, 3, 4);
    let teacher = Teacher::new(params(4, 3, 7), &f.input);
    let by_class = f.ds.nodes_by_class();
    let mut buffer = ReplayBuffer::new(BufferScope::IncrementalStage);
    let stored: BTreeMap<usize, Vec<usize>> = [(0, by_class[0].clone()), (1, by_class[1].clone())].into_iter().collect();
    update_buffer(&mut buffer, &stored, &mut seeded_rng(1)).map_err(fail(NAME))?;
    let mask = SeenClassMask::with_visible(3, &[0, 1, 2]);
    let support: Vec<usize> = by_class[2][..2].to_vec();
    let support_labels = vec![2; support.len()];
    let past: Vec<usize> = vec![by_class[0][3], by_class[1][3]];
    let query: Vec<usize> = by_class[2][2..].to_vec();
    let query_labels = vec![2; query.len()];

    let loss_value = |p: &ParamSet, tape: &Tape, outer: bool| -> Result<(f64, Vec<f64>), String> {
        let v = p.register(tape);
        let student = gcn_forward(&v, &f.input, ForwardMode::Eval).map_err(|e| e.to_string())?;
        let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &past, mask: &mask, stage: 1 };
        let plugin = KdSir::new(true, true);
        let loss = if outer {
            outer_loss(&ctx, Batch { nodes: &query, labels: &query_labels }, &plugin)
        } else {
            incremental_loss(&ctx, Batch { nodes: &support, labels: &support_labels }, &plugin)
        }
        .map_err(|e| e.to_string())?;
        let g = flatten_vars(&tape.gradient(loss, v.vars(), false).map_err(|e| e.to_string())?);
        Ok((loss.value().item(), g))
    };
    let mut checks = Vec::new();
    for (label, outer) in [("kd+sir+ce", false), ("outer-kd+ce", true)] {
        let (_, g) = loss_value(&theta, &new_tape(fault), outer).map_err(fail(NAME))?;
        let value = |x: &[f64]| loss_value(&theta.with_flat(x), &Tape::new(), outer).map_or(f64::NAN, |(v, _)| v);
        checks.push(compare(format!("{NAME}/{label}"), &g, &theta.flatten(), value).map_err(fail(NAME))?);
    }
    Ok(checks)
}

/// Chained meta-gradient over two pseudo-tasks with distillation and replay
/// active, for one and two inner steps, with and without dropout.
fn meta(fault: Option<Fault>) -> Result<Vec<Check>, GradCheckError> {
    const NAME: &str = "meta";
    let f = fixture();
    let stream = build_task_stream(&f.ds, &f.split).map_err(fail(NAME))?;
    let data = MetaData { input: &f.input, base: &stream.base, split: &f.split, num_classes: 3 };
    let theta = params(4, 3, 1);
    let plan = plan_epoch(&stream.base, &f.split, &mut seeded_rng(3)).map_err(fail(NAME))?;
    let mut checks = Vec::new();
    for m in [1, 2] {
        for dropout in [0.0, 0.5] {
            let cfg = TrainConfig { inner_lr: 0.5, inner_steps: m, dropout, hidden: (3, 2), ..TrainConfig::default() };
            let plugin = cfg.meta_plugin();
            let tape = new_tape(fault);
            let v = theta.register(&tape);
            let mut buffer = ReplayBuffer::new(BufferScope::MetaEpoch);
            let obj = mctf_objective(&v, &plan, &data, &cfg, &plugin, &mut buffer).map_err(fail(NAME))?;
            let g = flatten_vars(&tape.gradient(obj.total, v.vars(), false).map_err(fail(NAME))?);
            let teachers = obj.teachers;
            let value = |x: &[f64]| {
                let tape = Tape::new();
                let v = theta.with_flat(x).register(&tape);
                let mut buffer = ReplayBuffer::new(BufferScope::MetaEpoch);
                mctf_objective_with_teachers(&v, &plan, &data, &cfg, &cfg.meta_plugin(), &mut buffer, Some(&teachers))
                    .map_or(f64::NAN, |o| o.total.value().item())
            };
            let name = format!("{NAME}/chained-m{m}-dropout{dropout}");
            checks.push(compare(name, &g, &theta.flatten(), value).map_err(fail(NAME))?);
        }
    }

    // the second-order MAML reference, independent of the trainer
    let task = &plan.episode.sequence[0];
    let prob = MamlProblem { input: &f.input, task, alpha: 0.5, inner_steps: 2, dropout: 0.0, dropout_seed: 0 };
    let (_, reference) = reference_maml_gradient(&theta, &prob).map_err(fail(NAME))?;
    let reference: Vec<f64> = reference.iter().flat_map(|t| t.data().to_vec()).collect();
    let value = |x: &[f64]| {
        let single = gfscil_core::trainer::EpochPlan { episode: gfscil_core::episodes::MetaEpisode { sequence: vec![task.clone()] }, ..plan.clone() };
        let cfg = TrainConfig { inner_lr: 0.5, inner_steps: 2, dropout: 0.0, use_kd: false, use_sir: false, hidden: (3, 2), ..TrainConfig::default() };
        let tape = Tape::new();
        let v = theta.with_flat(x).register(&tape);
        let mut buffer = ReplayBuffer::new(BufferScope::MetaEpoch);
        mctf_objective(&v, &single, &data, &cfg, &cfg.meta_plugin(), &mut buffer).map_or(f64::NAN, |o| o.total.value().item())
    };
    checks.push(compare(format!("{NAME}/maml-reference"), &reference, &theta.flatten(), value).map_err(fail(NAME))?);
    Ok(checks)
}

/// Runs every check. `fault` corrupts the analytic side only.
pub fn run_suite(fault: Option<Fault>) -> Result<Vec<Check>, GradCheckError> {
    let mut checks = primitives(fault)?;
    checks.push(model(fault)?);
    checks.extend(losses(fault)?);
    checks.extend(meta(fault)?);
    Ok(checks)
}

/// Only the chained meta-gradient checks.
pub fn run_meta(fault: Option<Fault>) -> Result<Vec<Check>, GradCheckError> {
    meta(fault)
}

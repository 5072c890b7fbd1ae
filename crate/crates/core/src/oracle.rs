//! Brute-force reference computations for tests and the gradient-check
//! harness.
//!
//! Nothing here touches the trainer: the references below carry their own
//! cross-entropy, distillation, SGD and Adam so that agreement with the
//! trainer is evidence rather than tautology.

use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::episodes::TaskSpec;
use crate::model::{gcn_forward, ForwardMode, GraphInput, ModelError, ParamSet, ParamVars};
use crate::tensor::Tensor;
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Central-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSpec {
    pub eps: f64,
    /// Magnitude below which errors are measured absolutely; see
    /// [`rel_error`].
    pub floor: f64,
}

impl Default for FdSpec {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-4 }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter().zip(b).fold(0.0, |m, (&x, &y)| m.max(rel_error(x, y, floor)))
}

/// `(f(θ + εe_k) - f(θ - εe_k)) / 2ε` for every coordinate `k`.
///
/// The objective is evaluated twice at `theta` first; differing values mean
/// the objective is not deterministic and the estimate would be meaningless.
pub fn finite_diff_gradient(
    mut objective: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    spec: FdSpec,
) -> Result<Vec<f64>, OracleError> {
    if !(spec.eps > 0.0) {
        return Err(OracleError::BadStep(spec.eps));
    }
    let first = objective(theta);
    let second = objective(theta);
    if first.to_bits() != second.to_bits() {
        return Err(OracleError::NonDeterministic { first, second });
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + spec.eps;
        let up = objective(&x);
        x[k] = theta[k] - spec.eps;
        let down = objective(&x);
        x[k] = theta[k];
        grad.push((up - down) / (2.0 * spec.eps));
    }
    Ok(grad)
}

/// Flattened values of a list of gradient variables.
pub fn flatten_vars(vars: &[Var<'_>]) -> Vec<f64> {
    vars.iter().flat_map(|v| v.value().data().to_vec()).collect()
}

/// Mean negative log-likelihood over `nodes`, softmax restricted to
/// `classes` (sorted). Built row by row from scalar picks.
pub fn reference_ce<'t>(logits: Var<'t>, nodes: &[usize], labels: &[usize], classes: &[usize]) -> Var<'t> {
    let x = logits.select_rows(nodes).select_cols(classes);
    let mut picked: Option<Var<'t>> = None;
    for (r, y) in labels.iter().enumerate() {
        let col = classes.iter().position(|c| c == y).expect("label among the visible classes");
        let v = x.select_rows(&[r]).transpose().select_rows(&[col]).sum();
        picked = Some(match picked {
            None => v,
            Some(p) => p.add(v),
        });
    }
    let picked = picked.expect("non-empty batch");
    x.logsumexp_rows().sum().sub(picked).scale(1.0 / nodes.len() as f64)
}

/// Mean squared difference to a constant teacher over `nodes` x `classes`.
pub fn reference_kd<'t>(student: Var<'t>, teacher: &Tensor, nodes: &[usize], classes: &[usize]) -> Var<'t> {
    let tape = student.tape();
    let mut target = Vec::with_capacity(nodes.len() * classes.len());
    for &n in nodes {
        for &c in classes {
            target.push(teacher.at(n, c));
        }
    }
    let target = tape.constant(Tensor::matrix(nodes.len(), classes.len(), target));
    let d = student.select_rows(nodes).select_cols(classes).sub(target);
    d.mul(d).sum().scale(1.0 / (nodes.len() * classes.len()) as f64)
}

/// Forward under a dropout stream, or Eval when `rate` is zero.
fn run<'t>(p: &ParamVars<'t>, input: &GraphInput, rate: f64, rng: &mut crate::RunRng) -> Result<Var<'t>, ModelError> {
    gcn_forward(p, input, ForwardMode::Train { rate, rng })
}

fn sgd<'t>(p: &ParamVars<'t>, loss: Var<'t>, alpha: f64, higher_order: bool) -> Result<ParamVars<'t>, AutodiffError> {
    let g = p.tape().gradient(loss, p.vars(), higher_order)?;
    Ok(ParamVars::from_vars(p.vars().iter().zip(&g).map(|(w, gw)| w.sub(gw.scale(alpha))).collect()))
}

/// Single-task MAML problem.
pub struct MamlProblem<'a> {
    pub input: &'a GraphInput,
    pub task: &'a TaskSpec,
    pub alpha: f64,
    pub inner_steps: usize,
    pub dropout: f64,
    pub dropout_seed: u64,
}

/// Second-order MAML meta-gradient: query loss after `m` SGD steps on the
/// support loss, differentiated back to `theta`.
pub fn reference_maml_gradient(theta: &ParamSet, prob: &MamlProblem<'_>) -> Result<(f64, Vec<Tensor>), OracleError> {
    let tape = Tape::new();
    let p0 = theta.register(&tape);
    let mut rng = seeded_rng(prob.dropout_seed);
    let mut classes = prob.task.classes.clone();
    classes.sort_unstable();
    let (sn, sl) = prob.task.support_pairs();
    let (qn, ql) = prob.task.query_pairs();
    let mut p = p0.clone();
    for _ in 0..prob.inner_steps {
        let logits = run(&p, prob.input, prob.dropout, &mut rng)?;
        p = sgd(&p, reference_ce(logits, &sn, &sl, &classes), prob.alpha, true)?;
    }
    let q = reference_ce(run(&p, prob.input, prob.dropout, &mut rng)?, &qn, &ql, &classes);
    let g = tape.gradient(q, p0.vars(), false)?;
    Ok((q.value().item(), g.iter().map(|v| (*v.value()).clone()).collect()))
}

/// One MAML meta-step from a fresh Adam state: the first Adam step reduces
/// to `θ - β ĝ / (|ĝ| + 1e-8)` with `ĝ = g + λθ`.
pub fn reference_maml_step(theta: &ParamSet, prob: &MamlProblem<'_>, beta: f64, weight_decay: f64) -> Result<ParamSet, OracleError> {
    let (_, grads) = reference_maml_gradient(theta, prob)?;
    let mut out = theta.clone();
    for (w, g) in out.tensors_mut().iter_mut().zip(&grads) {
        for (x, &gx) in w.data_mut().iter_mut().zip(g.data()) {
            let gh = gx + weight_decay * *x;
            *x -= beta * gh / (gh.abs() + 1e-8);
        }
    }
    Ok(out)
}

/// Chained multi-task problem without dropout. `replay[i]` lists the
/// `(node, label)` pairs held in the meta buffer when pseudo-task `i`
/// starts.
pub struct ChainProblem<'a> {
    pub input: &'a GraphInput,
    pub tasks: &'a [TaskSpec],
    pub replay: &'a [Vec<(usize, usize)>],
    pub alpha: f64,
    pub inner_steps: usize,
    pub use_kd: bool,
    pub use_sir: bool,
}

/// Value of the summed chained objective, recomputed with first-order inner
/// steps on fresh tapes (values need no second-order information).
pub fn reference_chain_value(theta: &ParamSet, prob: &ChainProblem<'_>) -> Result<f64, OracleError> {
    let eval = |p: &ParamSet| -> Result<Tensor, OracleError> {
        let tape = Tape::new();
        let v = p.register(&tape);
        Ok((*gcn_forward(&v, prob.input, ForwardMode::Eval)?.value()).clone())
    };
    let mut visible: Vec<usize> = Vec::new();
    let mut past_q: Vec<usize> = Vec::new();
    let mut current = theta.clone();
    let mut total = 0.0;
    for (task, replay) in prob.tasks.iter().zip(prob.replay) {
        visible.extend_from_slice(&task.classes);
        visible.sort_unstable();
        let teacher = eval(&current)?;
        let (buf_nodes, buf_labels): (Vec<usize>, Vec<usize>) = replay.iter().copied().unzip();
        let (sn, sl) = task.support_pairs();
        let mut p = current.clone();
        for _ in 0..prob.inner_steps {
            let tape = Tape::new();
            let v = p.register(&tape);
            let logits = gcn_forward(&v, prob.input, ForwardMode::Eval)?;
            let mut loss = reference_ce(logits, &sn, &sl, &visible);
            if !buf_nodes.is_empty() {
                if prob.use_kd {
                    loss = loss.add(reference_kd(logits, &teacher, &buf_nodes, &visible));
                }
                if prob.use_sir {
                    loss = loss.add(reference_ce(logits, &buf_nodes, &buf_labels, &visible));
                }
            }
            p = sgd(&v, loss, prob.alpha, false)?.values();
        }
        let tape = Tape::new();
        let v = p.register(&tape);
        let logits = gcn_forward(&v, prob.input, ForwardMode::Eval)?;
        let (qn, ql) = task.query_pairs();
        let mut loss = reference_ce(logits, &qn, &ql, &visible);
        if prob.use_kd && !past_q.is_empty() {
            loss = loss.add(reference_kd(logits, &teacher, &past_q, &visible));
        }
        total += loss.value().item();
        past_q.extend_from_slice(&qn);
        current = p;
    }
    Ok(total)
}

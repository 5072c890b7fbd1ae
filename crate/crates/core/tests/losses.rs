mod common;

use std::collections::BTreeMap;

use common::{graph_input, random_tensor, sbm};
use gfscil_core::autodiff::Tape;
use gfscil_core::losses::*;
use gfscil_core::model::{gcn_forward, init_params_with_widths, predict, ForwardMode, GraphInput, ParamSet};
use gfscil_core::oracle::{finite_diff_gradient, max_rel_error, FdSpec};
use gfscil_core::tensor::Tensor;
use gfscil_core::trainer::{update_buffer, BufferScope, ReplayBuffer};
use gfscil_core::seeded_rng;
use proptest::prelude::*;

fn all_visible(c: usize) -> SeenClassMask {
    SeenClassMask::with_visible(c, &(0..c).collect::<Vec<_>>())
}

fn buffer_of(pairs: &[(usize, usize)]) -> ReplayBuffer {
    // (class, node)
    let mut b = ReplayBuffer::new(BufferScope::IncrementalStage);
    let support: BTreeMap<usize, Vec<usize>> = pairs.iter().map(|&(c, n)| (c, vec![n])).collect();
    update_buffer(&mut b, &support, &mut seeded_rng(0)).unwrap();
    b
}

#[test]
fn uniform_logits_give_log_of_visible_count() {
    let tape = Tape::new();
    let x = tape.param(Tensor::full(&[3, 5], 0.7));
    let mask = SeenClassMask::with_visible(5, &[1, 4]);
    let l = masked_cross_entropy(x, &[1, 4, 4], &mask).unwrap();
    assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_vanishing_loss() {
    let tape = Tape::new();
    let x = tape.param(Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]));
    let l = masked_cross_entropy(x, &[0, 2], &all_visible(3)).unwrap();
    assert!(l.value().item() < 1e-20, "{}", l.value().item());
}

#[test]
fn masked_ce_matches_hand_log_sum_exp() {
    let logits = random_tensor(&[3, 4], 5).scale(3.0);
    let mask = SeenClassMask::with_visible(4, &[0, 1, 3]);
    let labels = [3usize, 0, 1];
    let tape = Tape::new();
    let got = masked_cross_entropy(tape.param(logits.clone()), &labels, &mask).unwrap().value().item();
    let mut want = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let lse = [0, 1, 3].iter().map(|&c| logits.at(r, c).exp()).sum::<f64>().ln();
        want += lse - logits.at(r, y);
    }
    want /= 3.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn ce_errors() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[1, 3]));
    let mask = SeenClassMask::with_visible(3, &[0, 1]);
    assert_eq!(masked_cross_entropy(x, &[2], &mask).unwrap_err(), LossError::HiddenLabel(2));
    assert_eq!(masked_cross_entropy(x.select_rows(&[]), &[], &mask).unwrap_err(), LossError::EmptyBatch);
}

#[test]
fn kd_of_identical_outputs_is_zero() {
    let input = graph_input(7, 3, 1);
    let p = init_params_with_widths(3, (4, 3), 3, 2);
    let tape = Tape::new();
    let v = p.register(&tape);
    let l = kd_loss(&p, &v, &[0, 2, 5], &input, &all_visible(3)).unwrap();
    assert_eq!(l.value().item(), 0.0);
}

#[test]
fn kd_of_unit_shift_is_one() {
    // shifting b3 by one moves every logit by exactly one
    let input = graph_input(7, 3, 1);
    let teacher = init_params_with_widths(3, (4, 3), 4, 2);
    let mut student = teacher.clone();
    student.tensors_mut()[5] = Tensor::vector(vec![1.0; 4]);
    let tape = Tape::new();
    let v = student.register(&tape);
    let mask = SeenClassMask::with_visible(4, &[0, 2, 3]);
    let l = kd_loss(&teacher, &v, &[1, 3, 4, 6], &input, &mask).unwrap();
    assert!((l.value().item() - 1.0).abs() < 1e-12, "{}", l.value().item());
}

fn sbm_input() -> (gfscil_core::graph::GraphDataset, GraphInput) {
    let ds = sbm(4, 10, 6, 3);
    let input = GraphInput::new(ds.normalized_adjacency(), ds.features()).unwrap();
    (ds, input)
}

#[test]
fn kd_matches_dense_mse_on_sbm_fixture() {
    let (_, input) = sbm_input();
    let teacher = init_params_with_widths(6, (8, 5), 4, 1);
    let student = init_params_with_widths(6, (8, 5), 4, 2);
    let nodes = [3usize, 17, 22, 30, 39];
    let mask = SeenClassMask::with_visible(4, &[0, 1, 3]);
    let tape = Tape::new();
    let got = kd_loss(&teacher, &student.register(&tape), &nodes, &input, &mask).unwrap().value().item();
    let (t, s) = (predict(&teacher, &input).unwrap(), predict(&student, &input).unwrap());
    let mut want = 0.0;
    for &n in &nodes {
        for c in [0, 1, 3] {
            want += (t.at(n, c) - s.at(n, c)).powi(2);
        }
    }
    want /= 15.0;
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn sir_cases() {
    let (_, input) = sbm_input();
    let p = init_params_with_widths(6, (8, 5), 4, 1);
    let tape = Tape::new();
    let v = p.register(&tape);
    let mask = all_visible(4);
    let empty = ReplayBuffer::new(BufferScope::MetaEpoch);
    assert_eq!(sir_loss(&v, &empty, &input, &mask).unwrap().value().item(), 0.0);

    let buf = buffer_of(&[(0, 1), (1, 12), (2, 25), (3, 33)]);
    let got = sir_loss(&v, &buf, &input, &mask).unwrap().value().item();
    let logits = gcn_forward(&v, &input, ForwardMode::Eval).unwrap();
    let direct = masked_cross_entropy(logits.select_rows(&[1, 12, 25, 33]), &[0, 1, 2, 3], &mask).unwrap();
    assert_eq!(got, direct.value().item());
}

#[test]
fn sir_of_perfect_prediction_vanishes() {
    let (_, input) = sbm_input();
    let mut p = init_params_with_widths(6, (8, 5), 2, 1);
    p.tensors_mut()[5] = Tensor::vector(vec![0.0, 60.0]);
    for t in &mut p.tensors_mut()[4..5] {
        *t = t.map(|_| 0.0);
    }
    let tape = Tape::new();
    let buf = buffer_of(&[(1, 4)]);
    let l = sir_loss(&p.register(&tape), &buf, &input, &all_visible(2)).unwrap();
    assert!(l.value().item() < 1e-20);
}

#[test]
fn buffered_node_of_hidden_class_is_rejected() {
    let (_, input) = sbm_input();
    let p = init_params_with_widths(6, (8, 5), 4, 1);
    let tape = Tape::new();
    let buf = buffer_of(&[(3, 30)]);
    let mask = SeenClassMask::with_visible(4, &[0, 1]);
    assert_eq!(sir_loss(&p.register(&tape), &buf, &input, &mask).unwrap_err(), LossError::HiddenLabel(3));
}

struct Fixture {
    input: GraphInput,
    theta0: ParamSet,
    theta: ParamSet,
}

fn fixture() -> Fixture {
    let (_, input) = sbm_input();
    Fixture { input, theta0: init_params_with_widths(6, (8, 5), 4, 7), theta: init_params_with_widths(6, (8, 5), 4, 8) }
}

fn eval_logits(p: &ParamSet, input: &GraphInput) -> Tensor {
    predict(p, input).unwrap()
}

#[test]
fn inner_loss_reduces_to_ce_with_empty_buffer() {
    let f = fixture();
    let tape = Tape::new();
    let v = f.theta.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let buffer = ReplayBuffer::new(BufferScope::MetaEpoch);
    let mask = SeenClassMask::with_visible(4, &[0, 1]);
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[], mask: &mask, stage: 0 };
    let (nodes, labels) = ([0usize, 1, 11, 12], [0usize, 0, 1, 1]);
    let plugin = KdSir::new(true, true);
    let l = inner_loss(&ctx, Batch { nodes: &nodes, labels: &labels }, &plugin).unwrap();
    let ce = masked_cross_entropy(student.select_rows(&nodes), &labels, &mask).unwrap();
    assert_eq!(l.value().item(), ce.value().item());
    assert_eq!(plugin.kd_evals() + plugin.sir_evals(), 0);
}

#[test]
fn inner_loss_is_the_sum_of_its_terms() {
    let f = fixture();
    let tape = Tape::new();
    let v = f.theta.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let buffer = buffer_of(&[(0, 2), (1, 13)]);
    let mask = SeenClassMask::with_visible(4, &[0, 1, 2]);
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[], mask: &mask, stage: 0 };
    let (nodes, labels) = ([21usize, 22, 23], [2usize, 2, 2]);
    let total = inner_loss(&ctx, Batch { nodes: &nodes, labels: &labels }, &KdSir::new(true, true)).unwrap();

    // independent terms from plain tensors
    let s = eval_logits(&f.theta, &f.input);
    let t = eval_logits(&f.theta0, &f.input);
    let vis = [0usize, 1, 2];
    let ce_rows = |rows: &[usize], ys: &[usize]| -> f64 {
        rows.iter()
            .zip(ys)
            .map(|(&r, &y)| vis.iter().map(|&c| s.at(r, c).exp()).sum::<f64>().ln() - s.at(r, y))
            .sum::<f64>()
            / rows.len() as f64
    };
    let ce = ce_rows(&nodes, &labels);
    let kd = [2usize, 13].iter().flat_map(|&n| vis.iter().map(move |&c| (n, c)))
        .map(|(n, c)| (s.at(n, c) - t.at(n, c)).powi(2))
        .sum::<f64>()
        / 6.0;
    let sir = ce_rows(&[2, 13], &[0, 1]);
    assert!((total.value().item() - (ce + kd + sir)).abs() < 1e-12);
}

#[test]
fn kd_vanishes_when_student_equals_teacher() {
    let f = fixture();
    let tape = Tape::new();
    let v = f.theta0.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let buffer = buffer_of(&[(0, 2), (1, 13)]);
    let mask = all_visible(4);
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[5, 6], mask: &mask, stage: 1 };
    let kd_only = KdSir::new(true, false);
    assert_eq!(kd_only.inner_term(&ctx).unwrap().value().item(), 0.0);
    assert_eq!(kd_only.outer_term(&ctx).unwrap().value().item(), 0.0);
    assert_eq!(kd_only.incremental_term(&ctx).unwrap().value().item(), 0.0);
}

#[test]
fn outer_loss_cases() {
    let f = fixture();
    let tape = Tape::new();
    let v = f.theta.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let buffer = buffer_of(&[(0, 2), (1, 13)]);
    let mask = SeenClassMask::with_visible(4, &[0, 1, 2, 3]);
    let plugin = KdSir::new(true, true);
    let (qn, ql) = ([31usize, 32], [3usize, 3]);
    let q = Batch { nodes: &qn, labels: &ql };
    let ce = masked_cross_entropy(student.select_rows(&qn), &ql, &mask).unwrap().value().item();

    // first pseudo-task: no earlier queries, no replay term even with a buffer
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[], mask: &mask, stage: 0 };
    assert_eq!(outer_loss(&ctx, q, &plugin).unwrap().value().item(), ce);
    assert_eq!(plugin.sir_evals(), 0);

    // third pseudo-task: distillation over Q1 and Q2
    let past = [1usize, 4, 12, 15];
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &past, mask: &mask, stage: 2 };
    let got = outer_loss(&ctx, q, &plugin).unwrap().value().item();
    let (s, t) = (eval_logits(&f.theta, &f.input), eval_logits(&f.theta0, &f.input));
    let kd = past.iter().flat_map(|&n| (0..4).map(move |c| (n, c)))
        .map(|(n, c)| (s.at(n, c) - t.at(n, c)).powi(2))
        .sum::<f64>()
        / 16.0;
    assert!((got - (ce + kd)).abs() < 1e-12);
    assert_eq!(plugin.sir_evals(), 0);
}

#[test]
fn incremental_loss_cases() {
    let f = fixture();
    let mask = all_visible(4);
    let (sn, sl) = ([33usize, 34, 35], [3usize, 3, 3]);
    let plugin = KdSir::new(true, true);

    // empty buffer and an unchanged student: plain CE
    let tape = Tape::new();
    let v = f.theta0.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let empty = ReplayBuffer::new(BufferScope::IncrementalStage);
    let ctx = LossContext { student, teacher: &teacher, buffer: &empty, past_queries: &[], mask: &mask, stage: 2 };
    let ce = masked_cross_entropy(student.select_rows(&sn), &sl, &mask).unwrap();
    let l = incremental_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &plugin).unwrap();
    assert_eq!(l.value().item(), ce.value().item());

    // novel task 2 with a buffer of base classes and task 1: term-wise sum
    let buffer = buffer_of(&[(0, 3), (1, 14), (2, 24)]);
    let tape = Tape::new();
    let v = f.theta.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[], mask: &mask, stage: 2 };
    let total = incremental_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &plugin).unwrap().value().item();
    let ce = masked_cross_entropy(student.select_rows(&sn), &sl, &mask).unwrap().value().item();
    let kd = kd_loss(&f.theta0, &v, &[3, 14, 24], &f.input, &mask).unwrap().value().item();
    let sir = sir_loss(&v, &buffer, &f.input, &mask).unwrap().value().item();
    assert!((total - (ce + kd + sir)).abs() < 1e-12);
}

#[test]
fn disabled_terms_contribute_nothing_to_values_or_gradients() {
    let f = fixture();
    let buffer = buffer_of(&[(0, 3), (1, 14)]);
    let mask = all_visible(4);
    let (sn, sl) = ([33usize, 34], [3usize, 3]);
    let teacher = Teacher::new(f.theta0.clone(), &f.input);
    let run = |plugin: &KdSir| {
        let tape = Tape::new();
        let v = f.theta.register(&tape);
        let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
        let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[], mask: &mask, stage: 1 };
        let l = incremental_loss(&ctx, Batch { nodes: &sn, labels: &sl }, plugin).unwrap();
        let g: Vec<f64> = tape.gradient(l, v.vars(), false).unwrap().iter().flat_map(|t| t.value().data().to_vec()).collect();
        (l.value().item(), g)
    };
    let none = KdSir::new(false, false);
    let (v0, g0) = run(&none);
    assert_eq!(none.kd_evals() + none.sir_evals(), 0);
    let tape = Tape::new();
    let v = f.theta.register(&tape);
    let student = gcn_forward(&v, &f.input, ForwardMode::Eval).unwrap();
    let ce = masked_cross_entropy(student.select_rows(&sn), &sl, &mask).unwrap();
    let gce: Vec<f64> = tape.gradient(ce, v.vars(), false).unwrap().iter().flat_map(|t| t.value().data().to_vec()).collect();
    assert_eq!(v0, ce.value().item());
    assert_eq!(g0, gce);

    let kd_only = KdSir::new(true, false);
    let sir_only = KdSir::new(false, true);
    let (vk, _) = run(&kd_only);
    let (vs, _) = run(&sir_only);
    assert_eq!((kd_only.kd_evals(), kd_only.sir_evals()), (1, 0));
    assert_eq!((sir_only.kd_evals(), sir_only.sir_evals()), (0, 1));
    let (vb, _) = run(&KdSir::new(true, true));
    assert!(((vk - v0) + (vs - v0) - (vb - v0)).abs() < 1e-12);
}

#[test]
fn composed_loss_gradient_matches_finite_differences() {
    let input = graph_input(10, 4, 21);
    let theta0 = init_params_with_widths(4, (5, 4), 3, 1);
    let theta = init_params_with_widths(4, (5, 4), 3, 2);
    let buffer = buffer_of(&[(0, 0), (1, 1)]);
    let mask = all_visible(3);
    let teacher = Teacher::new(theta0, &input);
    let (sn, sl) = ([5usize, 6, 7], [2usize, 2, 1]);
    let value = |p: &ParamSet| {
        let tape = Tape::new();
        let v = p.register(&tape);
        let student = gcn_forward(&v, &input, ForwardMode::Eval).unwrap();
        let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[8, 9], mask: &mask, stage: 1 };
        let l = incremental_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &KdSir::new(true, true)).unwrap();
        let o = outer_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &KdSir::new(true, true)).unwrap();
        l.add(o).value().item()
    };
    let tape = Tape::new();
    let v = theta.register(&tape);
    let student = gcn_forward(&v, &input, ForwardMode::Eval).unwrap();
    let ctx = LossContext { student, teacher: &teacher, buffer: &buffer, past_queries: &[8, 9], mask: &mask, stage: 1 };
    let l = incremental_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &KdSir::new(true, true)).unwrap();
    let o = outer_loss(&ctx, Batch { nodes: &sn, labels: &sl }, &KdSir::new(true, true)).unwrap();
    let g: Vec<f64> = tape.gradient(l.add(o), v.vars(), false).unwrap().iter().flat_map(|t| t.value().data().to_vec()).collect();
    let spec = FdSpec::default();
    let fd = finite_diff_gradient(|flat| value(&theta.with_flat(flat)), &theta.flatten(), spec).unwrap();
    let err = max_rel_error(&g, &fd, spec.floor);
    assert!(err < 1e-5, "relative error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn never_visible_column_does_not_change_ce(seed in 0u64..10_000, junk in -1e3f64..1e3) {
        let logits = random_tensor(&[4, 3], seed).scale(4.0);
        let mut wider = Vec::new();
        for r in 0..4 {
            wider.extend_from_slice(logits.row(r));
            wider.push(junk);
        }
        let labels = [0usize, 2, 1, 2];
        let tape = Tape::new();
        let a = masked_cross_entropy(tape.param(logits), &labels, &all_visible(3)).unwrap();
        let mask = SeenClassMask::with_visible(4, &[0, 1, 2]);
        let b = masked_cross_entropy(tape.param(Tensor::matrix(4, 4, wider)), &labels, &mask).unwrap();
        prop_assert!((a.value().item() - b.value().item()).abs() < 1e-12);
    }

    #[test]
    fn losses_are_finite_and_non_negative(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let s = random_tensor(&[5, 4], seed).scale(scale);
        let t = random_tensor(&[5, 4], seed + 1).scale(scale);
        let tape = Tape::new();
        let x = tape.param(s.clone());
        let mask = SeenClassMask::with_visible(4, &[0, 1, 3]);
        let ce = masked_cross_entropy(x, &[0, 1, 3, 3, 0], &mask).unwrap().value().item();
        prop_assert!(ce.is_finite() && ce >= 0.0);
        let kd = kd_from_logits(&t, x, &[0, 2, 4], &mask).unwrap().value().item();
        prop_assert!(kd.is_finite() && kd >= 0.0);
        let same = kd_from_logits(&s, x, &[0, 2, 4], &mask).unwrap().value().item();
        prop_assert_eq!(same, 0.0);
    }
}

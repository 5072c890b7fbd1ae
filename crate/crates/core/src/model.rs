//! Three-layer GCN (`nfeat -> 32 -> 16 -> nclass`) producing node logits.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, AutodiffError, Tape, Var};
use crate::graph::NormAdj;
use crate::tensor::Tensor;
use crate::RunRng;

/// Default hidden widths.
pub const HIDDEN: (usize, usize) = (32, 16);

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Weights and biases of the GCN: `w1 [nfeat x h1]`, `b1 [h1]`,
/// `w2 [h1 x h2]`, `b2 [h2]`, `w3 [h2 x nclass]`, `b3 [nclass]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Checks the six tensors chain into a valid three-layer GCN.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let bad = |msg: &str| Err(ModelError::ShapeMismatch(msg.into()));
        if tensors.len() != 6 {
            return bad("expected six parameter tensors");
        }
        for layer in 0..3 {
            let (w, b) = (&tensors[2 * layer], &tensors[2 * layer + 1]);
            if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                return bad("weight/bias shapes disagree");
            }
            if layer > 0 && tensors[2 * layer - 2].shape()[1] != w.shape()[0] {
                return bad("consecutive layer widths disagree");
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn num_features(&self) -> usize {
        self.tensors[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.tensors[5].len()
    }

    /// Total scalar parameter count.
    pub fn dim(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten), keeping this set's shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.dim(), "flat parameter length mismatch");
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let data = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::from_vec(t.shape(), data)
            })
            .collect();
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    /// Registers every tensor on `tape` as a differentiable leaf.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars { vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.flatten().iter().zip(other.flatten()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// A [`ParamSet`] living on a tape, possibly as the output of earlier
/// differentiable updates.
#[derive(Clone, Debug)]
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        assert_eq!(vars.len(), 6, "a GCN has six parameter tensors");
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn values(&self) -> ParamSet {
        ParamSet { tensors: self.vars.iter().map(|v| (*v.value()).clone()).collect() }
    }

    pub fn detach(&self) -> Self {
        Self { vars: self.vars.iter().map(Var::detach).collect() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(nfeat: usize, nclass: usize, seed: u64) -> ParamSet {
    init_params_with_widths(nfeat, HIDDEN, nclass, seed)
}

pub fn init_params_with_widths(nfeat: usize, hidden: (usize, usize), nclass: usize, seed: u64) -> ParamSet {
    assert!(nfeat >= 1 && nclass >= 1 && hidden.0 >= 1 && hidden.1 >= 1, "layer widths must be positive");
    let mut rng = crate::seeded_rng(seed);
    let dims = [(nfeat, hidden.0), (hidden.0, hidden.1), (hidden.1, nclass)];
    let mut tensors = Vec::with_capacity(6);
    for (fan_in, fan_out) in dims {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        tensors.push(Tensor::matrix(fan_in, fan_out, data));
        tensors.push(Tensor::zeros(&[fan_out]));
    }
    ParamSet { tensors }
}

/// Adjacency plus node features, with `Â·X` precomputed.
#[derive(Debug, Clone)]
pub struct GraphInput {
    adj: NormAdj,
    propagated: Rc<Tensor>,
}

impl GraphInput {
    pub fn new(adj: NormAdj, features: &Tensor) -> Result<Self, ModelError> {
        if features.shape().len() != 2 || features.rows() != adj.dim() {
            return Err(ModelError::ShapeMismatch(alloc::format!(
                "features {:?} vs adjacency of dimension {}",
                features.shape(),
                adj.dim()
            )));
        }
        let propagated = Rc::new(adj.matrix().matmul_dense(features));
        Ok(Self { adj, propagated })
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.dim()
    }

    pub fn num_features(&self) -> usize {
        self.propagated.cols()
    }

    pub fn adj(&self) -> &NormAdj {
        &self.adj
    }
}

/// Dropout behaviour of a forward pass.
pub enum ForwardMode<'a> {
    Train { rate: f64, rng: &'a mut RunRng },
    Eval,
}

/// `H1 = relu(Â X W1 + b1)`, `H2 = relu(Â H1' W2 + b2)`, `logits = Â H2' W3 + b3`,
/// where primes mark dropout in training mode.
pub fn gcn_forward<'t>(
    params: &ParamVars<'t>,
    input: &GraphInput,
    mode: ForwardMode<'_>,
) -> Result<Var<'t>, ModelError> {
    let [w1, b1, w2, b2, w3, b3] = params.vars[..] else {
        return Err(ModelError::ShapeMismatch("expected six parameters".into()));
    };
    if w1.shape()[0] != input.num_features() {
        return Err(ModelError::ShapeMismatch(alloc::format!(
            "w1 expects {} features, graph has {}",
            w1.shape()[0],
            input.num_features()
        )));
    }
    let tape = params.tape();
    let mut mode = mode;
    let mut drop = |h: Var<'t>| -> Result<Var<'t>, ModelError> {
        match &mut mode {
            ForwardMode::Eval => Ok(h),
            ForwardMode::Train { rate, rng } => Ok(h.dropout(dropout_mask(&h.shape(), *rate, *rng)?)),
        }
    };
    let adj = input.adj.operand();
    let x = tape.constant((*input.propagated).clone());
    let h1 = x.matmul(w1).add_row_broadcast(b1).relu();
    check_finite(&h1, 1)?;
    let h1 = drop(h1)?;
    let h2 = h1.matmul(w2).spmm_left(adj).add_row_broadcast(b2).relu();
    check_finite(&h2, 2)?;
    let h2 = drop(h2)?;
    let logits = h2.matmul(w3).spmm_left(adj).add_row_broadcast(b3);
    check_finite(&logits, 3)?;
    Ok(logits)
}

fn check_finite(v: &Var<'_>, layer: usize) -> Result<(), ModelError> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

/// Eval-mode logits as a plain tensor.
pub fn predict(params: &ParamSet, input: &GraphInput) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let logits = gcn_forward(&vars, input, ForwardMode::Eval)?;
    let out = (*logits.value()).clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;
    use alloc::vec;

    fn small_input(n: usize, nfeat: usize, seed: u64) -> (GraphInput, Tensor) {
        let mut rng = crate::seeded_rng(seed);
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).filter(|_| rng.random::<f64>() < 0.4).collect();
        let mut rng = crate::seeded_rng(seed + 1);
        let feats = Tensor::matrix(n, nfeat, (0..n * nfeat).map(|_| rng.random_range(-1.0..1.0)).collect());
        let adj = normalize_adjacency(&edges, n).unwrap();
        (GraphInput::new(adj, &feats).unwrap(), feats)
    }

    #[test]
    fn init_contract() {
        let p = init_params(10, 4, 3);
        assert_eq!(p, init_params(10, 4, 3));
        for b in [1, 3, 5] {
            assert!(p.tensors()[b].data().iter().all(|&v| v == 0.0));
        }
        let bound = (6.0f64 / 42.0).sqrt();
        assert!(p.tensors()[0].data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.tensors()[0].shape(), &[10, 32]);
        assert_eq!(p.tensors()[4].shape(), &[16, 4]);
        assert_ne!(p, init_params(10, 4, 4));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let (input, _) = small_input(5, 3, 1);
        let p = init_params(3, 2, 0).zeros_like();
        let logits = predict(&p, &input).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_rate_zero_matches_eval() {
        let (input, _) = small_input(8, 4, 2);
        let p = init_params(4, 3, 5);
        assert_eq!(predict(&p, &input).unwrap(), predict(&p, &input).unwrap());
        let tape = Tape::new();
        let vars = p.register(&tape);
        let mut rng = crate::seeded_rng(11);
        let train = gcn_forward(&vars, &input, ForwardMode::Train { rate: 0.0, rng: &mut rng }).unwrap();
        assert_eq!(*train.value(), predict(&p, &input).unwrap());
    }

    #[test]
    fn single_node_scalar_chain() {
        // One node, nfeat = 1, widths (2, 2), 2 classes. Â = [[1]].
        let x = 0.7;
        let w1 = [0.5, -1.2];
        let b1 = [0.1, 0.3];
        let w2 = [[1.0, -0.4], [0.2, 0.9]];
        let b2 = [-0.05, 0.02];
        let w3 = [[0.3, -0.7], [1.1, 0.25]];
        let b3 = [0.01, -0.02];
        let p = ParamSet::from_tensors(vec![
            Tensor::matrix(1, 2, w1.to_vec()),
            Tensor::vector(b1.to_vec()),
            Tensor::matrix(2, 2, vec![w2[0][0], w2[0][1], w2[1][0], w2[1][1]]),
            Tensor::vector(b2.to_vec()),
            Tensor::matrix(2, 2, vec![w3[0][0], w3[0][1], w3[1][0], w3[1][1]]),
            Tensor::vector(b3.to_vec()),
        ])
        .unwrap();
        let relu = |v: f64| v.max(0.0);
        let h1: Vec<f64> = (0..2).map(|j| relu(x * w1[j] + b1[j])).collect();
        let h2: Vec<f64> = (0..2).map(|j| relu(h1[0] * w2[0][j] + h1[1] * w2[1][j] + b2[j])).collect();
        let want: Vec<f64> = (0..2).map(|j| h2[0] * w3[0][j] + h2[1] * w3[1][j] + b3[j]).collect();
        let adj = normalize_adjacency(&[], 1).unwrap();
        let input = GraphInput::new(adj, &Tensor::matrix(1, 1, vec![x])).unwrap();
        let got = predict(&p, &input).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (input, _) = small_input(4, 3, 0);
        let p = init_params(5, 2, 0);
        assert!(matches!(predict(&p, &input), Err(ModelError::ShapeMismatch(_))));
        let adj = normalize_adjacency(&[], 3).unwrap();
        assert!(GraphInput::new(adj, &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let (input, _) = small_input(4, 3, 0);
        let mut p = init_params(3, 2, 0);
        p.tensors_mut()[1].data_mut()[0] = f64::INFINITY;
        assert_eq!(predict(&p, &input), Err(ModelError::NonFinite { layer: 1 }));
    }

    #[test]
    fn node_permutation_equivariance() {
        let n = 7;
        let mut rng = crate::seeded_rng(4);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|_| rng.random::<f64>() < 0.5)
            .collect();
        let feats = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let perm = [3, 0, 6, 1, 5, 2, 4]; // new index i holds old node perm[i]
        let mut inv = [0; 7];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let p_edges: Vec<_> = edges.iter().map(|&(u, v)| (inv[u], inv[v])).collect();
        let p_feats = feats.select_rows(&perm);
        let params = init_params(3, 4, 8);
        let a = predict(&params, &GraphInput::new(normalize_adjacency(&edges, n).unwrap(), &feats).unwrap()).unwrap();
        let b = predict(&params, &GraphInput::new(normalize_adjacency(&p_edges, n).unwrap(), &p_feats).unwrap())
            .unwrap();
        let a_perm = a.select_rows(&perm);
        for (x, y) in a_perm.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let p = init_params(3, 2, 1);
        assert_eq!(p.with_flat(&p.flatten()), p);
        assert_eq!(p.dim(), 3 * 32 + 32 + 32 * 16 + 16 + 16 * 2 + 2);
    }
}

//! Node-classification graphs, the GCN propagation operator and a
//! stochastic-block-model generator.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::SparseOperand;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({u}, {v}) has an endpoint outside 0..{num_nodes}")]
    EndpointOutOfRange { u: usize, v: usize, num_nodes: usize },
    #[error("features have {features} rows but there are {labels} labels")]
    RowCountMismatch { features: usize, labels: usize },
    #[error("node {node} has label {label}, outside 0..{num_classes}")]
    LabelOutOfRange { node: usize, label: usize, num_classes: usize },
    #[error("class {0} has no nodes")]
    EmptyClass(usize),
    #[error("invalid stochastic block model config: {0}")]
    InvalidSbm(&'static str),
}

/// An undirected, unweighted graph with node features and class labels.
///
/// Edges are stored once as `(min, max)`, sorted and deduplicated; self-loops
/// are dropped because normalization adds them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDataset {
    num_nodes: usize,
    num_classes: usize,
    features: Tensor,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl GraphDataset {
    /// Validates and canonicalizes a dataset.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        let num_nodes = labels.len();
        let feature_rows = if features.shape().len() == 2 { features.rows() } else { usize::MAX };
        if feature_rows != num_nodes {
            return Err(GraphError::RowCountMismatch { features: feature_rows, labels: num_nodes });
        }
        let mut present = vec![false; num_classes];
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(GraphError::LabelOutOfRange { node, label, num_classes });
            }
            present[label] = true;
        }
        if let Some(c) = present.iter().position(|p| !p) {
            return Err(GraphError::EmptyClass(c));
        }
        let edges = canonical_edges(edges, num_nodes)?;
        Ok(Self { num_nodes, num_classes, features, labels, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Node ids of each class, in increasing order.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (node, &label) in self.labels.iter().enumerate() {
            out[label].push(node);
        }
        out
    }

    pub fn normalized_adjacency(&self) -> NormAdj {
        normalize_adjacency(&self.edges, self.num_nodes).expect("dataset edges are validated")
    }

    /// Symmetric normalization over the subgraph induced by `visible` nodes.
    /// Hidden nodes keep their index but only their self-loop.
    pub fn induced_adjacency(&self, visible: &[bool]) -> NormAdj {
        let edges: Vec<_> = self.edges.iter().copied().filter(|&(u, v)| visible[u] && visible[v]).collect();
        normalize_adjacency(&edges, self.num_nodes).expect("dataset edges are validated")
    }
}

fn canonical_edges(
    edges: impl IntoIterator<Item = (usize, usize)>,
    num_nodes: usize,
) -> Result<Vec<(usize, usize)>, GraphError> {
    let mut set = BTreeSet::new();
    for (u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(GraphError::EndpointOutOfRange { u, v, num_nodes });
        }
        if u != v {
            set.insert((u.min(v), u.max(v)));
        }
    }
    Ok(set.into_iter().collect())
}

/// Which propagation operator to build from the binary adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `D^-1/2 (A + I) D^-1/2`
    #[default]
    Symmetric,
    /// `D^-1 (A + I)`
    Row,
}

/// Normalized adjacency with self-loops, as a constant sparse operand.
#[derive(Debug, Clone)]
pub struct NormAdj {
    operand: SparseOperand,
}

impl NormAdj {
    pub fn operand(&self) -> &SparseOperand {
        &self.operand
    }

    pub fn matrix(&self) -> &CsrMatrix {
        self.operand.matrix()
    }

    pub fn dim(&self) -> usize {
        self.matrix().rows()
    }
}

/// `D^-1/2 (A + I) D^-1/2` where `A` is the binary symmetric adjacency of
/// `edges` and `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(edges: &[(usize, usize)], num_nodes: usize) -> Result<NormAdj, GraphError> {
    normalize_adjacency_with(edges, num_nodes, Normalization::Symmetric)
}

pub fn normalize_adjacency_with(
    edges: &[(usize, usize)],
    num_nodes: usize,
    normalization: Normalization,
) -> Result<NormAdj, GraphError> {
    let edges = canonical_edges(edges.iter().copied(), num_nodes)?;
    let mut degree = vec![1.0f64; num_nodes];
    for &(u, v) in &edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let weight = |u: usize, v: usize| match normalization {
        Normalization::Symmetric => 1.0 / libm::sqrt(degree[u] * degree[v]),
        Normalization::Row => 1.0 / degree[u],
    };
    let mut triplets = Vec::with_capacity(num_nodes + 2 * edges.len());
    for u in 0..num_nodes {
        triplets.push((u, u, weight(u, u)));
    }
    for &(u, v) in &edges {
        triplets.push((u, v, weight(u, v)));
        triplets.push((v, u, weight(v, u)));
    }
    let matrix = CsrMatrix::from_triplets(num_nodes, num_nodes, triplets);
    let operand = match normalization {
        Normalization::Symmetric => SparseOperand::symmetric(Arc::new(matrix)),
        Normalization::Row => SparseOperand::new(matrix),
    };
    Ok(NormAdj { operand })
}

/// Parameters of the stochastic block model benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    /// Must be at least `classes`; class means are scaled one-hot vectors.
    pub feature_dim: usize,
    pub feature_noise: f64,
    #[serde(default = "one")]
    pub mean_scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            nodes_per_class: 80,
            intra_edge_prob: 0.1,
            inter_edge_prob: 0.005,
            feature_dim: 16,
            feature_noise: 0.5,
            mean_scale: 1.0,
            seed: 0,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.classes == 0 || self.nodes_per_class == 0 {
            return Err(GraphError::InvalidSbm("classes and nodes_per_class must be positive"));
        }
        if !prob(self.intra_edge_prob) || !prob(self.inter_edge_prob) {
            return Err(GraphError::InvalidSbm("edge probabilities must lie in [0, 1]"));
        }
        if self.intra_edge_prob <= self.inter_edge_prob {
            return Err(GraphError::InvalidSbm("intra_edge_prob must exceed inter_edge_prob"));
        }
        if self.feature_dim < self.classes {
            return Err(GraphError::InvalidSbm("feature_dim must be at least the class count"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(GraphError::InvalidSbm("feature_noise must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Samples a planted-partition graph. Node `i` belongs to class
/// `i / nodes_per_class`; features are the scaled one-hot class mean plus
/// isotropic Gaussian noise.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphDataset, GraphError> {
    cfg.validate()?;
    let mut rng = crate::seeded_rng(cfg.seed);
    let n = cfg.classes * cfg.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_class).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { cfg.intra_edge_prob } else { cfg.inter_edge_prob };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let noise = Normal::new(0.0, cfg.feature_noise).map_err(|_| GraphError::InvalidSbm("bad noise"))?;
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    for &label in &labels {
        for j in 0..cfg.feature_dim {
            let mean = if j == label { cfg.mean_scale } else { 0.0 };
            data.push(mean + noise.sample(&mut rng));
        }
    }
    GraphDataset::new(Tensor::matrix(n, cfg.feature_dim, data), labels, edges, cfg.classes)
}

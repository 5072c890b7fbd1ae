#![allow(dead_code)]

use gfscil_core::graph::{generate_sbm, normalize_adjacency, GraphDataset, SbmConfig};
use gfscil_core::model::GraphInput;
use gfscil_core::tensor::Tensor;
use gfscil_core::seeded_rng;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Entries bounded away from zero so relu kinks stay out of reach of a
/// finite-difference step.
pub fn kink_free_tensor(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Erdos-Renyi graph with a ring so no node is isolated.
pub fn random_graph(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded_rng(seed);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).filter(|(a, b)| a != b).collect();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn graph_input(n: usize, nfeat: usize, seed: u64) -> GraphInput {
    let adj = normalize_adjacency(&random_graph(n, 0.3, seed), n).unwrap();
    GraphInput::new(adj, &random_tensor(&[n, nfeat], seed + 1)).unwrap()
}

pub fn sbm(classes: usize, per_class: usize, feature_dim: usize, seed: u64) -> GraphDataset {
    generate_sbm(&SbmConfig {
        classes,
        nodes_per_class: per_class,
        intra_edge_prob: 0.5,
        inter_edge_prob: 0.05,
        feature_dim: feature_dim.max(classes),
        feature_noise: 0.5,
        mean_scale: 1.0,
        seed,
    })
    .unwrap()
}

//! Node relabeling. For FC graphs a relabeling must keep every node on its
//! own side, otherwise the left/right layout would be broken.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphError, LayerGraph};
use crate::tensor::Tensor;

/// Relabels node `i` as `permutation[i]`, moving its feature row and
/// rewriting edge endpoints. Edge order is kept.
pub fn permute_nodes(graph: &LayerGraph, permutation: &[usize]) -> Result<LayerGraph, GraphError> {
    let n = graph.num_nodes;
    if permutation.len() != n {
        return Err(GraphError::NotBijective(n));
    }
    let mut hit = vec![false; n];
    for &p in permutation {
        if p >= n || std::mem::replace(&mut hit[p], true) {
            return Err(GraphError::NotBijective(n));
        }
    }
    if let Some(left) = graph.num_left {
        if let Some(node) = (0..n).find(|&i| (i < left) != (permutation[i] < left)) {
            return Err(GraphError::CrossesSides { node });
        }
    }

    let d = graph.feature_dim();
    let mut features = vec![0.0f32; n * d];
    for (old, &new) in permutation.iter().enumerate() {
        features[new * d..(new + 1) * d].copy_from_slice(graph.node_features.row(old));
    }
    Ok(LayerGraph {
        num_nodes: n,
        node_features: Tensor::new(vec![n, d], features).expect("same shape as input"),
        edges: graph
            .edges
            .iter()
            .map(|&(u, v)| (permutation[u], permutation[v]))
            .collect(),
        edge_weights: graph.edge_weights.clone(),
        kind: graph.kind,
        num_left: graph.num_left,
    })
}

/// Range of node indices eligible for swapping: the left group for FC
/// graphs, every node otherwise.
fn swap_range(graph: &LayerGraph) -> usize {
    graph.num_left.unwrap_or(graph.num_nodes)
}

/// Applies `k` random swaps of node pairs. FC graphs only swap left-side
/// (input) nodes, dragging their outgoing edges along.
pub fn random_pair_swaps(graph: &LayerGraph, k: usize, seed: u64) -> LayerGraph {
    let mut perm: Vec<usize> = (0..graph.num_nodes).collect();
    let range = swap_range(graph);
    if range >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..k {
            let a = rng.random_range(0..range);
            let mut b = rng.random_range(0..range - 1);
            if b >= a {
                b += 1;
            }
            perm.swap(a, b);
        }
    }
    permute_nodes(graph, &perm).expect("swaps compose to a within-side bijection")
}

/// Uniformly random relabeling that keeps every node on its own side.
pub fn random_within_side_permutation(graph: &LayerGraph, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.num_nodes;
    let mut perm: Vec<usize> = (0..n).collect();
    match graph.num_left {
        Some(left) => {
            perm[..left].shuffle(&mut rng);
            perm[left..].shuffle(&mut rng);
        }
        None => perm.shuffle(&mut rng),
    }
    perm
}

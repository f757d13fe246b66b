//! Layer graphs built from bundle tensors.
//!
//! * FC bipartite: left nodes `0..c` are the layer inputs, right nodes
//!   `c..c+r` its outputs, one edge per weight.
//! * Conv flat: one node per output filter, features are the flattened
//!   filter, consecutive filters chained.
//! * Conv 2D: one node per filter cell, each `(f_out, f_in)` slice a grid with
//!   4-neighbour edges, consecutive slices joined at their centre cells.

mod features;
mod permute;

pub use features::{
    compute_node_features, FeatureConfig, FeatureConfigName, Histogram, NodeStats, Side, HIST_BINS,
};
pub use permute::{permute_nodes, random_pair_swaps, random_within_side_permutation};

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("expected a {expected}-D tensor, got dims {dims:?}")]
    BadShape { expected: usize, dims: Vec<usize> },
    #[error("non-finite weight at flat index {0}")]
    NonFinite(usize),
    #[error("node has no incident edges")]
    DegenerateNode,
    #[error("permutation is not a bijection on {0} nodes")]
    NotBijective(usize),
    #[error("permutation moves node {node} across the bipartite sides")]
    CrossesSides { node: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    FcBipartite,
    ConvFlat,
    Conv2d,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::FcBipartite => "fc_bipartite",
            GraphKind::ConvFlat => "conv_flat",
            GraphKind::Conv2d => "conv_2d",
        })
    }
}

/// Undirected, edge-weighted graph with one feature row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub num_nodes: usize,
    /// `[num_nodes, d]`
    pub node_features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f32>,
    pub kind: GraphKind,
    /// Size of the left group for FC graphs; nodes below it are inputs.
    pub num_left: Option<usize>,
}

impl LayerGraph {
    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn side_of(&self, node: usize) -> Option<Side> {
        self.num_left
            .map(|left| if node < left { Side::Left } else { Side::Right })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Checks the structural invariants: endpoints in range, no self-loops,
    /// no duplicate undirected edge, finite weights, one feature row per node.
    pub fn validate(&self) -> Result<(), GraphError> {
        let invalid = |m: String| Err(GraphError::Invalid(m));
        if self.node_features.ndim() != 2 || self.node_features.rows() != self.num_nodes {
            return invalid(format!(
                "feature dims {:?} for {} nodes",
                self.node_features.dims(),
                self.num_nodes
            ));
        }
        if self.edges.len() != self.edge_weights.len() {
            return invalid("edge/weight count mismatch".into());
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for (&(u, v), w) in self.edges.iter().zip(&self.edge_weights) {
            if u >= self.num_nodes || v >= self.num_nodes {
                return invalid(format!("edge ({u},{v}) out of range"));
            }
            if u == v {
                return invalid(format!("self-loop at {u}"));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return invalid(format!("duplicate edge ({u},{v})"));
            }
            if !w.is_finite() {
                return invalid(format!("non-finite weight on ({u},{v})"));
            }
        }
        Ok(())
    }

    /// Debug dump: `num_nodes`, `kind`, row-major `features` and
    /// `edges` as `[u, v, weight]` triples.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_nodes": self.num_nodes,
            "kind": self.kind,
            "feature_dim": self.feature_dim(),
            "features": self.node_features.data(),
            "edges": self
                .edges
                .iter()
                .zip(&self.edge_weights)
                .map(|(&(u, v), &w)| serde_json::json!([u, v, w]))
                .collect::<Vec<_>>(),
        })
    }
}

fn check_finite(t: &Tensor) -> Result<(), GraphError> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(GraphError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_rank(t: &Tensor, rank: usize) -> Result<(), GraphError> {
    if t.ndim() != rank || t.dims().contains(&0) {
        return Err(GraphError::BadShape {
            expected: rank,
            dims: t.dims().to_vec(),
        });
    }
    check_finite(t)
}

/// Complete bipartite graph of an `[r, c]` FC weight matrix. Edge
/// `(j, c + i)` carries `fc_weight[i][j]`.
pub fn build_fc_bipartite(fc_weight: &Tensor, config: &FeatureConfig) -> Result<LayerGraph, GraphError> {
    check_rank(fc_weight, 2)?;
    let (r, c) = (fc_weight.dims()[0], fc_weight.dims()[1]);
    let w = fc_weight.data();

    let mut features = Vec::with_capacity((r + c) * config.len());
    let mut column = vec![0.0f32; r];
    for j in 0..c {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = w[i * c + j];
        }
        features.extend(compute_node_features(&column, Side::Left, config)?);
    }
    for i in 0..r {
        features.extend(compute_node_features(&w[i * c..(i + 1) * c], Side::Right, config)?);
    }

    let mut edges = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            edges.push((j, c + i));
        }
    }
    Ok(LayerGraph {
        num_nodes: r + c,
        node_features: Tensor::new(vec![r + c, config.len()], features)
            .expect("feature rows sized by config"),
        edges,
        edge_weights: w.to_vec(),
        kind: GraphKind::FcBipartite,
        num_left: Some(c),
    })
}

/// One node per output filter carrying its flattened weights; filters are
/// chained in storage order with unit edge weights.
pub fn build_conv_flat(conv: &Tensor) -> Result<LayerGraph, GraphError> {
    check_rank(conv, 4)?;
    let f_out = conv.dims()[0];
    let per_filter = conv.numel() / f_out;
    let edges: Vec<(usize, usize)> = (1..f_out).map(|i| (i - 1, i)).collect();
    Ok(LayerGraph {
        num_nodes: f_out,
        node_features: Tensor::new(vec![f_out, per_filter], conv.data().to_vec())
            .expect("conv numel divides by F_out"),
        edge_weights: vec![1.0; edges.len()],
        edges,
        kind: GraphKind::ConvFlat,
        num_left: None,
    })
}

/// One node per filter cell with its weight as the single feature.
pub fn build_conv_2d(conv: &Tensor) -> Result<LayerGraph, GraphError> {
    check_rank(conv, 4)?;
    let (f_out, f_in, h, w) = (conv.dims()[0], conv.dims()[1], conv.dims()[2], conv.dims()[3]);
    let slices = f_out * f_in;
    let cells = h * w;
    let mut edges = Vec::with_capacity(slices * (h * (w - 1) + w * (h - 1)) + slices - 1);
    for s in 0..slices {
        let base = s * cells;
        for y in 0..h {
            for x in 0..w {
                let node = base + y * w + x;
                if x + 1 < w {
                    edges.push((node, node + 1));
                }
                if y + 1 < h {
                    edges.push((node, node + w));
                }
            }
        }
    }
    let center = (h / 2) * w + w / 2;
    for s in 1..slices {
        edges.push(((s - 1) * cells + center, s * cells + center));
    }
    let n = slices * cells;
    Ok(LayerGraph {
        num_nodes: n,
        node_features: Tensor::new(vec![n, 1], conv.data().to_vec()).expect("one feature per cell"),
        edge_weights: vec![1.0; edges.len()],
        edges,
        kind: GraphKind::Conv2d,
        num_left: None,
    })
}

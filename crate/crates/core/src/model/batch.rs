use std::sync::Arc;

use crate::bundle::Label;
use crate::graph::LayerGraph;
use crate::tensor::{Adjacency, Tensor};

use super::ModelError;

/// Disjoint union of graphs. Node indices of graph `g` are shifted by the
/// node count of graphs `0..g`; every undirected edge appears as two
/// directed messages.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub features: Tensor,
    pub adjacency: Arc<Adjacency>,
    pub graph_ids: Arc<[usize]>,
    pub num_graphs: usize,
    pub labels: Option<Vec<Label>>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[&LayerGraph]) -> Result<Self, ModelError> {
        let Some(first) = graphs.first() else {
            return Err(ModelError::EmptyBatch);
        };
        let d = first.feature_dim();
        let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
        let total_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();

        let mut features = Vec::with_capacity(total_nodes * d);
        let mut sources = Vec::with_capacity(2 * total_edges);
        let mut targets = Vec::with_capacity(2 * total_edges);
        let mut weights = Vec::with_capacity(2 * total_edges);
        let mut graph_ids = Vec::with_capacity(total_nodes);
        let mut offset = 0;
        for (gid, g) in graphs.iter().enumerate() {
            if g.num_nodes == 0 {
                return Err(ModelError::EmptyGraph(gid));
            }
            if g.feature_dim() != d {
                return Err(ModelError::FeatureWidth {
                    expected: d,
                    found: g.feature_dim(),
                });
            }
            features.extend_from_slice(g.node_features.data());
            for (&(u, v), &w) in g.edges.iter().zip(&g.edge_weights) {
                sources.extend([u + offset, v + offset]);
                targets.extend([v + offset, u + offset]);
                weights.extend([w, w]);
            }
            graph_ids.extend(std::iter::repeat_n(gid, g.num_nodes));
            offset += g.num_nodes;
        }
        let adjacency = Adjacency::new(total_nodes, &sources, &targets, &weights)?;
        Ok(Self {
            features: Tensor::new(vec![total_nodes, d], features).expect("rows of width d"),
            adjacency: Arc::new(adjacency),
            graph_ids: graph_ids.into(),
            num_graphs: graphs.len(),
            labels: None,
        })
    }

    /// Union of already-built batches, in order. Identical to building the
    /// union from the underlying graphs, but skips regrouping the messages.
    pub fn concat(parts: &[&GraphBatch]) -> Result<Self, ModelError> {
        let Some(first) = parts.first() else {
            return Err(ModelError::EmptyBatch);
        };
        let d = first.feature_dim();
        if let Some(bad) = parts.iter().find(|p| p.feature_dim() != d) {
            return Err(ModelError::FeatureWidth {
                expected: d,
                found: bad.feature_dim(),
            });
        }
        let total_nodes: usize = parts.iter().map(|p| p.num_nodes()).sum();
        let mut features = Vec::with_capacity(total_nodes * d);
        let mut graph_ids = Vec::with_capacity(total_nodes);
        let mut shift = 0;
        for p in parts {
            features.extend_from_slice(p.features.data());
            graph_ids.extend(p.graph_ids.iter().map(|&g| g + shift));
            shift += p.num_graphs;
        }
        let labels = parts
            .iter()
            .map(|p| p.labels.clone())
            .collect::<Option<Vec<_>>>()
            .map(|l| l.concat());
        let adjacency: Vec<&Adjacency> = parts.iter().map(|p| &*p.adjacency).collect();
        Ok(Self {
            features: Tensor::new(vec![total_nodes, d], features).expect("rows of width d"),
            adjacency: Arc::new(Adjacency::concat(&adjacency)),
            graph_ids: graph_ids.into(),
            num_graphs: shift,
            labels,
        })
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self, ModelError> {
        if labels.len() != self.num_graphs {
            return Err(ModelError::LabelCount {
                graphs: self.num_graphs,
                labels: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

//! Per-node statistics of incident edge weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GraphError;

pub const HIST_BINS: usize = 5;

/// Named node-feature layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureConfigName {
    #[serde(rename = "GCN_5")]
    Gcn5,
    #[serde(rename = "GCN_7")]
    Gcn7,
    #[serde(rename = "GCN_16a")]
    Gcn16a,
    #[serde(rename = "GCN_16b")]
    Gcn16b,
    #[serde(rename = "GCN_18")]
    Gcn18,
}

impl FeatureConfigName {
    pub const ALL: [FeatureConfigName; 5] = [
        FeatureConfigName::Gcn5,
        FeatureConfigName::Gcn7,
        FeatureConfigName::Gcn16a,
        FeatureConfigName::Gcn16b,
        FeatureConfigName::Gcn18,
    ];

    /// Stable numeric id used in checkpoints.
    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureConfigName::Gcn5 => "GCN_5",
            FeatureConfigName::Gcn7 => "GCN_7",
            FeatureConfigName::Gcn16a => "GCN_16a",
            FeatureConfigName::Gcn16b => "GCN_16b",
            FeatureConfigName::Gcn18 => "GCN_18",
        }
    }
}

impl fmt::Display for FeatureConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureConfigName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown feature config {s:?}"))
    }
}

/// Which feature groups make up a node vector. Groups always appear in the
/// order of the fields below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    pub name: FeatureConfigName,
    pub const1: bool,
    pub side: bool,
    pub mean: bool,
    pub min: bool,
    pub max: bool,
    pub sum: bool,
    pub hist_counts: bool,
    pub hist_bounds: bool,
    pub degree: bool,
}

impl FeatureConfig {
    pub fn named(name: FeatureConfigName) -> Self {
        use FeatureConfigName::*;
        let base = Self {
            name,
            const1: true,
            side: true,
            mean: true,
            min: true,
            max: true,
            sum: false,
            hist_counts: false,
            hist_bounds: false,
            degree: false,
        };
        match name {
            Gcn5 => base,
            Gcn7 => Self {
                sum: true,
                degree: true,
                ..base
            },
            Gcn16a => Self {
                hist_counts: true,
                hist_bounds: true,
                ..base
            },
            Gcn16b => Self {
                side: false,
                sum: true,
                hist_counts: true,
                hist_bounds: true,
                ..base
            },
            Gcn18 => Self {
                sum: true,
                hist_counts: true,
                hist_bounds: true,
                degree: true,
                ..base
            },
        }
    }

    pub fn len(&self) -> usize {
        [
            self.const1,
            self.side,
            self.mean,
            self.min,
            self.max,
            self.sum,
            self.degree,
        ]
        .iter()
        .filter(|&&on| on)
        .count()
            + if self.hist_counts { HIST_BINS } else { 0 }
            + if self.hist_bounds { HIST_BINS + 1 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<FeatureConfigName> for FeatureConfig {
    fn from(name: FeatureConfigName) -> Self {
        Self::named(name)
    }
}

/// Side of a node in the bipartite FC graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flag(self) -> f32 {
        match self {
            Side::Left => 0.0,
            Side::Right => 1.0,
        }
    }
}

/// 5-bin equal-width histogram over `[min, max]` of the node's own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: [usize; HIST_BINS],
    pub bounds: [f64; HIST_BINS + 1],
}

impl Histogram {
    /// `values` must be non-empty. When all values are equal every boundary
    /// is that value and every count lands in bin 0.
    pub fn of(values: &[f32], min: f64, max: f64) -> Self {
        let mut bounds = [min; HIST_BINS + 1];
        let mut counts = [0usize; HIST_BINS];
        if min == max {
            counts[0] = values.len();
            return Self { counts, bounds };
        }
        let width = max - min;
        for (i, b) in bounds.iter_mut().enumerate().skip(1) {
            *b = min + width * i as f64 / HIST_BINS as f64;
        }
        bounds[HIST_BINS] = max;
        for &v in values {
            let v = f64::from(v);
            // number of interior boundaries at or below v
            let bin = bounds[1..HIST_BINS].iter().take_while(|&&b| b <= v).count();
            counts[bin] += 1;
        }
        Self { counts, bounds }
    }
}

/// Summary statistics of a node's incident weights, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub sum: f64,
    pub degree: usize,
    pub histogram: Histogram,
}

impl NodeStats {
    pub fn of(weights: &[f32]) -> Result<Self, GraphError> {
        if weights.is_empty() {
            return Err(GraphError::DegenerateNode);
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &w in weights {
            let w = f64::from(w);
            min = min.min(w);
            max = max.max(w);
            sum += w;
        }
        Ok(Self {
            mean: sum / weights.len() as f64,
            min,
            max,
            sum,
            degree: weights.len(),
            histogram: Histogram::of(weights, min, max),
        })
    }
}

/// Feature vector of one node, laid out as `[1] [side] mean min max [sum]
/// [5 counts] [6 boundaries] [degree]` according to `config`.
pub fn compute_node_features(
    incident_weights: &[f32],
    side: Side,
    config: &FeatureConfig,
) -> Result<Vec<f32>, GraphError> {
    let stats = NodeStats::of(incident_weights)?;
    let mut out = Vec::with_capacity(config.len());
    if config.const1 {
        out.push(1.0);
    }
    if config.side {
        out.push(side.flag());
    }
    if config.mean {
        out.push(stats.mean as f32);
    }
    if config.min {
        out.push(stats.min as f32);
    }
    if config.max {
        out.push(stats.max as f32);
    }
    if config.sum {
        out.push(stats.sum as f32);
    }
    if config.hist_counts {
        out.extend(stats.histogram.counts.iter().map(|&c| c as f32));
    }
    if config.hist_bounds {
        out.extend(stats.histogram.bounds.iter().map(|&b| b as f32));
    }
    if config.degree {
        out.push(stats.degree as f32);
    }
    debug_assert_eq!(out.len(), config.len());
    Ok(out)
}

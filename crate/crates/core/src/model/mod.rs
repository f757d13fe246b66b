//! GraphConv classifier: one branch of three GraphConv+ReLU layers per input
//! graph, mean pooling per branch, pooled vectors concatenated, then a
//! linear head producing two logits (clean, trojaned).

mod batch;
pub mod checkpoint;

pub use batch::GraphBatch;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, Label};
use crate::graph::{FeatureConfigName, LayerGraph};
use crate::tensor::{Adam, Adjacency, Tape, Tensor, TensorError, Var};

pub const HIDDEN: usize = 64;
pub const LAYERS_PER_BRANCH: usize = 3;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("batch contains no graphs")]
    EmptyBatch,
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("feature width mismatch: expected {expected}, found {found}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("{labels} labels for {graphs} graphs")]
    LabelCount { graphs: usize, labels: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model has not been trained or loaded")]
    NotTrained,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// Which graphs feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "fc_only")]
    FcOnly,
    #[serde(rename = "fc_plus_flat")]
    FcPlusFlat,
    #[serde(rename = "fc_plus_2d")]
    FcPlus2d,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::FcOnly, Modality::FcPlusFlat, Modality::FcPlus2d];

    pub fn has_conv(self) -> bool {
        self != Modality::FcOnly
    }

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::FcOnly => "fc_only",
            Modality::FcPlusFlat => "fc_plus_flat",
            Modality::FcPlus2d => "fc_plus_2d",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown modality {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Node feature width of the FC graphs.
    pub fc_input: usize,
    /// Node feature width of the conv graphs; present iff the modality has one.
    pub conv_input: Option<usize>,
    pub feature_config: FeatureConfigName,
    pub modality: Modality,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.fc_input == 0 || self.conv_input == Some(0) {
            return Err(ModelError::Config("input width must be positive".into()));
        }
        if self.modality.has_conv() != self.conv_input.is_some() {
            return Err(ModelError::Config(format!(
                "modality {} with conv input {:?}",
                self.modality, self.conv_input
            )));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        if self.conv_input.is_some() {
            2 * HIDDEN
        } else {
            HIDDEN
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelState {
    Initialized,
    Trained,
    Loaded,
}

/// `out[v] = h_v·B_self + Σ_u e_uv · h_u·W_neighbor + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvLayer {
    /// `[d_in, d_out]`
    pub w_neighbor: Tensor,
    /// `[d_in, d_out]`
    pub b_self: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("fan_in × fan_out")
}

struct LayerVars {
    w_neighbor: Var,
    b_self: Var,
    bias: Var,
}

impl GraphConvLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w_neighbor: Tensor::zeros(&[d_in, d_out]),
            b_self: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn glorot<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            w_neighbor: glorot(rng, d_in, d_out),
            b_self: glorot(rng, d_in, d_out),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_neighbor.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w_neighbor.dims()[1]
    }

    fn register(&self, tape: &mut Tape, track: bool) -> LayerVars {
        LayerVars {
            w_neighbor: tape.leaf(self.w_neighbor.clone(), track),
            b_self: tape.leaf(self.b_self.clone(), track),
            bias: tape.leaf(self.bias.clone(), track),
        }
    }
}

/// Neighbours are summed before the neighbour transform, which is the same
/// linear map as transforming each message and then summing.
fn conv_on_tape(
    tape: &mut Tape,
    vars: &LayerVars,
    h: Var,
    adj: &Arc<Adjacency>,
    relu: bool,
) -> Result<Var, TensorError> {
    tape.graph_conv(h, adj, vars.b_self, vars.w_neighbor, vars.bias, relu)
}

/// Single GraphConv layer on one undirected graph (no activation).
pub fn graph_conv_forward(
    layer: &GraphConvLayer,
    node_feats: &Tensor,
    edges: &[(usize, usize)],
    edge_weights: &[f32],
) -> Result<Tensor, ModelError> {
    if node_feats.ndim() != 2 || node_feats.cols() != layer.d_in() {
        return Err(ModelError::FeatureWidth {
            expected: layer.d_in(),
            found: node_feats.cols(),
        });
    }
    if edges.len() != edge_weights.len() {
        return Err(ModelError::Config("edge/weight count mismatch".into()));
    }
    let mut sources = Vec::with_capacity(2 * edges.len());
    let mut targets = Vec::with_capacity(2 * edges.len());
    let mut weights = Vec::with_capacity(2 * edges.len());
    for (&(u, v), &w) in edges.iter().zip(edge_weights) {
        sources.extend([u, v]);
        targets.extend([v, u]);
        weights.extend([w, w]);
    }
    let adj = Arc::new(Adjacency::new(node_feats.rows(), &sources, &targets, &weights)?);
    let mut tape = Tape::new();
    let vars = layer.register(&mut tape, false);
    let h = tape.constant(node_feats.clone());
    let out = conv_on_tape(&mut tape, &vars, h, &adj, false)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    config: ModelConfig,
    pub fc_branch: Vec<GraphConvLayer>,
    pub conv_branch: Option<Vec<GraphConvLayer>>,
    /// `[64 or 128, 2]`
    pub head_w: Tensor,
    /// `[2]`
    pub head_bias: Tensor,
    state: ModelState,
}

/// Output of one recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, in [`GcnModel::parameter_names`] order.
    pub params: Vec<Var>,
}

fn branch_widths(d_in: usize) -> [(usize, usize); LAYERS_PER_BRANCH] {
    [(d_in, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, HIDDEN)]
}

impl GcnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let branch = |rng: &mut R, d_in: usize| -> Vec<GraphConvLayer> {
            branch_widths(d_in)
                .iter()
                .map(|&(i, o)| GraphConvLayer::glorot(rng, i, o))
                .collect()
        };
        let fc_branch = branch(rng, config.fc_input);
        let conv_branch = config.conv_input.map(|m| branch(rng, m));
        let head_w = glorot(rng, config.head_input(), NUM_CLASSES);
        Ok(Self {
            config,
            fc_branch,
            conv_branch,
            head_w,
            head_bias: Tensor::zeros(&[NUM_CLASSES]),
            state: ModelState::Initialized,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let branch = |d_in: usize| -> Vec<GraphConvLayer> {
            branch_widths(d_in)
                .iter()
                .map(|&(i, o)| GraphConvLayer::zeros(i, o))
                .collect()
        };
        Ok(Self {
            config,
            fc_branch: branch(config.fc_input),
            conv_branch: config.conv_input.map(branch),
            head_w: Tensor::zeros(&[config.head_input(), NUM_CLASSES]),
            head_bias: Tensor::zeros(&[NUM_CLASSES]),
            state: ModelState::Initialized,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn state(&self) -> ModelState {
        self.state
    }

    pub fn mark_trained(&mut self) {
        self.state = ModelState::Trained;
    }

    pub fn is_dual_branch(&self) -> bool {
        self.conv_branch.is_some()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut branch = |prefix: &str| {
            for l in 1..=LAYERS_PER_BRANCH {
                for p in ["W", "B", "bias"] {
                    names.push(format!("{prefix}.l{l}.{p}"));
                }
            }
        };
        branch("branchfc");
        if self.conv_branch.is_some() {
            branch("branchconv");
        }
        names.push("head.W".into());
        names.push("head.bias".into());
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        let layers = self
            .fc_branch
            .iter()
            .chain(self.conv_branch.iter().flatten());
        for l in layers {
            out.extend([&l.w_neighbor, &l.b_self, &l.bias]);
        }
        out.extend([&self.head_w, &self.head_bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let layers = self
            .fc_branch
            .iter_mut()
            .chain(self.conv_branch.iter_mut().flatten());
        for l in layers {
            out.extend([&mut l.w_neighbor, &mut l.b_self, &mut l.bias]);
        }
        out.extend([&mut self.head_w, &mut self.head_bias]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn check_inputs(&self, fc: &GraphBatch, conv: Option<&GraphBatch>) -> Result<(), ModelError> {
        if fc.feature_dim() != self.config.fc_input {
            return Err(ModelError::FeatureWidth {
                expected: self.config.fc_input,
                found: fc.feature_dim(),
            });
        }
        match (self.config.conv_input, conv) {
            (None, None) => Ok(()),
            (Some(m), Some(c)) => {
                if c.feature_dim() != m {
                    return Err(ModelError::FeatureWidth {
                        expected: m,
                        found: c.feature_dim(),
                    });
                }
                if c.num_graphs != fc.num_graphs {
                    return Err(ModelError::Config(format!(
                        "{} fc graphs but {} conv graphs",
                        fc.num_graphs, c.num_graphs
                    )));
                }
                Ok(())
            }
            (None, Some(_)) => Err(ModelError::Config(
                "single-branch model given a conv batch".into(),
            )),
            (Some(_), None) => Err(ModelError::Config(
                "dual-branch model needs a conv batch".into(),
            )),
        }
    }

    /// Records the full forward pass. With `track` the parameter leaves
    /// require gradients.
    pub fn forward(
        &self,
        tape: &mut Tape,
        fc: &GraphBatch,
        conv: Option<&GraphBatch>,
        track: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_inputs(fc, conv)?;
        let mut params = Vec::with_capacity(self.parameters().len());

        let mut run_branch = |tape: &mut Tape,
                              layers: &[GraphConvLayer],
                              batch: &GraphBatch|
         -> Result<Var, ModelError> {
            let mut h = tape.constant(batch.features.clone());
            for layer in layers {
                let vars = layer.register(tape, track);
                params.extend([vars.w_neighbor, vars.b_self, vars.bias]);
                h = conv_on_tape(tape, &vars, h, &batch.adjacency, true)?;
            }
            Ok(tape.segment_mean(h, &batch.graph_ids, batch.num_graphs)?)
        };

        let mut pooled = run_branch(tape, &self.fc_branch, fc)?;
        if let (Some(layers), Some(conv)) = (&self.conv_branch, conv) {
            let conv_pooled = run_branch(tape, layers, conv)?;
            pooled = tape.concat_cols(pooled, conv_pooled)?;
        }
        let head_w = tape.leaf(self.head_w.clone(), track);
        let head_bias = tape.leaf(self.head_bias.clone(), track);
        params.extend([head_w, head_bias]);
        let projected = tape.matmul(pooled, head_w)?;
        let logits = tape.add(projected, head_bias)?;
        Ok(ForwardPass { logits, params })
    }

    /// `[num_graphs, 2]` logits without gradient tracking.
    pub fn logits(&self, fc: &GraphBatch, conv: Option<&GraphBatch>) -> Result<Tensor, ModelError> {
        self.logits_on(&mut Tape::new(), fc, conv)
    }

    /// As [`GcnModel::logits`], recording on a caller-owned tape (cleared
    /// first) so its buffers are reused across calls.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        fc: &GraphBatch,
        conv: Option<&GraphBatch>,
    ) -> Result<Tensor, ModelError> {
        tape.clear();
        let pass = self.forward(tape, fc, conv, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Mean cross-entropy over the batch and its gradient for every
    /// parameter, in [`GcnModel::parameters`] order.
    pub fn loss_and_grads(
        &self,
        fc: &GraphBatch,
        conv: Option<&GraphBatch>,
        labels: &[usize],
    ) -> Result<(f32, Vec<Vec<f32>>), ModelError> {
        self.loss_and_grads_on(&mut Tape::new(), fc, conv, labels)
    }

    pub fn loss_and_grads_on(
        &self,
        tape: &mut Tape,
        fc: &GraphBatch,
        conv: Option<&GraphBatch>,
        labels: &[usize],
    ) -> Result<(f32, Vec<Vec<f32>>), ModelError> {
        tape.clear();
        let pass = self.forward(tape, fc, conv, true)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        tape.backward(loss)?;
        let grads = pass
            .params
            .iter()
            .map(|&p| {
                tape.grad(p)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(p).numel()])
            })
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    pub fn apply_adam(&mut self, adam: &mut Adam, grads: &[Vec<f32>]) {
        let grads: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut self.parameters_mut(), &grads);
    }

    /// Classifies one model from its graphs.
    pub fn predict(&self, fc: &LayerGraph, conv: Option<&LayerGraph>) -> Result<Prediction, ModelError> {
        if self.state == ModelState::Initialized {
            return Err(ModelError::NotTrained);
        }
        let fc_batch = GraphBatch::from_graphs(&[fc])?;
        let conv_batch = conv.map(|c| GraphBatch::from_graphs(&[c])).transpose()?;
        let logits = self.logits(&fc_batch, conv_batch.as_ref())?;
        Ok(Prediction::from_logits(logits.data()[0], logits.data()[1]))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        fc_branch: Vec<GraphConvLayer>,
        conv_branch: Option<Vec<GraphConvLayer>>,
        head_w: Tensor,
        head_bias: Tensor,
        state: ModelState,
    ) -> Self {
        Self {
            config,
            fc_branch,
            conv_branch,
            head_w,
            head_bias,
            state,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// `[p_clean, p_trojaned]`
    pub probabilities: [f64; 2],
}

impl Prediction {
    /// Argmax of the two logits; exact ties go to clean.
    pub fn from_logits(clean: f32, trojaned: f32) -> Self {
        let (a, b) = (f64::from(clean), f64::from(trojaned));
        let max = a.max(b);
        let (ea, eb) = ((a - max).exp(), (b - max).exp());
        let z = ea + eb;
        Self {
            label: if trojaned > clean {
                Label::Trojaned
            } else {
                Label::Clean
            },
            probabilities: [ea / z, eb / z],
        }
    }

    pub fn p_trojaned(&self) -> f64 {
        self.probabilities[1]
    }
}

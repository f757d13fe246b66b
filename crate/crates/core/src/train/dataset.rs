use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TrainError;
use crate::bundle::{Label, Manifest, WeightBundle};
use crate::graph::{build_conv_2d, build_conv_flat, build_fc_bipartite, FeatureConfig, FeatureConfigName, LayerGraph};
use crate::model::{GraphBatch, Modality, ModelConfig};

/// Graphs of one bundle, built once and reused for every epoch, together
/// with their single-graph batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub model_id: String,
    pub label: Label,
    fc: LayerGraph,
    conv: Option<LayerGraph>,
    fc_unit: GraphBatch,
    conv_unit: Option<GraphBatch>,
}

impl Sample {
    pub fn new(
        model_id: impl Into<String>,
        label: Label,
        fc: LayerGraph,
        conv: Option<LayerGraph>,
    ) -> Result<Self, TrainError> {
        let fc_unit = GraphBatch::from_graphs(&[&fc])?;
        let conv_unit = conv.as_ref().map(|c| GraphBatch::from_graphs(&[c])).transpose()?;
        Ok(Self {
            model_id: model_id.into(),
            label,
            fc,
            conv,
            fc_unit,
            conv_unit,
        })
    }

    pub fn fc(&self) -> &LayerGraph {
        &self.fc
    }

    pub fn conv(&self) -> Option<&LayerGraph> {
        self.conv.as_ref()
    }

    /// Same sample with its fc graph replaced.
    pub fn with_fc(&self, fc: LayerGraph) -> Result<Self, TrainError> {
        Self::new(self.model_id.clone(), self.label, fc, self.conv.clone())
    }

    pub fn from_bundle(
        bundle: &WeightBundle,
        label: Label,
        features: FeatureConfigName,
        modality: Modality,
    ) -> Result<Self, TrainError> {
        let graph_err = |source| TrainError::Graph {
            model_id: bundle.model_id.clone(),
            source,
        };
        let fc = build_fc_bipartite(&bundle.fc_weight, &FeatureConfig::named(features))
            .map_err(graph_err)?;
        let conv = match (modality, &bundle.conv1_weight) {
            (Modality::FcOnly, _) => None,
            (_, None) => return Err(TrainError::MissingConv(vec![bundle.model_id.clone()])),
            (Modality::FcPlusFlat, Some(c)) => Some(build_conv_flat(c).map_err(graph_err)?),
            (Modality::FcPlus2d, Some(c)) => Some(build_conv_2d(c).map_err(graph_err)?),
        };
        Self::new(bundle.model_id.clone(), label, fc, conv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub features: FeatureConfigName,
    pub modality: Modality,
}

impl Dataset {
    /// Reads and converts every manifest entry, in parallel across bundles.
    /// Under a conv modality, all entries lacking `conv1.weight` are reported
    /// together.
    pub fn from_manifest(
        manifest: &Manifest,
        features: FeatureConfigName,
        modality: Modality,
    ) -> Result<Self, TrainError> {
        let bundles: Vec<WeightBundle> = manifest
            .entries
            .par_iter()
            .map(|e| manifest.read_entry(e))
            .collect::<Result<_, _>>()?;
        if modality.has_conv() {
            let missing: Vec<String> = bundles
                .iter()
                .filter(|b| b.conv1_weight.is_none())
                .map(|b| b.model_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(TrainError::MissingConv(missing));
            }
        }
        let samples = bundles
            .par_iter()
            .zip(manifest.entries.par_iter())
            .map(|(b, e)| Sample::from_bundle(b, e.label, features, modality))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(samples, features, modality)
    }

    pub fn new(samples: Vec<Sample>, features: FeatureConfigName, modality: Modality) -> Result<Self, TrainError> {
        let data = Self {
            samples,
            features,
            modality,
        };
        data.model_config()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Input widths for a model over this dataset. Every sample must agree.
    pub fn model_config(&self) -> Result<ModelConfig, TrainError> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| TrainError::Config("dataset is empty".into()))?;
        let conv_width = |s: &Sample| s.conv.as_ref().map(LayerGraph::feature_dim);
        for s in &self.samples {
            if s.fc.feature_dim() != first.fc.feature_dim() || conv_width(s) != conv_width(first) {
                return Err(TrainError::Config(format!(
                    "{} has input widths different from {}",
                    s.model_id, first.model_id
                )));
            }
        }
        let config = ModelConfig {
            fc_input: first.fc.feature_dim(),
            conv_input: conv_width(first),
            feature_config: self.features,
            modality: self.modality,
        };
        config.validate()?;
        Ok(config)
    }

    /// Same graphs with labels shuffled by a seeded generator; the null-signal
    /// control.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (s, l) in out.samples.iter_mut().zip(labels) {
            s.label = l;
        }
        out
    }

    /// Batches the samples at `indices` in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<(GraphBatch, Option<GraphBatch>), TrainError> {
        let fc: Vec<&GraphBatch> = indices.iter().map(|&i| &self.samples[i].fc_unit).collect();
        let conv: Option<Vec<&GraphBatch>> =
            indices.iter().map(|&i| self.samples[i].conv_unit.as_ref()).collect();
        let fc = GraphBatch::concat(&fc)?;
        let conv = match conv {
            Some(c) if self.modality.has_conv() => Some(GraphBatch::concat(&c)?),
            _ => None,
        };
        Ok((fc, conv))
    }
}

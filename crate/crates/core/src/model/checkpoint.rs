//! Checkpoints reuse the DWB1 container. A `config` tensor holds u32 values
//! bit-cast into f32 slots:
//! `[version, branches, fc_input, conv_input or 0, feature config id, modality id]`.

use std::collections::HashMap;
use std::path::Path;

use super::{
    GcnModel, GraphConvLayer, Modality, ModelConfig, ModelError, ModelState, HIDDEN,
    LAYERS_PER_BRANCH, NUM_CLASSES,
};
use crate::bundle::{decode_tensors, encode_tensors, BundleError};
use crate::graph::FeatureConfigName;
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "config";

fn encode_config(model: &GcnModel) -> Tensor {
    let c = model.config();
    let words = [
        FORMAT_VERSION,
        if model.is_dual_branch() { 2 } else { 1 },
        c.fc_input as u32,
        c.conv_input.unwrap_or(0) as u32,
        c.feature_config.id(),
        c.modality.id(),
    ];
    Tensor::vector(words.iter().map(|&w| f32::from_bits(w)).collect())
}

fn decode_config(t: &Tensor) -> Result<ModelConfig, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    if t.dims() != [6] {
        return Err(bad(format!("config tensor has shape {:?}", t.dims())));
    }
    let w: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
    if w[0] != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", w[0])));
    }
    let feature_config = FeatureConfigName::from_id(w[4])
        .ok_or_else(|| bad(format!("unknown feature config id {}", w[4])))?;
    let modality =
        Modality::from_id(w[5]).ok_or_else(|| bad(format!("unknown modality id {}", w[5])))?;
    let config = ModelConfig {
        fc_input: w[2] as usize,
        conv_input: (w[3] != 0).then_some(w[3] as usize),
        feature_config,
        modality,
    };
    let branches = if config.conv_input.is_some() { 2 } else { 1 };
    if w[1] != branches {
        return Err(bad(format!("branch count {} disagrees with conv input", w[1])));
    }
    config.validate()?;
    Ok(config)
}

pub fn to_bytes(model: &GcnModel) -> Result<Vec<u8>, ModelError> {
    let names = model.parameter_names();
    let config = encode_config(model);
    let mut tensors: Vec<(&str, &Tensor)> = vec![(CONFIG_TENSOR, &config)];
    tensors.extend(names.iter().map(String::as_str).zip(model.parameters()));
    Ok(encode_tensors(&tensors)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<GcnModel, ModelError> {
    let mut tensors: HashMap<String, Tensor> = decode_tensors(bytes)?.into_iter().collect();
    let config_tensor = tensors
        .remove(CONFIG_TENSOR)
        .ok_or_else(|| ModelError::Checkpoint("missing config tensor".into()))?;
    let config = decode_config(&config_tensor)?;

    let mut take = |name: String, dims: &[usize]| -> Result<Tensor, ModelError> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims() != dims {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        if !t.is_finite() {
            return Err(ModelError::Checkpoint(format!("tensor {name} is not finite")));
        }
        Ok(t)
    };
    let mut branch = |prefix: &str, d_in: usize| -> Result<Vec<GraphConvLayer>, ModelError> {
        (1..=LAYERS_PER_BRANCH)
            .map(|l| {
                let i = if l == 1 { d_in } else { HIDDEN };
                Ok(GraphConvLayer {
                    w_neighbor: take(format!("{prefix}.l{l}.W"), &[i, HIDDEN])?,
                    b_self: take(format!("{prefix}.l{l}.B"), &[i, HIDDEN])?,
                    bias: take(format!("{prefix}.l{l}.bias"), &[HIDDEN])?,
                })
            })
            .collect()
    };
    let fc_branch = branch("branchfc", config.fc_input)?;
    let conv_branch = config
        .conv_input
        .map(|m| branch("branchconv", m))
        .transpose()?;
    let head_in = if conv_branch.is_some() { 2 * HIDDEN } else { HIDDEN };
    let head_w = take("head.W".into(), &[head_in, NUM_CLASSES])?;
    let head_bias = take("head.bias".into(), &[NUM_CLASSES])?;
    if let Some(extra) = tensors.keys().next() {
        return Err(ModelError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(GcnModel::from_parts(
        config,
        fc_branch,
        conv_branch,
        head_w,
        head_bias,
        ModelState::Loaded,
    ))
}

pub fn save(model: &GcnModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|source| {
        ModelError::Bundle(BundleError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<GcnModel, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| {
        ModelError::Bundle(BundleError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    from_bytes(&bytes)
}

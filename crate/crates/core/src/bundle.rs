//! Weight-bundle container files and the labeled manifest that lists them.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "DWB1"
//! tensor_count u32
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   ndim       u8
//!   dims       ndim × u32
//!   data       product(dims) × f32, row-major
//! ```
//!
//! The same container carries model checkpoints (see `model::checkpoint`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DWB1";
pub const FC_WEIGHT: &str = "fc.weight";
pub const CONV1_WEIGHT: &str = "conv1.weight";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload")]
    Truncated,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor name longer than 65535 bytes")]
    NameTooLong,
    #[error("tensor {0} has an empty shape")]
    EmptyShape(String),
    #[error("tensor {name} has a zero dimension in {dims:?}")]
    ZeroDim { name: String, dims: Vec<usize> },
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("missing required tensor {0}")]
    MissingTensor(&'static str),
    #[error("tensor {name} must be {expected}-D, found {found}-D")]
    BadRank {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor {0} contains a non-finite value")]
    NonFinite(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest: duplicate model_id {0}")]
    DuplicateModelId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes named tensors into a container image.
pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>, BundleError> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 2 + n.len() + 1 + 4 * t.ndim() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| BundleError::NameTooLong)?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(n).ok_or(BundleError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(BundleError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a container image into named tensors, in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, BundleError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(BundleError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let count = cur.u32()?;
    let mut seen = HashSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| BundleError::InvalidName)?
            .to_string();
        let ndim = cur.u8()? as usize;
        if ndim == 0 {
            return Err(BundleError::EmptyShape(name));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        if dims.contains(&0) {
            return Err(BundleError::ZeroDim { name, dims });
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(BundleError::Truncated)?;
        let nbytes = numel.checked_mul(4).ok_or(BundleError::Truncated)?;
        if nbytes > cur.remaining() {
            return Err(BundleError::Truncated);
        }
        let data = cur
            .take(nbytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(BundleError::DuplicateTensor(name));
        }
        let tensor = Tensor::new(dims, data).expect("numel matches dims");
        tensors.push((name, tensor));
    }
    if cur.remaining() > 0 {
        return Err(BundleError::TrailingBytes(cur.remaining()));
    }
    Ok(tensors)
}

/// Static weights of one CNN: the final fully-connected matrix
/// (`[outputs, inputs]`) and optionally the first convolution
/// (`[F_out, F_in, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub model_id: String,
    pub arch_tag: String,
    pub fc_weight: Tensor,
    pub conv1_weight: Option<Tensor>,
}

impl WeightBundle {
    pub fn new(
        model_id: impl Into<String>,
        arch_tag: impl Into<String>,
        fc_weight: Tensor,
        conv1_weight: Option<Tensor>,
    ) -> Result<Self, BundleError> {
        let bundle = Self {
            model_id: model_id.into(),
            arch_tag: arch_tag.into(),
            fc_weight,
            conv1_weight,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        check_tensor(FC_WEIGHT, &self.fc_weight, 2)?;
        if let Some(conv) = &self.conv1_weight {
            check_tensor(CONV1_WEIGHT, conv, 4)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, BundleError> {
        self.validate()?;
        let mut tensors = vec![(FC_WEIGHT, &self.fc_weight)];
        if let Some(conv) = &self.conv1_weight {
            tensors.push((CONV1_WEIGHT, conv));
        }
        encode_tensors(&tensors)
    }

    pub fn from_bytes(
        bytes: &[u8],
        model_id: impl Into<String>,
        arch_tag: impl Into<String>,
    ) -> Result<Self, BundleError> {
        let mut fc = None;
        let mut conv = None;
        for (name, tensor) in decode_tensors(bytes)? {
            match name.as_str() {
                FC_WEIGHT => fc = Some(tensor),
                CONV1_WEIGHT => conv = Some(tensor),
                _ => log::warn!("ignoring unknown tensor {name:?} in weight bundle"),
            }
        }
        let fc = fc.ok_or(BundleError::MissingTensor(FC_WEIGHT))?;
        Self::new(model_id, arch_tag, fc, conv)
    }
}

fn check_tensor(name: &str, t: &Tensor, rank: usize) -> Result<(), BundleError> {
    if t.ndim() != rank {
        return Err(BundleError::BadRank {
            name: name.to_string(),
            expected: rank,
            found: t.ndim(),
        });
    }
    if t.dims().contains(&0) {
        return Err(BundleError::ZeroDim {
            name: name.to_string(),
            dims: t.dims().to_vec(),
        });
    }
    if !t.is_finite() {
        return Err(BundleError::NonFinite(name.to_string()));
    }
    Ok(())
}

pub fn write_bundle(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a bundle file. The model id defaults to the file stem.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<WeightBundle, BundleError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    WeightBundle::from_bytes(&bytes, stem, "")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Trojaned,
}

impl Label {
    /// Class index: clean 0, trojaned 1.
    pub fn index(self) -> usize {
        match self {
            Label::Clean => 0,
            Label::Trojaned => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Clean
        } else {
            Label::Trojaned
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Clean => "clean",
            Label::Trojaned => "trojaned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub model_id: String,
    pub arch_tag: String,
}

/// Labeled dataset listing. Relative entry paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self, BundleError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.model_id.as_str()) {
                return Err(BundleError::DuplicateModelId(e.model_id.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, BundleError> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(text).map_err(|e| BundleError::Manifest(e.to_string()))?;
        Self::new(entries, base_dir)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest entries serialize")
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Reads one entry's bundle, taking id and arch tag from the manifest.
    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<WeightBundle, BundleError> {
        let path = self.resolve(entry);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        WeightBundle::from_bytes(&bytes, entry.model_id.clone(), entry.arch_tag.clone())
    }

    /// Checks that every listed file parses as a bundle.
    pub fn validate_files(&self) -> Result<(), BundleError> {
        for e in &self.entries {
            self.read_entry(e)
                .map_err(|err| BundleError::Manifest(format!("{}: {err}", e.path)))?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BundleError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, BundleError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::from_json(&text, base)
}

/// Box-plot statistics of one stored tensor, computed in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub tensor: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl LayerStats {
    pub fn of(name: &str, values: &[f32]) -> Self {
        let mut sorted: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        Self {
            tensor: name.to_string(),
            count: n,
            min: sorted[0],
            max: sorted[n - 1],
            mean,
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
        }
    }
}

/// Linear interpolation between closest ranks on sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summary_stats(bundle: &WeightBundle) -> Vec<LayerStats> {
    let mut out = vec![LayerStats::of(FC_WEIGHT, bundle.fc_weight.data())];
    if let Some(conv) = &bundle.conv1_weight {
        out.push(LayerStats::of(CONV1_WEIGHT, conv.data()));
    }
    out
}

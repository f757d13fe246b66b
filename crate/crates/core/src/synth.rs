//! Synthetic clean/trojaned weight populations. Clean weights are i.i.d.
//! `N(0, σ_c²)`. A trojaned bundle is drawn the same way, then a random
//! subset of FC input columns (and of conv output filters) is redrawn from
//! the wider `N(0, σ_t²)`, so the signal is both distributional and
//! localized to particular nodes.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, Label, Manifest, ManifestEntry, WeightBundle};
use crate::tensor::Tensor;

pub const ARCH_TAG: &str = "synthetic";
pub const BUNDLE_EXT: &str = "dwb";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_clean: usize,
    pub num_trojaned: usize,
    /// `[outputs, inputs]`
    pub fc_shape: [usize; 2],
    /// `[F_out, F_in, H, W]`
    pub conv_shape: [usize; 4],
    pub clean_scale: f64,
    pub trojan_tail_scale: f64,
    pub trojan_column_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clean: 100,
            num_trojaned: 100,
            fc_shape: [10, 512],
            conv_shape: [16, 1, 5, 5],
            clean_scale: 0.05,
            trojan_tail_scale: 0.25,
            trojan_column_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn counts(num_clean: usize, num_trojaned: usize, seed: u64) -> Self {
        Self {
            num_clean,
            num_trojaned,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !(self.clean_scale > 0.0 && self.clean_scale.is_finite()) {
            return fail("clean_scale must be positive");
        }
        if !(self.trojan_tail_scale > self.clean_scale && self.trojan_tail_scale.is_finite()) {
            return fail("trojan_tail_scale must exceed clean_scale");
        }
        if !(self.trojan_column_fraction > 0.0 && self.trojan_column_fraction <= 1.0) {
            return fail("trojan_column_fraction must lie in (0, 1]");
        }
        if self.fc_shape.contains(&0) || self.conv_shape.contains(&0) {
            return fail("tensor shapes must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn total(&self) -> usize {
        self.num_clean + self.num_trojaned
    }

    /// Label and id of the `k`-th bundle; clean ones come first.
    pub fn identity(&self, k: usize) -> (Label, String) {
        if k < self.num_clean {
            (Label::Clean, format!("clean-{k:04}"))
        } else {
            let t = k - self.num_clean;
            (Label::Trojaned, format!("trojaned-{t:04}"))
        }
    }

    /// Number of FC columns / conv filters redrawn in a trojaned bundle.
    pub fn perturbed_count(&self, of: usize) -> usize {
        ((self.trojan_column_fraction * of as f64).round() as usize).clamp(1, of)
    }
}

fn normal(sigma: f64) -> Normal<f32> {
    Normal::new(0.0, sigma as f32).expect("validated positive scale")
}

/// Bundle `k` of the population, from its own generator stream.
pub fn generate_bundle(spec: &SynthSpec, k: usize) -> Result<(WeightBundle, Label), SynthError> {
    spec.validate()?;
    let (label, model_id) = spec.identity(k);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64);
    let clean = normal(spec.clean_scale);
    let tail = normal(spec.trojan_tail_scale);

    let [r, c] = spec.fc_shape;
    let mut fc: Vec<f32> = (0..r * c).map(|_| clean.sample(&mut rng)).collect();
    let conv_len: usize = spec.conv_shape.iter().product();
    let mut conv: Vec<f32> = (0..conv_len).map(|_| clean.sample(&mut rng)).collect();

    if label == Label::Trojaned {
        let mut columns = index::sample(&mut rng, c, spec.perturbed_count(c)).into_vec();
        columns.sort_unstable();
        for &j in &columns {
            for i in 0..r {
                fc[i * c + j] = tail.sample(&mut rng);
            }
        }
        let f_out = spec.conv_shape[0];
        let per_filter = conv_len / f_out;
        let mut filters = index::sample(&mut rng, f_out, spec.perturbed_count(f_out)).into_vec();
        filters.sort_unstable();
        for &f in &filters {
            for v in &mut conv[f * per_filter..(f + 1) * per_filter] {
                *v = tail.sample(&mut rng);
            }
        }
    }

    let bundle = WeightBundle::new(
        model_id,
        ARCH_TAG,
        Tensor::new(spec.fc_shape.to_vec(), fc).expect("fc shape"),
        Some(Tensor::new(spec.conv_shape.to_vec(), conv).expect("conv shape")),
    )?;
    Ok((bundle, label))
}

/// The whole population in memory, clean bundles first.
pub fn generate_bundles(spec: &SynthSpec) -> Result<Vec<(WeightBundle, Label)>, SynthError> {
    spec.validate()?;
    (0..spec.total())
        .into_par_iter()
        .map(|k| generate_bundle(spec, k))
        .collect()
}

/// Writes `<model_id>.dwb` files and `manifest.json` (relative paths) into
/// `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest, SynthError> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| BundleError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let entries = (0..spec.total())
        .into_par_iter()
        .map(|k| {
            let (bundle, label) = generate_bundle(spec, k)?;
            let file = format!("{}.{BUNDLE_EXT}", bundle.model_id);
            crate::bundle::write_bundle(&bundle, out_dir.join(&file))?;
            Ok(ManifestEntry {
                path: file,
                label,
                model_id: bundle.model_id,
                arch_tag: bundle.arch_tag,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

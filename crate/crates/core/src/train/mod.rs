//! Seeded split, minibatch Adam training with a step decay schedule,
//! evaluation and the node-swap robustness trial.

mod dataset;
mod report;

pub use dataset::{Dataset, Sample};
pub use report::{
    Confusion, EpochRecord, EvalReport, PermutationReport, PredictionRecord, RunMetrics, RunReport,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, Label, Manifest};
use crate::graph::{random_pair_swaps, FeatureConfigName, GraphError};
use crate::model::{GcnModel, Modality, ModelError, ModelState, Prediction};
use crate::tensor::{Adam, StepLr, Tape};

const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{model_id}: {source}")]
    Graph {
        model_id: String,
        #[source]
        source: GraphError,
    },
    #[error("bundles missing conv1.weight under a conv modality: {}", .0.join(", "))]
    MissingConv(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error("loss became non-finite in run {run}, epoch {epoch}")]
    Diverged { run: usize, epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs per decay step.
    pub step_size: usize,
    pub split_ratio: f64,
    pub num_runs: usize,
    pub seed: u64,
    pub feature_config: FeatureConfigName,
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 24,
            learning_rate: 0.001,
            decay_factor: 0.7,
            step_size: 2,
            split_ratio: 0.8,
            num_runs: 5,
            seed: 0,
            feature_config: FeatureConfigName::Gcn16b,
            modality: Modality::FcOnly,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and yields an evaluation of the initial model.
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split_ratio must lie strictly between 0 and 1");
        }
        if self.batch_size == 0 || self.num_runs == 0 || self.step_size == 0 {
            return fail("batch_size, num_runs and step_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return fail("decay_factor must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn schedule(&self) -> StepLr {
        StepLr::new(self.learning_rate, self.decay_factor, self.step_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class train counts. The total is `floor(ratio·N)`; each class gets
/// `floor(ratio·n_c)` and leftover slots go to the largest fractional parts
/// (clean first on ties). Every class keeps at least one sample on each side.
pub fn stratified_counts(class_sizes: [usize; 2], ratio: f64) -> [usize; 2] {
    let n: usize = class_sizes.iter().sum();
    let n_train = (ratio * n as f64 + 1e-9).floor() as usize;
    let exact = class_sizes.map(|c| ratio * c as f64);
    let mut counts = exact.map(|e| (e + 1e-9).floor() as usize);
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut remaining = n_train.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if counts[c] + 1 < class_sizes[c] {
            counts[c] += 1;
            remaining -= 1;
        }
    }
    for (k, &size) in counts.iter_mut().zip(&class_sizes) {
        *k = (*k).clamp(1, size.saturating_sub(1).max(1));
    }
    counts
}

/// Stratified, seeded train/test partition of dataset positions.
pub fn split_indices(labels: &[Label], ratio: f64, seed: u64) -> Result<Split, TrainError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TrainError::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(TrainError::Stratification(format!(
                "{} {} entries; each class needs at least 2",
                members.len(),
                Label::from_index(class)
            )));
        }
    }
    let counts = stratified_counts([by_class[0].len(), by_class[1].len()], ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, &k) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Split { train, test })
}

/// Manifest-level split; entry order follows the shuffled positions.
pub fn split(manifest: &Manifest, ratio: f64, seed: u64) -> Result<(Manifest, Manifest), TrainError> {
    let s = split_indices(&manifest.labels(), ratio, seed)?;
    let pick = |idx: &[usize]| Manifest {
        entries: idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        base_dir: manifest.base_dir.clone(),
    };
    Ok((pick(&s.train), pick(&s.test)))
}

/// Builds graphs for every manifest entry, then trains `num_runs` models.
pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<(GcnModel, RunReport), TrainError> {
    config.validate()?;
    let data = Dataset::from_manifest(manifest, config.feature_config, config.modality)?;
    train_dataset(&data, config)
}

/// Run `i` uses seed `seed + i` for its split, initialization and batch
/// order. Returns the last run's model.
pub fn train_dataset(data: &Dataset, config: &TrainConfig) -> Result<(GcnModel, RunReport), TrainError> {
    config.validate()?;
    if data.features != config.feature_config || data.modality != config.modality {
        return Err(TrainError::Config(format!(
            "dataset built for {}/{} but config asks for {}/{}",
            data.features, data.modality, config.feature_config, config.modality
        )));
    }
    let labels = data.labels();
    let mut runs = Vec::with_capacity(config.num_runs);
    let mut last = None;
    for run in 0..config.num_runs {
        let seed = config.seed.wrapping_add(run as u64);
        let split = split_indices(&labels, config.split_ratio, seed)?;
        let (model, metrics) = train_run(data, config, run, seed, &split)?;
        log::info!(
            "run {run}: train {:.2}% test {:.2}% ({:.2}s)",
            metrics.train_accuracy,
            metrics.test_accuracy,
            metrics.seconds
        );
        runs.push(metrics);
        last = Some(model);
    }
    let model = last.expect("num_runs >= 1");
    Ok((model, RunReport::from_runs(config.clone(), runs)))
}

fn train_run(
    data: &Dataset,
    config: &TrainConfig,
    run: usize,
    seed: u64,
    split: &Split,
) -> Result<(GcnModel, RunMetrics), TrainError> {
    let start = Instant::now();
    // stream 0 drives the split, 1 the initialization, 2 the batch order
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(2);

    let mut model = GcnModel::new(data.model_config()?, &mut init_rng)?;
    let mut adam = Adam::new(&model.parameters(), config.learning_rate as f32);
    let schedule = config.schedule();
    let mut order = split.train.clone();
    let mut tape = Tape::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        adam.lr = lr as f32;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let (fc, conv) = data.batch(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label.index()).collect();
            let (loss, grads) = model.loss_and_grads_on(&mut tape, &fc, conv.as_ref(), &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { run, epoch });
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
            model.apply_adam(&mut adam, &grads);
        }
        let mean_loss = loss_sum / order.len() as f64;
        log::debug!("run {run} epoch {epoch}: loss {mean_loss:.6} lr {lr}");
        epochs.push(EpochRecord { epoch, mean_loss, lr });
    }
    if config.epochs > 0 {
        model.mark_trained();
    }
    let train_eval = evaluate_unchecked(&model, data, &split.train)?;
    let test_eval = evaluate_unchecked(&model, data, &split.test)?;
    let metrics = RunMetrics {
        run,
        seed,
        train_size: split.train.len(),
        test_size: split.test.len(),
        epochs,
        train_accuracy: train_eval.accuracy,
        test_accuracy: test_eval.accuracy,
        train_confusion: train_eval.confusion,
        test_confusion: test_eval.confusion,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}

/// Predicts every sample at `indices`, in order.
pub fn evaluate(model: &GcnModel, data: &Dataset, indices: &[usize]) -> Result<EvalReport, TrainError> {
    if model.state() == ModelState::Initialized {
        return Err(ModelError::NotTrained.into());
    }
    evaluate_unchecked(model, data, indices)
}

/// Evaluates the whole dataset.
pub fn evaluate_all(model: &GcnModel, data: &Dataset) -> Result<EvalReport, TrainError> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate(model, data, &all)
}

fn evaluate_unchecked(model: &GcnModel, data: &Dataset, indices: &[usize]) -> Result<EvalReport, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut tape = Tape::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (fc, conv) = data.batch(chunk)?;
        let logits = model.logits_on(&mut tape, &fc, conv.as_ref())?;
        for (k, &i) in chunk.iter().enumerate() {
            let row = logits.row(k);
            let p = Prediction::from_logits(row[0], row[1]);
            let s = &data.samples[i];
            predictions.push(PredictionRecord {
                model_id: s.model_id.clone(),
                truth: s.label,
                predicted: p.label,
                p_trojaned: p.p_trojaned(),
                logits: [row[0], row[1]],
            });
        }
    }
    Ok(EvalReport::from_predictions(predictions))
}

/// Applies `swaps` random node-pair swaps to every evaluated fc graph and
/// compares predictions against the unpermuted ones. Each graph draws its
/// own swap seed from a generator seeded with `seed`.
pub fn permutation_trial(
    model: &GcnModel,
    data: &Dataset,
    indices: &[usize],
    swaps: usize,
    seed: u64,
) -> Result<PermutationReport, TrainError> {
    let plain = evaluate(model, data, indices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = indices
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            s.with_fc(random_pair_swaps(s.fc(), swaps, rng.next_u64()))
        })
        .collect::<Result<_, _>>()?;
    let permuted_data = Dataset::new(samples, data.features, data.modality)?;
    let all: Vec<usize> = (0..indices.len()).collect();
    let permuted = evaluate(model, &permuted_data, &all)?;
    let max_logit_deviation = plain
        .predictions
        .iter()
        .zip(&permuted.predictions)
        .flat_map(|(a, b)| [(a.logits[0] - b.logits[0]).abs(), (a.logits[1] - b.logits[1]).abs()])
        .fold(0.0f32, f32::max);
    let identical_predictions = plain
        .predictions
        .iter()
        .zip(&permuted.predictions)
        .all(|(a, b)| a.predicted == b.predicted);
    Ok(PermutationReport {
        swaps,
        seed,
        plain,
        permuted,
        max_logit_deviation,
        identical_predictions,
    })
}

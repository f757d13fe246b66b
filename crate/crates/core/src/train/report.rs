use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::bundle::Label;

/// Binary confusion counts with trojaned as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Trojaned, Label::Trojaned) => self.tp += 1,
            (Label::Clean, Label::Clean) => self.tn += 1,
            (Label::Clean, Label::Trojaned) => self.fp += 1,
            (Label::Trojaned, Label::Clean) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Percentage of correct predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => 100.0 * (self.tp + self.tn) as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model_id: String,
    pub truth: Label,
    pub predicted: Label,
    pub p_trojaned: f64,
    pub logits: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub predictions: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<PredictionRecord>) -> Self {
        let mut confusion = Confusion::default();
        for p in &predictions {
            confusion.record(p.truth, p.predicted);
        }
        Self {
            accuracy: confusion.accuracy(),
            confusion,
            predictions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub swaps: usize,
    pub seed: u64,
    pub plain: EvalReport,
    pub permuted: EvalReport,
    /// Largest absolute logit change over all graphs.
    pub max_logit_deviation: f32,
    pub identical_predictions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_confusion: Confusion,
    pub test_confusion: Confusion,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub runs: Vec<RunMetrics>,
    pub mean_train_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn from_runs(config: TrainConfig, runs: Vec<RunMetrics>) -> Self {
        let n = runs.len().max(1) as f64;
        Self {
            mean_train_accuracy: runs.iter().map(|r| r.train_accuracy).sum::<f64>() / n,
            mean_test_accuracy: runs.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
            total_seconds: runs.iter().map(|r| r.seconds).sum(),
            config,
            runs,
        }
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.total_seconds = 0.0;
        for run in &mut r.runs {
            run.seconds = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `run,epoch,mean_loss,lr` rows.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("run,epoch,mean_loss,lr\n");
        for run in &self.runs {
            for e in &run.epochs {
                writeln!(out, "{},{},{},{}", run.run, e.epoch, e.mean_loss, e.lr).unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_correct_one_false_positive() {
        let mut c = Confusion::default();
        c.record(Label::Clean, Label::Clean);
        c.record(Label::Trojaned, Label::Trojaned);
        c.record(Label::Clean, Label::Trojaned);
        assert_eq!(c, Confusion { tp: 1, tn: 1, fp: 1, fn_: 0 });
        assert!((c.accuracy() - 66.666_666_666_666_67).abs() < 1e-9);
        assert_eq!(serde_json::to_value(c).unwrap()["fn"], 0);
    }

    #[test]
    fn csv_and_timing() {
        let run = RunMetrics {
            run: 0,
            seed: 3,
            train_size: 8,
            test_size: 2,
            epochs: vec![EpochRecord { epoch: 0, mean_loss: 0.5, lr: 0.001 }],
            train_accuracy: 100.0,
            test_accuracy: 50.0,
            train_confusion: Confusion::default(),
            test_confusion: Confusion::default(),
            seconds: 1.25,
        };
        let report = RunReport::from_runs(TrainConfig::default(), vec![run]);
        assert_eq!(report.losses_csv(), "run,epoch,mean_loss,lr\n0,0,0.5,0.001\n");
        assert_eq!(report.total_seconds, 1.25);
        assert_eq!(report.without_timing().runs[0].seconds, 0.0);
        assert_eq!(report.mean_test_accuracy, 50.0);
    }
}

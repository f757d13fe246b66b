use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debugcn_core::bundle::{load_manifest, read_bundle, summary_stats, Label, Manifest};
use debugcn_core::model::{checkpoint, GcnModel};
use debugcn_core::synth::{self, SynthSpec, MANIFEST_FILE};
use debugcn_core::train::{self, evaluate_all, permutation_trial, Dataset, EvalReport, Sample, TrainConfig};

/// Detects backdoored CNNs from their final-layer and first-conv weights.
#[derive(Parser)]
#[command(name = "debugcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Weight-bundle utilities.
    Bundle {
        #[command(subcommand)]
        action: BundleAction,
    },
    /// Generate a labeled synthetic population and its manifest.
    Synth {
        /// JSON file with SynthSpec fields.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier and save the last run's model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file with TrainConfig fields.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the run report (timing stripped) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-epoch losses as CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Evaluate a saved model on every bundle of a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Classify one bundle.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Evaluate after random node-pair swaps of every fc graph.
    Permute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1000)]
        swaps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-tensor weight distribution of a bundle.
    Stats {
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Subcommand)]
enum BundleAction {
    /// Check a bundle file, or a manifest and every bundle it lists.
    Validate { path: PathBuf },
}

type CliResult = Result<(), Box<dyn Error>>;

/// Usage problems that clap cannot see.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for UsageError {}

fn read_text(path: &Path) -> Result<String, Box<dyn Error>> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_model(path: &Path) -> Result<GcnModel, Box<dyn Error>> {
    checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn dataset_for(model: &GcnModel, manifest: &Manifest) -> Result<Dataset, Box<dyn Error>> {
    let config = model.config();
    Ok(Dataset::from_manifest(manifest, config.feature_config, config.modality)?)
}

fn print_eval(report: &EvalReport) {
    for p in &report.predictions {
        println!("{}\t{}\t{}\t{}", p.model_id, p.truth, p.predicted, p.p_trojaned);
    }
    let c = &report.confusion;
    println!("accuracy\t{}", report.accuracy);
    println!("confusion\ttp={}\ttn={}\tfp={}\tfn={}", c.tp, c.tn, c.fp, c.fn_);
}

fn validate(path: &Path) -> CliResult {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = load_manifest(path)?;
        manifest.validate_files()?;
        println!("ok\tmanifest\t{} bundles", manifest.len());
        return Ok(());
    }
    let b = read_bundle(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let conv = b.conv1_weight.as_ref().map_or("none".to_string(), |t| format!("{:?}", t.dims()));
    println!("ok\t{}\tfc={:?}\tconv1={conv}", b.model_id, b.fc_weight.dims());
    Ok(())
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Bundle {
            action: BundleAction::Validate { path },
        } => validate(&path)?,
        Command::Synth { spec, out } => {
            let spec = SynthSpec::from_json(&read_text(&spec)?)?;
            let manifest = synth::generate(&spec, &out)?;
            println!("{}\t{} bundles", out.join(MANIFEST_FILE).display(), manifest.len());
        }
        Command::Train {
            manifest,
            config,
            out,
            report,
            losses,
        } => {
            let config = TrainConfig::from_json(&read_text(&config)?)?;
            let manifest = load_manifest(&manifest)?;
            let (model, run_report) = train::train(&manifest, &config)?;
            checkpoint::save(&model, &out)?;
            for r in &run_report.runs {
                println!("run\t{}\tseed={}\ttrain={}\ttest={}", r.run, r.seed, r.train_accuracy, r.test_accuracy);
                log::info!("run {} took {:.2} s", r.run, r.seconds);
            }
            println!("mean_test_accuracy\t{}", run_report.mean_test_accuracy);
            if let Some(path) = report {
                write_text(&path, &run_report.without_timing().to_json())?;
            }
            if let Some(path) = losses {
                write_text(&path, &run_report.losses_csv())?;
            }
        }
        Command::Eval { model, manifest } => {
            let model = load_model(&model)?;
            let data = dataset_for(&model, &load_manifest(&manifest)?)?;
            print_eval(&evaluate_all(&model, &data)?);
        }
        Command::Predict { model, bundle } => {
            let model = load_model(&model)?;
            let config = model.config();
            let b = read_bundle(&bundle).map_err(|e| format!("{}: {e}", bundle.display()))?;
            let sample = Sample::from_bundle(&b, Label::Clean, config.feature_config, config.modality)?;
            let p = model.predict(sample.fc(), sample.conv())?;
            println!("{}\t{}\t{}", b.model_id, p.label, p.p_trojaned());
        }
        Command::Permute {
            model,
            manifest,
            swaps,
            seed,
        } => {
            let model = load_model(&model)?;
            let data = dataset_for(&model, &load_manifest(&manifest)?)?;
            let all: Vec<usize> = (0..data.len()).collect();
            let trial = permutation_trial(&model, &data, &all, swaps, seed)?;
            print_eval(&trial.permuted);
            println!("unpermuted_accuracy\t{}", trial.plain.accuracy);
            println!("max_logit_deviation\t{}", trial.max_logit_deviation);
            println!("identical_predictions\t{}", trial.identical_predictions);
        }
        Command::Stats { bundle } => {
            let b = read_bundle(&bundle).map_err(|e| format!("{}: {e}", bundle.display()))?;
            println!("tensor\tcount\tmin\tq1\tmedian\tq3\tmax\tmean");
            for s in summary_stats(&b) {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    s.tensor, s.count, s.min, s.q1, s.median, s.q3, s.max, s.mean
                );
            }
        }
    }
    Ok(())
}

/// Caps rayon's global pool from DEBUGCN_THREADS.
fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("DEBUGCN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("DEBUGCN_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with exit 0; real usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = e.to_string();
            let mut source = e.source();
            while let Some(s) = source {
                let text = s.to_string();
                if !line.ends_with(&text) {
                    line = format!("{line}: {text}");
                }
                source = s.source();
            }
            eprintln!("error: {}", line.replace('\n', " "));
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

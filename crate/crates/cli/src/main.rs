use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cityscope_core::dataset::{scan_dataset, split_dataset, DatasetManifest, LoadedSplit, PreprocessConfig, ScalingMode, Split, SplitRatios};
use cityscope_core::evaluation::{compare_runs, evaluate_loaded, evaluate_split, ClassificationReport, RunEntry};
use cityscope_core::model::{
    build_vanilla_cnn, build_vgg16_transfer, count_parameters, import_pretrained_weights, init_parameters, load_checkpoint,
    save_checkpoint, ArchitectureSpec, Checkpoint, HeadConfig, TrainabilityMask, VanillaConfig,
};
use cityscope_core::reports::{plot_history, plot_training_history, predict_image};
use cityscope_core::training::{fine_tune_two_stage, fit, FitOutcome, TrainConfig, TrainingHistory};

const CHECKPOINT_FILE: &str = "model.ckpt";
const HISTORY_FILE: &str = "history.jsonl";
const TEST_REPORT_FILE: &str = "report_test.json";

/// Train and evaluate city-scene classifiers.
///
/// Logging goes to stderr; set CITYSCOPE_LOG to error, info or debug.
#[derive(Parser)]
#[command(name = "cityscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a `<root>/<class>/<image>` tree into a manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign every record to train/val/test, stratified by class.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.70,0.15,0.15")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the split manifest (defaults to overwriting the input).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-split a manifest that already has assignments.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model (vanilla CNN or VGG16 with a frozen backbone).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML file with training hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Arch::Vanilla)]
        arch: Arch,
        /// Pretrained backbone bundle (vgg16 only).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonTrainArgs,
    },
    /// Two-stage VGG16 fine-tune: head first, then the unfrozen blocks.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config_stage1: Option<PathBuf>,
        #[arg(long)]
        config_stage2: Option<PathBuf>,
        /// Layer groups to unfreeze in stage 2.
        #[arg(long, value_delimiter = ',', default_value = "block5")]
        unfreeze: Vec<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonTrainArgs,
    },
    /// Report accuracy, per-class metrics and the confusion matrix.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Rank classes for one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Draw accuracy and loss curves from a history file.
    Plot {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Tabulate several run directories side by side.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Vanilla,
    Vgg16,
}

#[derive(Args)]
struct CommonTrainArgs {
    /// Run label used in history, checkpoint and plot names.
    #[arg(long)]
    label: Option<String>,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 175)]
    image_size: usize,
    /// Pixel scaling: unit (value/255) or imagenet (channel-standardized).
    #[arg(long)]
    scaling: Option<ScalingMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    dropout_seed: Option<u64>,
}

impl CommonTrainArgs {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            config.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.init_seed {
            config.init_seed = v;
        }
        if let Some(v) = self.shuffle_seed {
            config.shuffle_seed = v;
        }
        if let Some(v) = self.dropout_seed {
            config.dropout_seed = v;
        }
    }

    fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            scaling_mode: self.scaling.unwrap_or_default(),
            ..PreprocessConfig::square(self.image_size)
        }
    }
}

fn read_config(path: Option<&Path>, fallback: TrainConfig) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(fallback);
    };
    let text = fs::read_to_string(path).with_context(|| format!("MissingFile: cannot read config {}", path.display()))?;
    let config: TrainConfig = toml::from_str(&text).with_context(|| format!("BadConfig: {}", path.display()))?;
    Ok(config)
}

fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("BadRatios: cannot parse '{text}'"))?;
    let [train, val, test] = parts[..] else {
        bail!("BadRatios: expected three comma-separated fractions, got '{text}'");
    };
    Ok(SplitRatios::new(train, val, test)?)
}

fn build_arch(arch: Arch, preprocess: &PreprocessConfig, classes: usize) -> Result<(ArchitectureSpec, TrainabilityMask)> {
    Ok(match arch {
        Arch::Vanilla => {
            let spec = build_vanilla_cnn(preprocess.input_shape(), classes, &VanillaConfig::default())?;
            let mask = TrainabilityMask::all_trainable(&spec);
            (spec, mask)
        }
        Arch::Vgg16 => build_vgg16_transfer(preprocess.input_shape(), classes, &HeadConfig::default())?,
    })
}

struct Run<'a> {
    out_dir: &'a Path,
    label: &'a str,
    manifest: &'a DatasetManifest,
    preprocess: PreprocessConfig,
    arch: ArchitectureSpec,
    mask: TrainabilityMask,
    batch_size: usize,
}

impl Run<'_> {
    /// Writes checkpoint, history, plots and (when there is a test split) the
    /// test report.
    fn finish(&self, outcome: FitOutcome) -> Result<()> {
        fs::create_dir_all(self.out_dir)?;
        let checkpoint = Checkpoint {
            label: self.label.to_string(),
            arch: self.arch.clone(),
            params: outcome.params,
            mask: self.mask.clone(),
            optimizer: Some(outcome.optimizer),
            preprocess: self.preprocess,
            class_names: self.manifest.vocabulary.names().to_vec(),
        };
        save_checkpoint(&checkpoint, &self.out_dir.join(CHECKPOINT_FILE))?;
        outcome.history.save(&self.out_dir.join(HISTORY_FILE))?;
        plot_training_history(&outcome.history, self.out_dir)?;
        if let Some(best) = outcome.history.best_metrics() {
            eprintln!(
                "[{}] best epoch {}: val loss {:.4}, val accuracy {:.1}%",
                self.label,
                best.epoch,
                best.val_loss,
                best.val_accuracy * 100.0
            );
        }
        if self.manifest.split_len(Split::Test) > 0 {
            let test = LoadedSplit::load(self.manifest, Split::Test, &self.preprocess)?;
            let report = evaluate_loaded(&self.arch, &checkpoint.params, &test, self.batch_size, &checkpoint.class_names)?;
            fs::write(self.out_dir.join(TEST_REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.render_text());
        }
        info!("wrote run to {}", self.out_dir.display());
        Ok(())
    }
}

fn load_split_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(path)?;
    if !manifest.is_split() {
        bail!("BadConfig: manifest {} has no split; run `cityscope split` first", path.display());
    }
    Ok(manifest)
}

fn train(
    manifest: &Path,
    config: Option<&Path>,
    arch: Arch,
    weights: Option<&Path>,
    out_dir: &Path,
    common: &CommonTrainArgs,
) -> Result<()> {
    let manifest = load_split_manifest(manifest)?;
    let mut config = read_config(config, TrainConfig::default())?;
    common.apply(&mut config);
    if let Some(lr) = common.learning_rate {
        config.learning_rate = lr;
    }
    if weights.is_some() && arch == Arch::Vanilla {
        bail!("BadConfig: --weights only applies to --arch vgg16");
    }
    let preprocess = common.preprocess();
    let (spec, mask) = build_arch(arch, &preprocess, manifest.num_classes())?;
    let mut params = init_parameters(&spec, config.init_seed);
    if let Some(bundle) = weights {
        params = import_pretrained_weights(bundle, &spec, &params, true)?.0;
    } else if arch == Arch::Vgg16 {
        log::warn!("no --weights given; the frozen backbone keeps its random initialization");
    }
    let label = common.label.clone().unwrap_or_else(|| match arch {
        Arch::Vanilla => "vanilla".into(),
        Arch::Vgg16 => "vgg16".into(),
    });
    let counts = count_parameters(&spec, &mask);
    info!("{label}: {} parameters, {} trainable", counts.total, counts.trainable);
    let train = LoadedSplit::load(&manifest, Split::Train, &preprocess)?;
    let val = LoadedSplit::load(&manifest, Split::Val, &preprocess)?;
    let outcome = fit(&spec, params, &mask, &train, &val, &config, &label)?;
    Run {
        out_dir,
        label: &label,
        manifest: &manifest,
        preprocess,
        arch: spec,
        mask,
        batch_size: config.batch_size,
    }
    .finish(outcome)
}

fn finetune(
    manifest: &Path,
    stage1: Option<&Path>,
    stage2: Option<&Path>,
    unfreeze: &[String],
    weights: Option<&Path>,
    out_dir: &Path,
    common: &CommonTrainArgs,
) -> Result<()> {
    let manifest = load_split_manifest(manifest)?;
    let mut stage1 = read_config(stage1, TrainConfig::default())?;
    let mut stage2 = read_config(stage2, TrainConfig::fine_tune_default())?;
    common.apply(&mut stage1);
    common.apply(&mut stage2);
    if let Some(lr) = common.learning_rate {
        stage1.learning_rate = lr;
    }
    let preprocess = common.preprocess();
    let (spec, mask) = build_arch(Arch::Vgg16, &preprocess, manifest.num_classes())?;
    let mut params = init_parameters(&spec, stage1.init_seed);
    match weights {
        Some(bundle) => params = import_pretrained_weights(bundle, &spec, &params, true)?.0,
        None => log::warn!("no --weights given; fine-tuning from a random backbone"),
    }
    let label = common.label.clone().unwrap_or_else(|| "vgg16_finetune".into());
    let train = LoadedSplit::load(&manifest, Split::Train, &preprocess)?;
    let val = LoadedSplit::load(&manifest, Split::Val, &preprocess)?;
    let (outcome, stage2_mask) = fine_tune_two_stage(&spec, params, &mask, &train, &val, &stage1, &stage2, unfreeze, &label)?;
    Run {
        out_dir,
        label: &label,
        manifest: &manifest,
        preprocess,
        arch: spec,
        mask: stage2_mask,
        batch_size: stage2.batch_size,
    }
    .finish(outcome)
}

fn evaluate(manifest: &Path, checkpoint: &Path, split: Split, batch_size: usize, out: Option<&Path>, json: bool) -> Result<()> {
    let manifest = load_split_manifest(manifest)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.class_names != manifest.vocabulary.names() {
        bail!("ShapeMismatch: checkpoint classes {:?} differ from the manifest's", ckpt.class_names);
    }
    let report = evaluate_split(&ckpt.arch, &ckpt.params, &manifest, split, batch_size, &ckpt.preprocess)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = out {
        fs::write(out, &text)?;
    }
    if json {
        println!("{text}");
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn compare(runs: &[PathBuf], json: bool) -> Result<()> {
    let mut entries = Vec::new();
    for dir in runs {
        let history = TrainingHistory::load(&dir.join(HISTORY_FILE))?;
        let report_path = dir.join(TEST_REPORT_FILE);
        let text = fs::read_to_string(&report_path).with_context(|| format!("MissingFile: {} not found", report_path.display()))?;
        let test_report: ClassificationReport = serde_json::from_str(&text).with_context(|| format!("CorruptReport: {}", report_path.display()))?;
        let ckpt = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        entries.push(RunEntry {
            history,
            test_report,
            counts: count_parameters(&ckpt.arch, &ckpt.mask),
        });
    }
    let report = compare_runs(&entries)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scan { root, out } => {
            let (manifest, skipped) = scan_dataset(&root)?;
            manifest.save(&out)?;
            eprintln!(
                "{} images in {} classes ({} entries skipped)",
                manifest.records.len(),
                manifest.num_classes(),
                skipped.skipped.len()
            );
        }
        Command::Split {
            manifest,
            ratios,
            seed,
            out,
            overwrite,
        } => {
            let ratios = parse_ratios(&ratios)?;
            let split = split_dataset(&DatasetManifest::load(&manifest)?, ratios, seed, overwrite)?;
            split.save(out.as_deref().unwrap_or(&manifest))?;
            eprintln!(
                "train {} / val {} / test {}",
                split.split_len(Split::Train),
                split.split_len(Split::Val),
                split.split_len(Split::Test)
            );
        }
        Command::Train {
            manifest,
            config,
            arch,
            weights,
            out_dir,
            common,
        } => train(&manifest, config.as_deref(), arch, weights.as_deref(), &out_dir, &common)?,
        Command::Finetune {
            manifest,
            config_stage1,
            config_stage2,
            unfreeze,
            weights,
            out_dir,
            common,
        } => finetune(
            &manifest,
            config_stage1.as_deref(),
            config_stage2.as_deref(),
            &unfreeze,
            weights.as_deref(),
            &out_dir,
            &common,
        )?,
        Command::Evaluate {
            manifest,
            checkpoint,
            split,
            batch_size,
            out,
            json,
        } => evaluate(&manifest, &checkpoint, split, batch_size, out.as_deref(), json)?,
        Command::Predict {
            image,
            checkpoint,
            top_k,
            json,
        } => {
            let result = predict_image(&image, &checkpoint, top_k)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                print!("{}", result.render_text());
            }
        }
        Command::Plot { history, out_dir } => {
            for path in plot_history(&history, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Compare { runs, json } => compare(&runs, json)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside clap.
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CITYSCOPE_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

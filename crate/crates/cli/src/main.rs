//! `medseg` command line: dataset inspection, config-driven training,
//! prediction and evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use medseg::data::{binarize, fold, FoldSplit, NNUNetDataset, SupervisedDataset};
use medseg::evaluation::{evaluate, load_label_folder, Metric};
use medseg::inference::{Predictant, Predictor};
use medseg::inspection::inspect;
use medseg::training::{summary_json, Trainer};
use medseg_unet::UNetTrainer;

use config::{RunConfig, UNetOptions};

/// Copy of the run configuration stored in each experiment folder.
const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Parser)]
#[command(name = "medseg", version, about = "Medical image segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a labeled dataset and report bounding boxes, class counts and the ROI shape.
    Inspect {
        dataset: PathBuf,
        #[arg(long, default_value = "Tr")]
        split: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a bundle from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume the run stored in this experiment folder.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict segmentations with a trained experiment.
    Predict {
        /// Experiment folder holding the checkpoints.
        #[arg(long)]
        experiment: PathBuf,
        /// An image file or a folder of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score prediction files against label files with matching names.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// 1 for binary masks.
        #[arg(long, default_value_t = 1)]
        num_classes: usize,
        /// Also write the JSON result here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open_dataset(folder: &Path, split: &str) -> Result<Arc<dyn SupervisedDataset>> {
    let ds = NNUNetDataset::open(folder, split).with_context(|| format!("cannot open dataset {}", folder.display()))?;
    if ds.is_empty() {
        bail!("dataset {} has no cases in split {split}", folder.display());
    }
    Ok(Arc::new(ds))
}

fn run_inspect(dataset: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let ds = open_dataset(dataset, split)?;
    let report = inspect(ds.as_ref())?;
    let json = report.to_json()?;
    let summary = format!("roi_shape: {:?}\nclass totals: {:?}", report.roi_shape, report.class_totals());
    match out {
        Some(path) => {
            std::fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))?;
            println!("{summary}");
        }
        None => {
            println!("{json}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn hooks(bundle: &str, unet: &UNetOptions) -> Result<UNetTrainer> {
    match bundle {
        "unet" => Ok(UNetTrainer::new(unet.depth, unet.base_channels)),
        other => bail!("unknown bundle `{other}`; available bundles: {}", config::BUNDLES.join(", ")),
    }
}

fn run_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    cfg.validate()?;
    let mut ds = open_dataset(&cfg.dataset, &cfg.split)?;
    if cfg.binarize {
        ds = Arc::new(binarize(ds));
    }
    let (train, val) = fold(ds, FoldSplit::new(cfg.k, cfg.fold, cfg.fold_seed))?;
    let (train, val): (Arc<dyn SupervisedDataset>, Arc<dyn SupervisedDataset>) = (Arc::new(train), Arc::new(val));
    let hooks = hooks(&cfg.bundle, &cfg.unet)?;

    let summary = match resume {
        Some(folder) => {
            let mut t = Trainer::recover_from(folder, hooks, train, val)?;
            t.set_frontend(cfg.frontend());
            t.continue_training(Some(cfg.epochs))?
        }
        None => {
            let mut t = Trainer::new(hooks, train, val, &cfg.output_dir);
            t.config = cfg.segmentation();
            t.args.epochs = cfg.epochs;
            t.args.batch_size = cfg.batch_size;
            t.args.seed = cfg.seed;
            t.args.save_previews = cfg.save_previews;
            t.set_frontend(cfg.frontend());
            t.build()?;
            let folder = t.folder().expect("built").to_path_buf();
            std::fs::write(folder.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
            t.train(cfg.epochs, cfg.early_stop_tolerance)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary_json(&summary))?);
    Ok(())
}

fn run_predict(experiment: &Path, input: &Path, output: &Path) -> Result<()> {
    let stored = experiment.join(RUN_CONFIG_FILE);
    let (bundle, unet) = if stored.is_file() {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(&stored)?).with_context(|| format!("invalid {}", stored.display()))?;
        (cfg.bundle, cfg.unet)
    } else {
        ("unet".to_string(), UNetOptions::default())
    };
    if let Ok(dev) = std::env::var(config::DEVICE_ENV) {
        medseg::data::parse_device(&dev)?;
    }
    if !input.exists() {
        bail!("input {} does not exist", input.display());
    }
    let mut predictor = Predictor::from_experiment(hooks(&bundle, &unet)?, experiment)?;
    for path in predictor.predict_to_file(&Predictant::Path(input.to_path_buf()), output)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run_evaluate(predictions: &Path, labels: &Path, num_classes: usize, out: Option<&Path>) -> Result<()> {
    let preds = load_label_folder(predictions, num_classes).with_context(|| format!("cannot load predictions from {}", predictions.display()))?;
    let labs = load_label_folder(labels, num_classes).with_context(|| format!("cannot load labels from {}", labels.display()))?;
    let result = evaluate(&[Metric::dice_for(num_classes)], &preds, &labs)?;
    let json = result.to_json()?;
    if let Some(path) = out {
        std::fs::write(path, &json).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Inspect { dataset, split, out } => run_inspect(dataset, split, out.as_deref()),
        Command::Train { config, resume } => run_train(config, resume.as_deref()),
        Command::Predict { experiment, input, output } => run_predict(experiment, input, output),
        Command::Evaluate { predictions, labels, num_classes, out } => run_evaluate(predictions, labels, *num_classes, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

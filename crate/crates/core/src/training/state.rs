//! Run arguments, the state orb and experiment folder layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::LoaderState;
use crate::error::{Error, IoContext, Result};
use crate::numerics::{DEFAULT_PLATEAU_FRACTION, DEFAULT_WARMUP_EPOCHS};
use crate::preset::SegmentationConfig;

pub const METRICS_CSV: &str = "metrics.csv";
pub const LATEST_CKPT: &str = "latest.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const STATE_ORB: &str = "state.orb";
pub const LOG_FILE: &str = "log.txt";
pub const PLOTS_DIR: &str = "plots";
pub const PREVIEWS_DIR: &str = "previews";

/// Arguments of a training run other than the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    pub epochs: usize,
    pub early_stop_tolerance: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub plateau_fraction: f64,
    pub save_previews: bool,
}

impl Default for TrainArgs {
    fn default() -> Self {
        Self {
            epochs: 0,
            early_stop_tolerance: None,
            batch_size: 2,
            seed: 0,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            plateau_fraction: DEFAULT_PLATEAU_FRACTION,
            save_previews: true,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_score: f64,
    pub lr: f64,
    pub epoch_seconds: f64,
    /// Mean validation Dice of each foreground class.
    pub dice: Vec<f64>,
}

impl EpochRecord {
    pub fn mean_dice(&self) -> f64 {
        if self.dice.is_empty() {
            f64::NAN
        } else {
            self.dice.iter().sum::<f64>() / self.dice.len() as f64
        }
    }
}

/// Fixed leading columns of `metrics.csv`, followed by `mean_dice` and one
/// `dice_{k}` column per foreground class.
pub const CSV_COLUMNS: [&str; 6] = ["epoch", "train_loss", "val_loss", "val_score", "lr", "epoch_seconds"];

/// Foreground class indices reported for a configuration.
pub fn foreground_classes(num_classes: usize) -> Vec<usize> {
    if num_classes == 1 {
        vec![1]
    } else {
        (1..num_classes).collect()
    }
}

pub fn write_metrics_csv(path: &Path, history: &[EpochRecord], num_classes: usize) -> Result<()> {
    let classes = foreground_classes(num_classes);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("mean_dice".into());
    header.extend(classes.iter().map(|k| format!("dice_{k}")));
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_score.to_string(),
            r.lr.to_string(),
            format!("{:.3}", r.epoch_seconds),
            r.mean_dice().to_string(),
        ];
        row.extend(r.dice.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Everything besides tensors needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateOrb {
    pub trainer: String,
    pub epoch: usize,
    /// `None` until the first validation, i.e. negative infinity.
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_without_improvement: usize,
    pub config: SegmentationConfig,
    pub train_args: TrainArgs,
    pub example_shape: Vec<usize>,
    pub rng_state: LoaderState,
    pub val_rng_state: Option<Value>,
    pub epoch_durations: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub optimizer: Value,
    pub scheduler: Value,
    pub criterion: String,
}

impl StateOrb {
    pub fn best_score(&self) -> f64 {
        self.best_score.unwrap_or(f64::NEG_INFINITY)
    }

    /// Writes through a temporary file so a crash never leaves a partial orb.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("orb.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
    }
}

/// Creates `{output_dir}/{trainer}/{YYYYMMDD-HHMM}`, appending `_1`, `_2`,
/// ... when that folder already exists.
pub fn create_experiment_folder(output_dir: &Path, trainer: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M").to_string();
    let parent = output_dir.join(trainer);
    std::fs::create_dir_all(&parent).at(&parent)?;
    let mut n = 0;
    loop {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}_{n}") };
        let root = parent.join(name);
        match std::fs::create_dir(&root) {
            Ok(()) => {
                for sub in [PLOTS_DIR, PREVIEWS_DIR] {
                    std::fs::create_dir_all(root.join(sub)).at(&root)?;
                }
                return Ok(root);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(root, e)),
        }
    }
}

//! JSON run configuration for `medseg train`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medseg::frontend::{create_hybrid_frontend, file_frontend, http_frontend, Frontend, NullFrontend};
use medseg::preset::SegmentationConfig;
use serde::{Deserialize, Serialize};

pub const OUTPUT_DIR_ENV: &str = "MEDSEG_OUTPUT_DIR";
pub const DEVICE_ENV: &str = "MEDSEG_DEVICE";
pub const BUNDLES: &[&str] = &["unet"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetOptions {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
}

fn default_depth() -> usize {
    medseg_unet::DEFAULT_DEPTH
}

fn default_base() -> usize {
    medseg_unet::DEFAULT_BASE_CHANNELS
}

impl Default for UNetOptions {
    fn default() -> Self {
        Self { depth: default_depth(), base_channels: default_base() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FrontendSpec {
    /// JSON lines, one per event.
    File { path: PathBuf },
    /// MLflow-style REST tracking server.
    Http {
        url: String,
        #[serde(default = "default_experiment")]
        experiment: String,
    },
}

fn default_experiment() -> String {
    "medseg".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// nnU-Net raw layout folder.
    pub dataset: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub fold: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub fold_seed: u64,
    /// Merge all foreground classes into one.
    #[serde(default)]
    pub binarize: bool,
    #[serde(default = "default_bundle")]
    pub bundle: String,
    #[serde(default)]
    pub unet: UNetOptions,
    #[serde(default = "one")]
    pub num_classes: usize,
    #[serde(default = "two")]
    pub num_dims: usize,
    pub epochs: usize,
    #[serde(default)]
    pub early_stop_tolerance: Option<usize>,
    #[serde(default)]
    pub deep_supervision: bool,
    #[serde(default)]
    pub ema: bool,
    #[serde(default = "two")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub save_previews: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default)]
    pub frontends: Vec<FrontendSpec>,
}

fn default_split() -> String {
    "Tr".into()
}
fn default_k() -> usize {
    5
}
fn default_bundle() -> String {
    "unet".into()
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}
fn default_output() -> PathBuf {
    "experiments".into()
}
fn default_device() -> String {
    "cpu".into()
}

impl RunConfig {
    /// Reads the file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
        if let Ok(dev) = std::env::var(DEVICE_ENV) {
            cfg.device = dev;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !BUNDLES.contains(&self.bundle.as_str()) {
            bail!("unknown bundle `{}`; available bundles: {}", self.bundle, BUNDLES.join(", "));
        }
        if !self.dataset.is_dir() {
            bail!("dataset folder {} does not exist", self.dataset.display());
        }
        medseg::data::parse_device(&self.device)?;
        self.segmentation().validate()?;
        Ok(())
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            num_classes: self.num_classes,
            num_dims: self.num_dims,
            deep_supervision: self.deep_supervision,
            ema: self.ema,
            ..SegmentationConfig::default()
        }
    }

    pub fn frontend(&self) -> Box<dyn Frontend> {
        let mut children: Vec<Box<dyn Frontend>> = self
            .frontends
            .iter()
            .map(|f| -> Box<dyn Frontend> {
                match f {
                    FrontendSpec::File { path } => Box::new(file_frontend(path)),
                    FrontendSpec::Http { url, experiment } => Box::new(http_frontend(url, experiment)),
                }
            })
            .collect();
        match children.len() {
            0 => Box::new(NullFrontend),
            1 => children.pop().expect("one frontend"),
            _ => Box::new(create_hybrid_frontend(children)),
        }
    }
}

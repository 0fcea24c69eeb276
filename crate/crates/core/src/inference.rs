//! Prediction with lazily loaded checkpoints and export to image files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::data::{fast_load, image_stem, is_image_file, load_image, save_image, Geometry, ImageVolume, SourceFormat, SupervisedDataset};
use crate::error::{Error, IoContext, Result};
use crate::nn::{load_state_dict, Network};
use crate::preset::{PaddingModule, SegmentationConfig};
use crate::training::logits_to_classes;
use crate::training::state::{StateOrb, BEST_CKPT, LATEST_CKPT, STATE_ORB};

/// Something to predict on.
#[derive(Clone)]
pub enum Predictant {
    /// A single image file or a directory of image files.
    Path(PathBuf),
    /// One `(C, ...)` image.
    Tensor(Tensor),
    /// A `(B, C, ...)` stack of images.
    Batch(Tensor),
    Dataset(Arc<dyn SupervisedDataset>),
}

/// One normalized input.
#[derive(Debug, Clone)]
pub struct PredictItem {
    pub id: String,
    /// `(C, ...)`, `f32`.
    pub image: Tensor,
    pub geometry: Option<Geometry>,
    pub source: Option<PathBuf>,
}

fn from_file(path: &Path) -> Result<PredictItem> {
    let vol = load_image(path, None, &Device::Cpu)?;
    Ok(PredictItem { id: image_stem(path), image: vol.data.to_dtype(DType::F32)?, geometry: Some(vol.geometry), source: Some(path.to_path_buf()) })
}

/// Normalizes a predictant into an ordered list of inputs. Directories are
/// listed in lexicographic order; files of unsupported types are skipped.
pub fn parse_predictant(input: &Predictant) -> Result<Vec<PredictItem>> {
    let items = match input {
        Predictant::Path(p) if p.is_dir() => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p).at(p)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            files.sort();
            let mut items = Vec::new();
            for f in files {
                if is_image_file(&f) {
                    items.push(from_file(&f)?);
                } else if f.is_file() && !f.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw")) {
                    log::warn!("skipping unsupported file {}", f.display());
                }
            }
            if items.is_empty() {
                return Err(Error::Argument(format!("no supported images in {}", p.display())));
            }
            items
        }
        Predictant::Path(p) => vec![from_file(p)?],
        Predictant::Tensor(t) => vec![PredictItem { id: "tensor_0".into(), image: t.to_dtype(DType::F32)?, geometry: None, source: None }],
        Predictant::Batch(t) => {
            let n = t.dim(0)?;
            if n == 0 {
                return Err(Error::Argument("empty batch".into()));
            }
            (0..n)
                .map(|i| Ok(PredictItem { id: format!("tensor_{i}"), image: t.get(i)?.to_dtype(DType::F32)?, geometry: None, source: None }))
                .collect::<Result<_>>()?
        }
        Predictant::Dataset(ds) => {
            if ds.is_empty() {
                return Err(Error::Argument("empty dataset".into()));
            }
            (0..ds.len())
                .map(|i| {
                    let s = ds.get(i)?;
                    Ok(PredictItem { id: s.id, image: s.image, geometry: s.geometry, source: None })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(items)
}

/// Anything mapping a `(C, ...)` image to a `(1, ...)` class map.
pub trait SegmentationModel {
    fn predict(&mut self, image: &Tensor) -> Result<Tensor>;
}

/// Network construction for inference.
pub trait PredictorHooks: Send {
    fn build_network(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<Box<dyn Network>> {
        let _ = (example_shape, config);
        Err(Error::MustOverride("build_network"))
    }
}

/// Loads weights from an experiment folder on first use: `best.ckpt`, or
/// the model section of `latest.ckpt` when no best checkpoint exists.
pub struct Predictor<H: PredictorHooks> {
    hooks: H,
    checkpoint_folder: PathBuf,
    example_shape: Vec<usize>,
    config: SegmentationConfig,
    padding: PaddingModule,
    network: Option<Box<dyn Network>>,
}

impl<H: PredictorHooks> Predictor<H> {
    pub fn new(hooks: H, checkpoint_folder: impl Into<PathBuf>, example_shape: &[usize], config: SegmentationConfig) -> Self {
        let padding = PaddingModule::new(config.padding_divisor);
        Self { hooks, checkpoint_folder: checkpoint_folder.into(), example_shape: example_shape.to_vec(), config, padding, network: None }
    }

    /// Takes the example shape and configuration from the run's state orb.
    pub fn from_experiment(hooks: H, checkpoint_folder: impl Into<PathBuf>) -> Result<Self> {
        let folder = checkpoint_folder.into();
        let orb = StateOrb::load(&folder.join(STATE_ORB))?;
        Ok(Self::new(hooks, folder, &orb.example_shape, orb.config))
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn config(&self) -> &SegmentationConfig {
        &self.config
    }

    pub fn is_loaded(&self) -> bool {
        self.network.is_some()
    }

    fn load(&mut self) -> Result<&dyn Network> {
        if self.network.is_none() {
            let net = self.hooks.build_network(&self.example_shape, &self.config)?;
            let (best, latest) = (self.checkpoint_folder.join(BEST_CKPT), self.checkpoint_folder.join(LATEST_CKPT));
            if best.is_file() {
                load_state_dict(&net.params(), &fast_load(&best, &Device::Cpu)?, "")?;
            } else if latest.is_file() {
                let tensors = fast_load(&latest, &Device::Cpu)?;
                let prefix = if tensors.keys().any(|k| k.starts_with("ema.")) { "ema." } else { "model." };
                load_state_dict(&net.params(), &tensors, prefix)?;
            } else {
                return Err(Error::Load(format!("no {BEST_CKPT} or {LATEST_CKPT} in {}", self.checkpoint_folder.display())));
            }
            self.network = Some(net);
        }
        Ok(self.network.as_deref().expect("loaded"))
    }

    /// Raw logits `(1, C, ...)` at the input's spatial size.
    pub fn predict_logits(&mut self, image: &Tensor) -> Result<Tensor> {
        let (rank, channels) = (self.example_shape.len(), self.example_shape[0]);
        if image.rank() != rank || image.dim(0)? != channels {
            return Err(Error::Argument(format!(
                "input of shape {:?} does not match the network's example shape {:?}",
                image.dims(),
                self.example_shape
            )));
        }
        let x = image.to_dtype(DType::F32)?.unsqueeze(0)?;
        let padding = self.padding;
        let net = self.load()?;
        let (xp, pad) = padding.pad(&x)?;
        let out = net.forward_t(&xp, false)?;
        let first = out.first().ok_or_else(|| Error::Shape("network returned no outputs".into()))?;
        Ok(pad.crop(first)?.detach())
    }

    pub fn predict_all(&mut self, input: &Predictant) -> Result<Vec<(PredictItem, Tensor)>> {
        parse_predictant(input)?
            .into_iter()
            .map(|item| {
                let pred = self.predict(&item.image)?;
                Ok((item, pred))
            })
            .collect()
    }

    /// Predicts every input and writes `{id}.png` (2D) or `{id}.mha` (3D).
    pub fn predict_to_file(&mut self, input: &Predictant, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let num_classes = self.config.num_classes;
        self.predict_all(input)?
            .into_iter()
            .map(|(item, pred)| write_prediction(&item, &pred, num_classes, out_dir))
            .collect()
    }
}

impl<H: PredictorHooks> SegmentationModel for Predictor<H> {
    /// `(1, ...)` class map; logistic threshold 0.5 for binary networks,
    /// argmax over channels otherwise.
    fn predict(&mut self, image: &Tensor) -> Result<Tensor> {
        Ok(logits_to_classes(&self.predict_logits(image)?)?.squeeze(0)?)
    }
}

/// Gray level spacing used to make class indices visible in PNG output:
/// `255 / (classes - 1)`, so a binary mask is stored as 0 / 255.
pub fn gray_step(num_classes: usize) -> u32 {
    255 / (num_classes.max(2) as u32 - 1)
}

/// Writes a `(1, ...)` class map next to its input's geometry.
pub fn write_prediction(item: &PredictItem, pred: &Tensor, num_classes: usize, out_dir: &Path) -> Result<PathBuf> {
    let spatial = pred.rank() - 1;
    let (path, data, format) = match spatial {
        2 => {
            let levels = (pred.to_dtype(DType::F64)? * gray_step(num_classes) as f64)?.to_dtype(DType::I64)?;
            (out_dir.join(format!("{}.png", item.id)), levels, SourceFormat::Raster)
        }
        3 => (out_dir.join(format!("{}.mha", item.id)), pred.to_dtype(DType::I64)?, SourceFormat::MetaImage),
        _ => return Err(Error::Shape(format!("cannot export a prediction of shape {:?}", pred.dims()))),
    };
    let geometry = item.geometry.clone().filter(|g| g.rank() == spatial).unwrap_or_else(|| Geometry::identity(spatial));
    save_image(&ImageVolume::new(data, geometry, format)?, &path)?;
    Ok(path)
}

//! Datasets in the nnU-Net raw layout: `imagesTr/case_MMMM.ext` (one file
//! per modality) and `labelsTr/case.ext`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use super::dataset::check_index;
use super::{image_stem, is_image_file, load_image, load_label, Sample, SupervisedDataset};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone)]
struct Case {
    id: String,
    modalities: Vec<PathBuf>,
    label: PathBuf,
}

#[derive(Debug, Clone)]
pub struct NNUNetDataset {
    root: PathBuf,
    split: String,
    cases: Vec<Case>,
    resample_iso: Option<f64>,
    device: Device,
}

/// Splits `case_0003` into `("case", 3)` when the name ends in a 4-digit
/// modality index.
pub(crate) fn modality_suffix(stem: &str) -> Option<(&str, usize)> {
    let (case, idx) = stem.rsplit_once('_')?;
    (idx.len() == 4 && idx.bytes().all(|b| b.is_ascii_digit()) && !case.is_empty())
        .then(|| (case, idx.parse().unwrap()))
}

pub(crate) fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

impl NNUNetDataset {
    pub fn open(folder: impl AsRef<Path>, split: &str) -> Result<Self> {
        let root = folder.as_ref().to_path_buf();
        if split != "Tr" && split != "Ts" {
            return Err(Error::Argument(format!("split must be `Tr` or `Ts`, got `{split}`")));
        }
        let images_dir = root.join(format!("images{split}"));
        let labels_dir = root.join(format!("labels{split}"));
        for dir in [&images_dir, &labels_dir] {
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", dir.display())));
            }
        }
        let mut grouped: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
        for file in sorted_image_files(&images_dir)? {
            let stem = image_stem(&file);
            let (case, modality) = modality_suffix(&stem).ok_or_else(|| {
                Error::Dataset(format!("image `{}` is not named <case>_<4-digit modality>", file.display()))
            })?;
            grouped.entry(case.to_string()).or_default().insert(modality, file);
        }
        let labels: BTreeMap<String, PathBuf> =
            sorted_image_files(&labels_dir)?.into_iter().map(|p| (image_stem(&p), p)).collect();

        let mut cases = Vec::with_capacity(grouped.len());
        let mut expected: Option<(String, usize)> = None;
        for (id, modalities) in grouped {
            match &expected {
                Some((first, count)) if *count != modalities.len() => {
                    return Err(Error::Dataset(format!(
                        "case `{id}` has {} modalities but `{first}` has {count}",
                        modalities.len()
                    )))
                }
                None => expected = Some((id.clone(), modalities.len())),
                _ => {}
            }
            let label = labels
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("case `{id}` has no label in {}", labels_dir.display())))?;
            cases.push(Case { id, modalities: modalities.into_values().collect(), label });
        }
        Ok(Self { root, split: split.to_string(), cases, resample_iso: None, device: Device::Cpu })
    }

    pub fn with_resampling(mut self, spacing: f64) -> Self {
        self.resample_iso = Some(spacing);
        self
    }

    pub fn with_device(mut self, device: Device) -> Self {
        self.device = device;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn num_modalities(&self) -> usize {
        self.cases.first().map_or(0, |c| c.modalities.len())
    }
}

pub fn nnunet_dataset(folder: impl AsRef<Path>, split: &str) -> Result<NNUNetDataset> {
    NNUNetDataset::open(folder, split)
}

impl SupervisedDataset for NNUNetDataset {
    fn len(&self) -> usize {
        self.cases.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        check_index(self.len(), index)?;
        let case = &self.cases[index];
        let mut channels = Vec::with_capacity(case.modalities.len());
        let mut geometry = None;
        for path in &case.modalities {
            let vol = load_image(path, self.resample_iso, &self.device)?;
            geometry.get_or_insert(vol.geometry);
            channels.push(vol.data.to_dtype(DType::F32)?);
        }
        let image = Tensor::cat(&channels, 0)
            .map_err(|e| Error::Dataset(format!("case `{}`: modalities do not share a shape: {e}", case.id)))?;
        let label = load_label(&case.label, self.resample_iso, &self.device)?;
        let mut sample = Sample::new(case.id.clone(), image, label.data)?;
        sample.geometry = geometry;
        Ok(sample)
    }

    fn case_id(&self, index: usize) -> Result<String> {
        check_index(self.len(), index)?;
        Ok(self.cases[index].id.clone())
    }
}

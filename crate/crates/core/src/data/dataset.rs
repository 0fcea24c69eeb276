use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;

use super::Geometry;
use crate::error::{Error, Result};
use crate::rng;

/// One supervised item: a channel-first `f32` image and an `i64` label map
/// of shape `(1, spatial...)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: Tensor,
    pub geometry: Option<Geometry>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, label: Tensor) -> Result<Self> {
        let id = id.into();
        if image.rank() < 3 || label.rank() != image.rank() || label.dims()[0] != 1 || image.dims()[1..] != label.dims()[1..] {
            return Err(Error::Dataset(format!(
                "case `{id}`: image {:?} and label {:?} do not align",
                image.dims(),
                label.dims()
            )));
        }
        Ok(Self { id, image: image.to_dtype(DType::F32)?, label: label.to_dtype(DType::I64)?, geometry: None })
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.image.dims()[1..]
    }
}

/// An ordered, indexable collection of image/label pairs.
pub trait SupervisedDataset: Send + Sync {
    fn len(&self) -> usize;

    fn get(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn case_id(&self, index: usize) -> Result<String> {
        Ok(self.get(index)?.id)
    }

    /// Snapshot of any internal sampling generator, for exact resumption.
    fn rng_state(&self) -> Option<serde_json::Value> {
        None
    }

    fn restore_rng_state(&self, _state: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

pub fn check_index(len: usize, index: usize) -> Result<()> {
    if index >= len {
        return Err(Error::Argument(format!("index {index} out of range for dataset of length {len}")));
    }
    Ok(())
}

/// In-memory dataset.
#[derive(Debug, Clone, Default)]
pub struct TensorDataset {
    samples: Vec<Sample>,
}

impl TensorDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Builds `case_0000, case_0001, ...` from parallel image and label lists.
    pub fn from_pairs(images: Vec<Tensor>, labels: Vec<Tensor>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let samples = images
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (x, y))| Sample::new(format!("case_{i:04}"), x, y))
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

impl SupervisedDataset for TensorDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        check_index(self.len(), index)?;
        Ok(self.samples[index].clone())
    }

    fn case_id(&self, index: usize) -> Result<String> {
        check_index(self.len(), index)?;
        Ok(self.samples[index].id.clone())
    }
}

/// A view onto selected indices of another dataset.
#[derive(Clone)]
pub struct Subset {
    source: Arc<dyn SupervisedDataset>,
    indices: Vec<usize>,
}

impl Subset {
    pub fn new(source: Arc<dyn SupervisedDataset>, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= source.len()) {
            return Err(Error::Argument(format!("subset index {bad} out of range ({} items)", source.len())));
        }
        Ok(Self { source, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl SupervisedDataset for Subset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        check_index(self.len(), index)?;
        self.source.get(self.indices[index])
    }

    fn case_id(&self, index: usize) -> Result<String> {
        check_index(self.len(), index)?;
        self.source.case_id(self.indices[index])
    }

    fn rng_state(&self) -> Option<serde_json::Value> {
        self.source.rng_state()
    }

    fn restore_rng_state(&self, state: &serde_json::Value) -> Result<()> {
        self.source.restore_rng_state(state)
    }
}

/// Maps every label `> 0` to 1.
#[derive(Clone)]
pub struct BinarizedDataset {
    source: Arc<dyn SupervisedDataset>,
}

impl BinarizedDataset {
    pub fn new(source: Arc<dyn SupervisedDataset>) -> Self {
        Self { source }
    }
}

pub fn binarize(source: Arc<dyn SupervisedDataset>) -> BinarizedDataset {
    BinarizedDataset::new(source)
}

impl SupervisedDataset for BinarizedDataset {
    fn len(&self) -> usize {
        self.source.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let mut sample = self.source.get(index)?;
        sample.label = sample.label.gt(0i64)?.to_dtype(DType::I64)?;
        Ok(sample)
    }

    fn case_id(&self, index: usize) -> Result<String> {
        self.source.case_id(index)
    }

    fn rng_state(&self) -> Option<serde_json::Value> {
        self.source.rng_state()
    }

    fn restore_rng_state(&self, state: &serde_json::Value) -> Result<()> {
        self.source.restore_rng_state(state)
    }
}

/// Concatenation of datasets. Case ids are prefixed per part so that
/// identical ids from different sources stay distinct.
#[derive(Clone)]
pub struct ConcatDataset {
    parts: Vec<(String, Arc<dyn SupervisedDataset>)>,
}

impl ConcatDataset {
    /// Prefixes ids with `ds{i}_` for the `i`-th part.
    pub fn new(parts: Vec<Arc<dyn SupervisedDataset>>) -> Self {
        Self { parts: parts.into_iter().enumerate().map(|(i, p)| (format!("ds{i}_"), p)).collect() }
    }

    pub fn with_prefixes(parts: Vec<(String, Arc<dyn SupervisedDataset>)>) -> Self {
        Self { parts }
    }

    fn locate(&self, mut index: usize) -> Result<(&str, &Arc<dyn SupervisedDataset>, usize)> {
        for (prefix, part) in &self.parts {
            if index < part.len() {
                return Ok((prefix, part, index));
            }
            index -= part.len();
        }
        Err(Error::Argument(format!("index out of range for concatenation of {} items", self.len())))
    }
}

impl SupervisedDataset for ConcatDataset {
    fn len(&self) -> usize {
        self.parts.iter().map(|(_, p)| p.len()).sum()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let (prefix, part, local) = self.locate(index)?;
        let mut sample = part.get(local)?;
        sample.id = format!("{prefix}{}", sample.id);
        Ok(sample)
    }

    fn case_id(&self, index: usize) -> Result<String> {
        let (prefix, part, local) = self.locate(index)?;
        Ok(format!("{prefix}{}", part.case_id(local)?))
    }
}

/// One train/validation partition of k-fold cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub fold: usize,
    pub seed: u64,
}

impl Default for FoldSplit {
    fn default() -> Self {
        Self { k: 5, fold: 0, seed: 0 }
    }
}

impl FoldSplit {
    pub fn new(k: usize, fold: usize, seed: u64) -> Self {
        Self { k, fold, seed }
    }

    /// Shuffles `0..n` with the seed and cuts it into `k` contiguous chunks
    /// (the first `n % k` one element longer). Chunk `fold` is validation.
    /// Both index lists are returned in ascending order.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.k < 2 {
            return Err(Error::Argument(format!("k must be at least 2, got {}", self.k)));
        }
        if self.fold >= self.k {
            return Err(Error::Argument(format!("fold {} out of range for k = {}", self.fold, self.k)));
        }
        if n < self.k {
            return Err(Error::Argument(format!("{n} items cannot be split into {} folds", self.k)));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(self.seed));
        let (base, extra) = (n / self.k, n % self.k);
        let start = self.fold * base + self.fold.min(extra);
        let len = base + usize::from(self.fold < extra);
        let mut val = order[start..start + len].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        val.sort_unstable();
        train.sort_unstable();
        Ok((train, val))
    }
}

pub fn fold(ds: Arc<dyn SupervisedDataset>, split: FoldSplit) -> Result<(Subset, Subset)> {
    let (train, val) = split.split(ds.len())?;
    Ok((Subset::new(ds.clone(), train)?, Subset::new(ds, val)?))
}

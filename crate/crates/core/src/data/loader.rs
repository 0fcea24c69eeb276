use std::sync::Arc;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SupervisedDataset;
use crate::error::{Error, Result};
use crate::rng::{self, RngState};

/// A stacked batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub labels: Tensor,
}

/// Batches a dataset, optionally in a seeded shuffled order.
pub struct DataLoader {
    dataset: Arc<dyn SupervisedDataset>,
    batch_size: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

/// Everything needed to make a loader continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderState {
    pub order: RngState,
    pub dataset: Option<serde_json::Value>,
}

impl DataLoader {
    pub fn new(dataset: Arc<dyn SupervisedDataset>, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(Self { dataset, batch_size, shuffle, rng: rng::seeded(seed) })
    }

    pub fn dataset(&self) -> &Arc<dyn SupervisedDataset> {
        &self.dataset
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// Index groups for one pass over the data. Advances the shuffle generator.
    pub fn epoch_plan(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng);
        }
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.dataset.get(i)?;
            if let Some(first) = images.first().map(|t: &Tensor| t.dims().to_vec()) {
                if s.image.dims() != first.as_slice() {
                    return Err(Error::Shape(format!(
                        "cannot batch case `{}` of shape {:?} with shape {first:?}; use a patch dataset or batch size 1",
                        s.id,
                        s.image.dims()
                    )));
                }
            }
            ids.push(s.id);
            images.push(s.image);
            labels.push(s.label);
        }
        Ok(Batch { ids, images: Tensor::stack(&images, 0)?, labels: Tensor::stack(&labels, 0)? })
    }

    pub fn state(&self) -> LoaderState {
        LoaderState { order: rng::snapshot(&self.rng), dataset: self.dataset.rng_state() }
    }

    pub fn restore(&mut self, state: &LoaderState) -> Result<()> {
        self.rng = rng::restore(&state.order)?;
        if let Some(ds) = &state.dataset {
            self.dataset.restore_rng_state(ds)?;
        }
        Ok(())
    }
}

//! Dataset scanning and foreground-aware patch sampling.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SupervisedDataset};
use crate::error::{Error, Result};
use crate::rng::{self, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnnotation {
    pub case_id: String,
    pub shape: Vec<usize>,
    /// Tightest half-open `[min, max)` interval per axis containing every
    /// foreground (`label > 0`) voxel; `None` without foreground.
    pub fg_bbox: Option<Vec<[usize; 2]>>,
    pub class_counts: BTreeMap<i64, u64>,
    /// One entry per image channel.
    pub intensity: Vec<IntensityStats>,
}

impl CaseAnnotation {
    pub fn fg_extent(&self) -> Option<Vec<usize>> {
        self.fg_bbox.as_ref().map(|b| b.iter().map(|[lo, hi]| hi - lo).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InspectOptions {
    /// Every ROI axis is a multiple of this.
    pub divisor: usize,
    /// Upper bound per axis for the ROI of a dataset without foreground.
    pub fallback_cap: usize,
}

impl Default for InspectOptions {
    fn default() -> Self {
        Self { divisor: 16, fallback_cap: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionReport {
    pub annotations: Vec<CaseAnnotation>,
    /// Per-axis median of foreground extents over cases with foreground.
    pub stat_fg_shape: Option<Vec<f64>>,
    pub roi_shape: Vec<usize>,
    pub options: InspectOptions,
}

impl InspectionReport {
    /// Voxel totals per class over all cases.
    pub fn class_totals(&self) -> BTreeMap<i64, u64> {
        let mut totals = BTreeMap::new();
        for a in &self.annotations {
            for (c, n) in &a.class_counts {
                *totals.entry(*c).or_insert(0) += n;
            }
        }
        totals
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = flat % shape[a];
        flat /= shape[a];
    }
}

/// Bounding box of `label > 0` in a flat row-major label array.
pub fn foreground_bbox(labels: &[i64], shape: &[usize]) -> Option<Vec<[usize; 2]>> {
    let mut bbox: Option<Vec<[usize; 2]>> = None;
    let mut pos = vec![0; shape.len()];
    for (i, _) in labels.iter().enumerate().filter(|(_, &v)| v > 0) {
        unravel(i, shape, &mut pos);
        let b = bbox.get_or_insert_with(|| pos.iter().map(|&p| [p, p + 1]).collect());
        for (iv, &p) in b.iter_mut().zip(&pos) {
            iv[0] = iv[0].min(p);
            iv[1] = iv[1].max(p + 1);
        }
    }
    bbox
}

pub fn annotate(sample: &Sample) -> Result<CaseAnnotation> {
    let shape = sample.spatial_shape().to_vec();
    let labels = sample.label.flatten_all()?.to_vec1::<i64>()?;
    let mut class_counts = BTreeMap::new();
    for &v in &labels {
        *class_counts.entry(v).or_insert(0u64) += 1;
    }
    let channels = sample.image.dim(0)?;
    let mut intensity = Vec::with_capacity(channels);
    for c in 0..channels {
        let v = sample.image.get(c)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        intensity.push(IntensityStats { mean, std: var.sqrt(), min, max });
    }
    Ok(CaseAnnotation {
        case_id: sample.id.clone(),
        fg_bbox: foreground_bbox(&labels, &shape),
        shape,
        class_counts,
        intensity,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Derives `(stat_fg_shape, roi_shape)` from per-case annotations.
pub fn roi_from_annotations(annotations: &[CaseAnnotation], options: InspectOptions) -> Result<(Option<Vec<f64>>, Vec<usize>)> {
    let d = options.divisor;
    if d == 0 {
        return Err(Error::Argument("ROI divisor must be positive".into()));
    }
    let first = annotations.first().ok_or_else(|| Error::Argument("cannot inspect an empty dataset".into()))?;
    let rank = first.shape.len();
    if let Some(bad) = annotations.iter().find(|a| a.shape.len() != rank) {
        return Err(Error::Dataset(format!("case `{}` has spatial rank {}, expected {rank}", bad.case_id, bad.shape.len())));
    }
    let ceiling: Vec<usize> = (0..rank)
        .map(|a| {
            let min_len = annotations.iter().map(|c| c.shape[a]).min().unwrap();
            (min_len / d * d).max(d)
        })
        .collect();
    let extents: Vec<Vec<usize>> = annotations.iter().filter_map(CaseAnnotation::fg_extent).collect();
    if extents.is_empty() {
        let roi = ceiling.iter().map(|&c| c.min((options.fallback_cap / d * d).max(d))).collect();
        return Ok((None, roi));
    }
    let stat: Vec<f64> = (0..rank)
        .map(|a| median(&mut extents.iter().map(|e| e[a] as f64).collect::<Vec<_>>()))
        .collect();
    let roi = stat
        .iter()
        .zip(&ceiling)
        .map(|(&s, &c)| (((s / d as f64).ceil() as usize) * d).clamp(d, c))
        .collect();
    Ok((Some(stat), roi))
}

pub fn inspect(ds: &dyn SupervisedDataset) -> Result<InspectionReport> {
    inspect_with(ds, InspectOptions::default())
}

/// Scans every case once.
pub fn inspect_with(ds: &dyn SupervisedDataset, options: InspectOptions) -> Result<InspectionReport> {
    if ds.is_empty() {
        return Err(Error::Argument("cannot inspect an empty dataset".into()));
    }
    let annotations = (0..ds.len()).map(|i| annotate(&ds.get(i)?)).collect::<Result<Vec<_>>>()?;
    let (stat_fg_shape, roi_shape) = roi_from_annotations(&annotations, options)?;
    Ok(InspectionReport { annotations, stat_fg_shape, roi_shape, options })
}

/// Draws random patches of a fixed shape. Each fetch picks a case
/// uniformly; with probability `oversample_rate` the patch is centred on a
/// uniformly chosen foreground voxel (so it always contains foreground),
/// otherwise its position is uniform. Cases smaller than the patch are
/// zero-padded at the end of each axis.
pub struct RandomRoiDataset {
    source: Arc<dyn SupervisedDataset>,
    patch: Vec<usize>,
    oversample_rate: f64,
    len: usize,
    rng: Mutex<ChaCha8Rng>,
}

impl RandomRoiDataset {
    pub fn new(report: &InspectionReport, source: Arc<dyn SupervisedDataset>, oversample_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&oversample_rate) {
            return Err(Error::Argument(format!("oversample_rate must lie in [0, 1], got {oversample_rate}")));
        }
        if source.is_empty() {
            return Err(Error::Argument("cannot sample patches from an empty dataset".into()));
        }
        Ok(Self {
            len: source.len(),
            source,
            patch: report.roi_shape.clone(),
            oversample_rate,
            rng: Mutex::new(rng::seeded(seed)),
        })
    }

    pub fn with_patch_shape(mut self, patch: Vec<usize>) -> Result<Self> {
        if patch.iter().any(|&p| p == 0) {
            return Err(Error::Argument(format!("patch shape {patch:?} has an empty axis")));
        }
        self.patch = patch;
        Ok(self)
    }

    /// Number of patches per pass (defaults to the number of cases).
    pub fn with_len(mut self, len: usize) -> Self {
        self.len = len;
        self
    }

    /// Switches to an independent generator stream, for use in a separate worker.
    pub fn with_stream(self, stream: u64) -> Self {
        self.rng.lock().unwrap().set_stream(stream);
        self
    }

    pub fn patch_shape(&self) -> &[usize] {
        &self.patch
    }

    /// One patch plus the index of the case it came from.
    pub fn sample(&self) -> Result<(usize, Sample)> {
        let mut rng = self.rng.lock().unwrap();
        let case = rng.random_range(0..self.source.len());
        let s = self.source.get(case)?;
        if s.spatial_shape().len() != self.patch.len() {
            return Err(Error::Shape(format!(
                "patch shape {:?} does not match case `{}` of shape {:?}",
                self.patch,
                s.id,
                s.spatial_shape()
            )));
        }
        let (image, label) = pad_to(&s.image, &s.label, &self.patch)?;
        let shape = image.dims()[1..].to_vec();
        let forced = self.oversample_rate > 0.0 && rng.random::<f64>() < self.oversample_rate;
        let center = if forced { random_foreground_voxel(&label, &shape, &mut rng)? } else { None };
        let starts: Vec<usize> = (0..shape.len())
            .map(|a| {
                let room = shape[a] - self.patch[a];
                match &center {
                    Some(c) => c[a].saturating_sub(self.patch[a] / 2).min(room),
                    None => rng.random_range(0..=room),
                }
            })
            .collect();
        drop(rng);
        let (mut image, mut label) = (image, label);
        for (a, (&start, &len)) in starts.iter().zip(&self.patch).enumerate() {
            image = image.narrow(a + 1, start, len)?;
            label = label.narrow(a + 1, start, len)?;
        }
        let mut out = Sample::new(s.id, image.contiguous()?, label.contiguous()?)?;
        out.geometry = s.geometry;
        Ok((case, out))
    }
}

fn pad_to(image: &Tensor, label: &Tensor, patch: &[usize]) -> Result<(Tensor, Tensor)> {
    let (mut image, mut label) = (image.clone(), label.clone());
    for (a, &p) in patch.iter().enumerate() {
        let len = image.dim(a + 1)?;
        if len < p {
            image = image.pad_with_zeros(a + 1, 0, p - len)?;
            label = label.pad_with_zeros(a + 1, 0, p - len)?;
        }
    }
    Ok((image, label))
}

fn random_foreground_voxel(label: &Tensor, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Option<Vec<usize>>> {
    let values = label.flatten_all()?.to_vec1::<i64>()?;
    let count = values.iter().filter(|&&v| v > 0).count();
    if count == 0 {
        return Ok(None);
    }
    let pick = rng.random_range(0..count);
    let flat = values.iter().enumerate().filter(|(_, &v)| v > 0).nth(pick).map(|(i, _)| i).unwrap();
    let mut pos = vec![0; shape.len()];
    unravel(flat, shape, &mut pos);
    Ok(Some(pos))
}

impl SupervisedDataset for RandomRoiDataset {
    fn len(&self) -> usize {
        self.len
    }

    /// The index only bounds the pass length; content is drawn at random.
    fn get(&self, index: usize) -> Result<Sample> {
        crate::data::check_index(self.len, index)?;
        Ok(self.sample()?.1)
    }

    fn case_id(&self, _index: usize) -> Result<String> {
        Ok("random_patch".to_string())
    }

    fn rng_state(&self) -> Option<serde_json::Value> {
        serde_json::to_value(rng::snapshot(&self.rng.lock().unwrap())).ok()
    }

    fn restore_rng_state(&self, state: &serde_json::Value) -> Result<()> {
        let state: RngState = serde_json::from_value(state.clone())
            .map_err(|e| Error::Recovery(format!("patch sampler state: {e}")))?;
        *self.rng.lock().unwrap() = rng::restore(&state)?;
        Ok(())
    }
}

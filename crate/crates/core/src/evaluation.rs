//! Per-case metric evaluation with mean / std aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Serialize;

use crate::data::{decode_gray_labels, image_stem, is_image_file, load_label, SourceFormat};
use crate::error::{Error, IoContext, Result};
use crate::inference::{gray_step, parse_predictant, Predictant, SegmentationModel};
use crate::metrics::class_map_dice;

/// What a metric returns for one case.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Scalar(f64),
    /// One value per class; reported as `{name}_{k}` plus the macro mean
    /// under `{name}`.
    PerClass(Vec<f64>),
}

pub type MetricFn = Box<dyn Fn(&Tensor, &Tensor) -> Result<MetricValue> + Send + Sync>;

/// A named metric over `(prediction, label)` class maps.
pub struct Metric {
    pub name: String,
    pub func: MetricFn,
}

impl Metric {
    pub fn new(name: impl Into<String>, func: impl Fn(&Tensor, &Tensor) -> Result<MetricValue> + Send + Sync + 'static) -> Self {
        Self { name: name.into(), func: Box::new(func) }
    }

    /// Dice of the foreground (`label > 0`) region.
    pub fn binary_dice() -> Self {
        Self::new("dice", |p, l| Ok(MetricValue::Scalar(class_map_dice(&p.gt(0i64)?, &l.gt(0i64)?, 2)?[1])))
    }

    /// Dice per foreground class `1..num_classes`.
    pub fn class_dice(num_classes: usize) -> Self {
        Self::new("dice", move |p, l| {
            let all = class_map_dice(p, l, num_classes)?;
            Ok(MetricValue::PerClass(all[1..].to_vec()))
        })
    }

    /// Binary dice for `num_classes <= 2`, per-class dice otherwise.
    pub fn dice_for(num_classes: usize) -> Self {
        if num_classes <= 2 {
            Self::binary_dice()
        } else {
            Self::class_dice(num_classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub per_case: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean_metrics: BTreeMap<String, f64>,
    /// Population standard deviation.
    pub std_metrics: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_cases(&self) -> usize {
        self.per_case.len()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores every prediction against the label with the same id.
pub fn evaluate(metrics: &[Metric], predictions: &BTreeMap<String, Tensor>, labels: &BTreeMap<String, Tensor>) -> Result<EvalResult> {
    if metrics.is_empty() {
        return Err(Error::Evaluation("no metrics given".into()));
    }
    let pred_ids: BTreeSet<&String> = predictions.keys().collect();
    let label_ids: BTreeSet<&String> = labels.keys().collect();
    if pred_ids != label_ids {
        let only_pred: Vec<&str> = pred_ids.difference(&label_ids).map(|s| s.as_str()).collect();
        let only_label: Vec<&str> = label_ids.difference(&pred_ids).map(|s| s.as_str()).collect();
        return Err(Error::Evaluation(format!(
            "prediction and label ids differ; without label: {only_pred:?}, without prediction: {only_label:?}"
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }

    let mut per_case = BTreeMap::new();
    for (id, pred) in predictions {
        let label = &labels[id];
        if pred.dims() != label.dims() {
            return Err(Error::Evaluation(format!("case `{id}`: prediction {:?} vs label {:?}", pred.dims(), label.dims())));
        }
        let mut row = BTreeMap::new();
        for m in metrics {
            match (m.func)(pred, label)? {
                MetricValue::Scalar(v) => {
                    row.insert(m.name.clone(), v);
                }
                MetricValue::PerClass(vs) => {
                    for (k, v) in vs.iter().enumerate() {
                        row.insert(format!("{}_{}", m.name, k + 1), *v);
                    }
                    if !vs.is_empty() {
                        row.insert(m.name.clone(), vs.iter().sum::<f64>() / vs.len() as f64);
                    }
                }
            }
        }
        per_case.insert(id.clone(), row);
    }

    let keys: BTreeSet<String> = per_case.values().flat_map(|r| r.keys().cloned()).collect();
    let (mut mean_metrics, mut std_metrics) = (BTreeMap::new(), BTreeMap::new());
    for key in keys {
        let values: Vec<f64> = per_case.values().filter_map(|r| r.get(&key).copied()).collect();
        let (m, s) = mean_std(&values);
        mean_metrics.insert(key.clone(), m);
        std_metrics.insert(key, s);
    }
    Ok(EvalResult { per_case, mean_metrics, std_metrics })
}

/// Loads every supported label file of a folder keyed by stem. PNG gray
/// levels are mapped back to class indices.
pub fn load_label_folder(dir: &Path, num_classes: usize) -> Result<BTreeMap<String, Tensor>> {
    let mut files: Vec<_> = std::fs::read_dir(dir).at(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image_file(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Argument(format!("no supported label files in {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for f in files {
        let vol = load_label(&f, None, &Device::Cpu)?;
        let mut data = vol.data;
        if vol.source_format == SourceFormat::Raster && num_classes > 2 {
            data = decode_gray_labels(&data, gray_step(num_classes))?;
        }
        out.insert(image_stem(&f), data);
    }
    Ok(out)
}

/// Runs a model over the inputs and scores the predictions.
pub fn predict_and_evaluate(
    model: &mut dyn SegmentationModel,
    input: &Predictant,
    labels: &BTreeMap<String, Tensor>,
    metrics: &[Metric],
) -> Result<EvalResult> {
    let mut predictions = BTreeMap::new();
    for item in parse_predictant(input)? {
        let pred = model.predict(&item.image)?;
        predictions.insert(item.id, pred);
    }
    evaluate(metrics, &predictions, labels)
}

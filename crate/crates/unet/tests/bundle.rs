use std::sync::Arc;

use candle_core::{Device, Tensor};
use medseg::data::{fold, FoldSplit, SupervisedDataset, TensorDataset};
use medseg::evaluation::{predict_and_evaluate, Metric};
use medseg::inference::Predictant;
use medseg::nn::param_count;
use medseg::preset::{default_optimizer, default_scheduler, SegmentationConfig, DEFAULT_PADDING_DIVISOR};
use medseg::training::state::{BEST_CKPT, LATEST_CKPT, METRICS_CSV};
use medseg::training::{build_toolbox, LrScheduler, Optimizer, Trainer};
use medseg_unet::{unet_predictor, UNetPredictor, UNetTrainer};

/// Bright discs on a dark background, `n` cases of `size x size`, 3 channels.
fn discs(n: usize, size: usize) -> Arc<dyn SupervisedDataset> {
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for i in 0..n {
        let (cy, cx, r) = (size as f64 * 0.5 + (i % 3) as f64, size as f64 * 0.4 + (i % 4) as f64, size as f64 * 0.2);
        let lab: Vec<i64> = (0..size * size)
            .map(|p| (((p / size) as f64 - cy).powi(2) + ((p % size) as f64 - cx).powi(2) < r * r) as i64)
            .collect();
        let img: Vec<f32> = (0..3).flat_map(|c| lab.iter().map(move |&l| l as f32 * 0.8 + 0.05 * c as f32)).collect();
        images.push(Tensor::from_vec(img, (3, size, size), &Device::Cpu).unwrap());
        labels.push(Tensor::from_vec(lab, (1, size, size), &Device::Cpu).unwrap());
    }
    Arc::new(TensorDataset::from_pairs(images, labels).unwrap())
}

#[test]
fn short_script_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = fold(discs(10, 32), FoldSplit::new(5, 0, 0)).unwrap();
    let mut trainer = Trainer::new(UNetTrainer::new(3, 4), Arc::new(train), Arc::new(val.clone()), dir.path());
    trainer.config.num_classes = 1;
    let summary = trainer.train(2, None).unwrap();
    assert_eq!(summary.epochs_completed, 2);
    assert!(summary.folder.starts_with(dir.path().join("UNetTrainer")));
    for f in [METRICS_CSV, BEST_CKPT, LATEST_CKPT] {
        assert!(summary.folder.join(f).is_file(), "{f}");
    }

    // evaluation with a predictor over the same folder
    let mut predictor: UNetPredictor = unet_predictor(&summary.folder, &[3, 32, 32], SegmentationConfig::default());
    let mut predictor_small = UNetPredictor::new(UNetTrainer::new(3, 4), &summary.folder, &[3, 32, 32], SegmentationConfig::default());
    let val: Arc<dyn SupervisedDataset> = Arc::new(val);
    let labels = (0..val.len()).map(|i| (val.case_id(i).unwrap(), val.get(i).unwrap().label)).collect();
    let r = predict_and_evaluate(&mut predictor_small, &Predictant::Dataset(val.clone()), &labels, &[Metric::binary_dice()]).unwrap();
    assert_eq!(r.num_cases(), 2);
    assert!((0.0..=1.0).contains(&r.mean_metrics["dice"]));
    // the default architecture does not match the small checkpoint
    assert!(predict_and_evaluate(&mut predictor, &Predictant::Dataset(val), &labels, &[Metric::binary_dice()]).is_err());
}

#[test]
fn only_the_network_is_customized() {
    let config = SegmentationConfig::default();
    let hooks = UNetTrainer::new(3, 4);
    let tb = build_toolbox(&hooks, &config, &[3, 32, 32], 10).unwrap();
    let reference = default_optimizer(&tb.model.params(), &config).unwrap();
    assert_eq!(tb.optimizer.config(), reference.config());
    assert_eq!(tb.scheduler.config(), default_scheduler(&config, 10).config());
    assert_eq!(tb.criterion.name(), "DiceBCELoss");
    assert_eq!(tb.padding.unwrap().divisor, DEFAULT_PADDING_DIVISOR);
    assert!(tb.ema_model.is_none());
}

#[test]
fn deep_supervision_flag_changes_criterion_and_outputs_only() {
    let hooks = UNetTrainer::new(4, 4);
    let plain = SegmentationConfig { num_classes: 3, ..Default::default() };
    let deep = SegmentationConfig { deep_supervision: true, ..plain.clone() };
    let a = build_toolbox(&hooks, &plain, &[1, 32, 32], 10).unwrap();
    let b = build_toolbox(&hooks, &deep, &[1, 32, 32], 10).unwrap();

    assert_eq!((a.criterion.name(), b.criterion.name()), ("DiceCELoss", "DeepSupervisionWrapper"));
    assert_eq!((a.model.num_outputs(), b.model.num_outputs()), (1, 3));

    assert_eq!(a.optimizer.config(), b.optimizer.config());
    assert_eq!(a.scheduler.config(), b.scheduler.config());
    assert_eq!(a.padding, b.padding);
    // the extra outputs add only their 1x1 heads, reading 8 and 16 channels
    let extra = (8 * 3 + 3) + (16 * 3 + 3);
    assert_eq!(param_count(&b.model.params()) - param_count(&a.model.params()), extra);
    let mut da = a.model.describe();
    let mut db = b.model.describe();
    da.as_object_mut().unwrap().remove("deep_supervision");
    db.as_object_mut().unwrap().remove("deep_supervision");
    assert_eq!(da, db);
}

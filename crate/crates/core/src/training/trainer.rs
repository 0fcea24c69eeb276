//! The training lifecycle.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde_json::{json, Value};

use super::optim::{ema_update, LrScheduler, Optimizer};
use super::plot::{LineChart, Series, PALETTE};
use super::preview::save_previews;
use super::state::*;
use crate::data::{fast_load, fast_save, DataLoader, SupervisedDataset};
use crate::error::{Error, Result};
use crate::frontend::{dispatch, EventKind, Frontend, FrontendEvent, NullFrontend, Payload};
use crate::loss::{full_resolution, Criterion};
use crate::metrics::class_map_dice;
use crate::nn::{count_macs, init, load_state_dict, param_count, state_dict, Network, Param};
use crate::numerics::{QuotientModel, ScorePredictor};
use crate::preset::{self, backward_with_clip, PaddingModule, SegmentationConfig};

/// Construction hooks of a trainer. Only [`TrainerHooks::build_network`]
/// has no usable default; the others provide the segmentation preset.
pub trait TrainerHooks: Send {
    /// Name of the experiment sub-folder.
    fn trainer_name(&self) -> String {
        let full = std::any::type_name::<Self>();
        let base = full.split('<').next().unwrap_or(full);
        base.rsplit("::").next().unwrap_or(base).to_string()
    }

    /// Builds the network for inputs of `example_shape` (channels first, no
    /// batch axis).
    fn build_network(&self, example_shape: &[usize], config: &SegmentationConfig) -> Result<Box<dyn Network>> {
        let _ = (example_shape, config);
        Err(Error::MustOverride("build_network"))
    }

    fn build_padding_module(&self, config: &SegmentationConfig) -> Option<PaddingModule> {
        Some(PaddingModule::new(config.padding_divisor))
    }

    fn build_optimizer(&self, params: &[Param], config: &SegmentationConfig) -> Result<Box<dyn Optimizer>> {
        Ok(Box::new(preset::default_optimizer(params, config)?))
    }

    fn build_scheduler(&self, config: &SegmentationConfig, total_epochs: usize) -> Result<Box<dyn LrScheduler>> {
        Ok(Box::new(preset::default_scheduler(config, total_epochs)))
    }

    /// `num_outputs` is the number of tensors the network returns.
    fn build_criterion(&self, config: &SegmentationConfig, num_outputs: usize) -> Result<Box<dyn Criterion>> {
        preset::default_criterion(config.num_classes, config.deep_supervision, num_outputs)
    }
}

pub struct TrainerToolbox {
    pub model: Box<dyn Network>,
    pub optimizer: Box<dyn Optimizer>,
    pub scheduler: Box<dyn LrScheduler>,
    pub criterion: Box<dyn Criterion>,
    pub ema_model: Option<Box<dyn Network>>,
    pub padding: Option<PaddingModule>,
}

impl TrainerToolbox {
    /// The network used for validation and the best checkpoint.
    pub fn eval_model(&self) -> &dyn Network {
        self.ema_model.as_deref().unwrap_or(self.model.as_ref())
    }
}

/// Calls the builder hooks in order. With EMA enabled, a second network is
/// built and initialized with the first one's weights.
pub fn build_toolbox<H: TrainerHooks + ?Sized>(
    hooks: &H,
    config: &SegmentationConfig,
    example_shape: &[usize],
    total_epochs: usize,
) -> Result<TrainerToolbox> {
    config.validate()?;
    if example_shape.len() != config.num_dims + 1 {
        return Err(Error::Config(format!(
            "num_dims is {} but the example input shape {example_shape:?} has {} spatial axes",
            config.num_dims,
            example_shape.len().saturating_sub(1)
        )));
    }
    let model = hooks.build_network(example_shape, config)?;
    let padding = hooks.build_padding_module(config);
    let params = model.params();
    let optimizer = hooks.build_optimizer(&params, config)?;
    let scheduler = hooks.build_scheduler(config, total_epochs.max(1))?;
    let criterion = hooks.build_criterion(config, model.num_outputs())?;
    let ema_model = if config.ema {
        let ema = hooks.build_network(example_shape, config)?;
        load_state_dict(&ema.params(), &state_dict(&params)?, "")?;
        Some(ema)
    } else {
        None
    };
    Ok(TrainerToolbox { model, optimizer, scheduler, criterion, ema_model, padding })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityReport {
    pub output_shape_ok: bool,
    pub output_shape: Vec<usize>,
    pub label_shape: Vec<usize>,
    pub param_count: usize,
    pub mac_estimate: u64,
}

/// One forward pass in evaluation mode on `images`; the first output must
/// match the spatial size of `labels` and carry one channel per class.
pub fn sanity_check(toolbox: &TrainerToolbox, config: &SegmentationConfig, images: &Tensor, labels: &Tensor) -> Result<SanityReport> {
    let (x, y) = match &toolbox.padding {
        Some(p) => {
            let (x, pad) = p.pad(images)?;
            (x, pad.apply(labels)?)
        }
        None => (images.clone(), labels.clone()),
    };
    let (outputs, macs) = count_macs(|| toolbox.model.forward_t(&x, false));
    let outputs = outputs?;
    let first = outputs.first().ok_or_else(|| Error::Shape("network returned no outputs".into()))?.detach();
    let mut expected = y.dims().to_vec();
    expected[1] = config.output_channels();
    let report = SanityReport {
        output_shape_ok: first.dims() == expected.as_slice(),
        output_shape: first.dims().to_vec(),
        label_shape: y.dims().to_vec(),
        param_count: param_count(&toolbox.model.params()),
        mac_estimate: macs,
    };
    if !report.output_shape_ok {
        return Err(Error::Shape(format!(
            "sanity check failed: expected network output {expected:?}, got {:?}",
            report.output_shape
        )));
    }
    Ok(report)
}

/// Integer class map `(B, 1, ...)` from logits `(B, C, ...)`: logistic
/// threshold 0.5 for one channel, argmax otherwise.
pub fn logits_to_classes(logits: &Tensor) -> Result<Tensor> {
    if logits.dim(1)? == 1 {
        Ok(logits.ge(0.0)?.to_dtype(DType::I64)?)
    } else {
        Ok(logits.argmax_keepdim(1)?.to_dtype(DType::I64)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub index: usize,
    pub id: String,
    pub loss: f64,
    pub score: f64,
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub folder: PathBuf,
    pub epochs_completed: usize,
    pub best_score: f64,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub interrupted: bool,
}

struct Progress {
    epoch: usize,
    best_score: Option<f64>,
    best_epoch: Option<usize>,
    epochs_without_improvement: usize,
    history: Vec<EpochRecord>,
}

struct Worst {
    score: f64,
    image: Tensor,
    label: Tensor,
    prediction: Tensor,
}

/// Drives training of the network produced by `H`.
pub struct Trainer<H: TrainerHooks> {
    hooks: H,
    pub config: SegmentationConfig,
    pub args: TrainArgs,
    train_ds: Arc<dyn SupervisedDataset>,
    val_ds: Arc<dyn SupervisedDataset>,
    output_dir: PathBuf,
    folder: Option<PathBuf>,
    loader: Option<DataLoader>,
    toolbox: Option<TrainerToolbox>,
    example_shape: Vec<usize>,
    frontend: Box<dyn Frontend>,
    stop: Arc<AtomicBool>,
    progress: Progress,
    sanity: Option<SanityReport>,
}

fn seconds(s: f64) -> String {
    let s = s.max(0.0).round() as u64;
    format!("{}h{:02}m{:02}s", s / 3600, s / 60 % 60, s % 60)
}

/// Renders rows under a header as an aligned plain-text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let fmt = |cells: Vec<&str>| cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join(" | ");
    let mut out = vec![fmt(header.to_vec())];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.extend(rows.iter().map(|r| fmt(r.iter().map(String::as_str).collect())));
    out.join("\n")
}

impl<H: TrainerHooks> Trainer<H> {
    pub fn new(
        hooks: H,
        train: Arc<dyn SupervisedDataset>,
        val: Arc<dyn SupervisedDataset>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            hooks,
            config: SegmentationConfig::default(),
            args: TrainArgs::default(),
            train_ds: train,
            val_ds: val,
            output_dir: output_dir.into(),
            folder: None,
            loader: None,
            toolbox: None,
            example_shape: Vec::new(),
            frontend: Box::new(NullFrontend),
            stop: Arc::new(AtomicBool::new(false)),
            progress: Progress { epoch: 0, best_score: None, best_epoch: None, epochs_without_improvement: 0, history: Vec::new() },
            sanity: None,
        }
    }

    pub fn hooks(&self) -> &H {
        &self.hooks
    }

    pub fn set_frontend(&mut self, frontend: Box<dyn Frontend>) {
        self.frontend = frontend;
    }

    pub fn with_frontend(mut self, frontend: Box<dyn Frontend>) -> Self {
        self.frontend = frontend;
        self
    }

    /// Setting the flag ends training after the current epoch's state is saved.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn folder(&self) -> Option<&Path> {
        self.folder.as_deref()
    }

    pub fn toolbox(&self) -> Option<&TrainerToolbox> {
        self.toolbox.as_ref()
    }

    pub fn sanity_report(&self) -> Option<&SanityReport> {
        self.sanity.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn best_score(&self) -> f64 {
        self.progress.best_score.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.progress.best_epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.progress.history
    }

    fn log_line(&self, text: &str) {
        log::info!("{text}");
        if let Some(folder) = &self.folder {
            let path = folder.join(LOG_FILE);
            let written = OpenOptions::new().create(true).append(true).open(&path).and_then(|mut f| writeln!(f, "{text}"));
            if let Err(e) = written {
                log::warn!("cannot write {}: {e}", path.display());
            }
        }
    }

    fn emit(&mut self, kind: EventKind, payload: Payload) {
        dispatch(self.frontend.as_mut(), &FrontendEvent::new(kind, payload));
    }

    /// Builds the toolbox, creates the experiment folder and runs the sanity
    /// check. Called by [`Trainer::train`] when needed.
    pub fn build(&mut self) -> Result<&SanityReport> {
        if self.train_ds.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        if self.val_ds.is_empty() {
            return Err(Error::Dataset("validation dataset is empty".into()));
        }
        init::manual_seed(self.args.seed);
        let loader = DataLoader::new(self.train_ds.clone(), self.args.batch_size, true, self.args.seed)?;
        let first = self.train_ds.get(0)?;
        self.example_shape = first.image.dims().to_vec();
        let toolbox = build_toolbox(&self.hooks, &self.config, &self.example_shape, self.args.epochs)?;
        let n = self.args.batch_size.min(self.train_ds.len());
        let batch = loader.batch(&(0..n).collect::<Vec<_>>())?;
        let report = sanity_check(&toolbox, &self.config, &batch.images, &batch.labels)?;
        let folder = create_experiment_folder(&self.output_dir, &self.hooks.trainer_name())?;
        self.folder = Some(folder);
        self.loader = Some(loader);
        self.toolbox = Some(toolbox);
        self.log_line(&format!(
            "sanity check: output {:?} for labels {:?}, {} parameters, {} MACs",
            report.output_shape, report.label_shape, report.param_count, report.mac_estimate
        ));
        self.sanity = Some(report);
        Ok(self.sanity.as_ref().expect("just set"))
    }

    /// Trains up to `epochs` epochs in total.
    pub fn train(&mut self, epochs: usize, early_stop_tolerance: Option<usize>) -> Result<TrainSummary> {
        self.args.epochs = epochs;
        self.args.early_stop_tolerance = early_stop_tolerance;
        if self.toolbox.is_none() {
            self.build()?;
        }
        self.run()
    }

    /// Resumes a run from its experiment folder.
    pub fn recover_from(
        folder: impl AsRef<Path>,
        hooks: H,
        train: Arc<dyn SupervisedDataset>,
        val: Arc<dyn SupervisedDataset>,
    ) -> Result<Self> {
        let folder = folder.as_ref();
        let missing: Vec<&str> = [STATE_ORB, LATEST_CKPT].into_iter().filter(|f| !folder.join(f).is_file()).collect();
        if !missing.is_empty() {
            return Err(Error::Recovery(format!("{} is missing {}", folder.display(), missing.join(", "))));
        }
        let orb = StateOrb::load(&folder.join(STATE_ORB)).map_err(|e| Error::Recovery(format!("unreadable {STATE_ORB}: {e}")))?;
        let name = hooks.trainer_name();
        if orb.trainer != name {
            return Err(Error::Recovery(format!("folder belongs to trainer `{}`, not `{name}`", orb.trainer)));
        }
        let tensors = fast_load(folder.join(LATEST_CKPT), &Device::Cpu)
            .map_err(|e| Error::Recovery(format!("unreadable {LATEST_CKPT}: {e}")))?;
        let output_dir = folder.parent().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
        let mut t = Self::new(hooks, train, val, output_dir);
        t.config = orb.config.clone();
        t.args = orb.train_args.clone();
        t.example_shape = orb.example_shape.clone();
        init::manual_seed(t.args.seed);
        let mut toolbox = build_toolbox(&t.hooks, &t.config, &t.example_shape, t.args.epochs)?;
        let section = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone()))).collect()
        };
        let recovery = |what: &str, e: Error| Error::Recovery(format!("{what} state: {e}"));
        load_state_dict(&toolbox.model.params(), &tensors, "model.").map_err(|e| recovery("model", e))?;
        if let Some(ema) = &toolbox.ema_model {
            load_state_dict(&ema.params(), &tensors, "ema.").map_err(|e| recovery("EMA", e))?;
        }
        toolbox.optimizer.load_state_tensors(&section("optimizer.")).map_err(|e| recovery("optimizer", e))?;
        if toolbox.criterion.name() != orb.criterion {
            return Err(Error::Recovery(format!("criterion `{}` does not match saved `{}`", toolbox.criterion.name(), orb.criterion)));
        }
        let mut loader = DataLoader::new(t.train_ds.clone(), t.args.batch_size, true, t.args.seed)?;
        loader.restore(&orb.rng_state).map_err(|e| recovery("data loader", e))?;
        if let Some(v) = &orb.val_rng_state {
            t.val_ds.restore_rng_state(v).map_err(|e| recovery("validation data", e))?;
        }
        t.loader = Some(loader);
        t.toolbox = Some(toolbox);
        t.folder = Some(folder.to_path_buf());
        t.progress = Progress {
            epoch: orb.epoch,
            best_score: orb.best_score,
            best_epoch: orb.best_epoch,
            epochs_without_improvement: orb.epochs_without_improvement,
            history: orb.history,
        };
        t.log_line(&format!("recovered at epoch {} from {}", t.progress.epoch, folder.display()));
        Ok(t)
    }

    /// Continues a recovered run, optionally to a new total epoch count.
    /// A new total also re-parameterizes the learning-rate schedule.
    pub fn continue_training(&mut self, epochs: Option<usize>) -> Result<TrainSummary> {
        if self.toolbox.is_none() {
            return Err(Error::Recovery("nothing to continue; call recover_from first".into()));
        }
        if let Some(e) = epochs {
            self.args.epochs = e;
        }
        self.run()
    }

    fn run(&mut self) -> Result<TrainSummary> {
        let total = self.args.epochs;
        self.toolbox.as_mut().expect("toolbox built").scheduler.set_total_epochs(total.max(1));
        self.stop.store(false, Ordering::SeqCst);
        let folder = self.folder.clone().expect("folder created");
        let mut meta = Payload::new();
        meta.insert("trainer".into(), json!(self.hooks.trainer_name()));
        meta.insert("folder".into(), json!(folder.display().to_string()));
        meta.insert("start_epoch".into(), json!(self.progress.epoch + 1));
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("train_args".into(), serde_json::to_value(&self.args)?);
        self.emit(EventKind::RunStart, meta);

        let (mut stopped_early, mut interrupted) = (false, false);
        while self.progress.epoch < total {
            let epoch = self.progress.epoch + 1;
            if let Err(e) = self.run_epoch(epoch) {
                self.log_line(&format!("training aborted: {e}"));
                self.emit(EventKind::RunEnd, Payload::from([("status".into(), json!("FAILED")), ("error".into(), json!(e.to_string()))]));
                return Err(e);
            }
            if let Some(tol) = self.args.early_stop_tolerance {
                if self.progress.epochs_without_improvement >= tol {
                    self.log_line(&format!("early stop: no improvement for {tol} epochs"));
                    stopped_early = true;
                    break;
                }
            }
            if self.stop.load(Ordering::SeqCst) && self.progress.epoch < total {
                self.log_line(&format!("stopped after epoch {epoch}"));
                interrupted = true;
                break;
            }
        }

        let summary = TrainSummary {
            folder,
            epochs_completed: self.progress.epoch,
            best_score: self.best_score(),
            best_epoch: self.progress.best_epoch,
            stopped_early,
            interrupted,
        };
        let mut end = Payload::new();
        end.insert("status".into(), json!(if interrupted { "KILLED" } else { "FINISHED" }));
        end.insert("epochs_completed".into(), json!(summary.epochs_completed));
        end.insert("best_epoch".into(), json!(summary.best_epoch));
        if summary.best_score.is_finite() {
            end.insert("best_score".into(), json!(summary.best_score));
        }
        end.insert("stopped_early".into(), json!(stopped_early));
        self.emit(EventKind::RunEnd, end);
        Ok(summary)
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let start = Instant::now();
        let toolbox = self.toolbox.as_mut().expect("toolbox built");
        let loader = self.loader.as_mut().expect("loader built");
        let lr = toolbox.scheduler.lr_at(epoch)?;
        toolbox.optimizer.set_lr(lr);

        let params = toolbox.model.params();
        let trainable: Vec<Param> = params.iter().filter(|p| p.trainable).cloned().collect();
        let ema_params = toolbox.ema_model.as_ref().map(|m| m.params());
        let mut train_loss = 0.0;
        let plan = loader.epoch_plan();
        for (bi, indices) in plan.iter().enumerate() {
            let batch = loader.batch(indices)?;
            let (x, y) = match &toolbox.padding {
                Some(p) => {
                    let (x, pad) = p.pad(&batch.images)?;
                    (x, pad.apply(&batch.labels)?)
                }
                None => (batch.images, batch.labels),
            };
            let outputs = toolbox.model.forward_t(&x, true)?;
            let loss = toolbox.criterion.compute_outputs(&outputs, &y)?;
            let value = loss.value()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value });
            }
            let (grads, _) = backward_with_clip(&loss.total, &trainable, self.config.clip_norm)?;
            toolbox.optimizer.step(&grads)?;
            if let Some(ema) = &ema_params {
                ema_update(ema, &params, self.config.ema_decay)?;
            }
            train_loss += value;
        }
        train_loss /= plan.len().max(1) as f64;

        let (cases, worst) = self.validate(epoch)?;
        let n = cases.len() as f64;
        let val_loss = cases.iter().map(|c| c.loss).sum::<f64>() / n;
        let val_score = cases.iter().map(|c| c.score).sum::<f64>() / n;
        let classes = foreground_classes(self.config.num_classes);
        let dice: Vec<f64> = (0..classes.len()).map(|k| cases.iter().map(|c| c.dice[k]).sum::<f64>() / n).collect();
        let epoch_seconds = start.elapsed().as_secs_f64();

        let improved = val_score > self.best_score();
        if improved {
            self.progress.best_score = Some(val_score);
            self.progress.best_epoch = Some(epoch);
            self.progress.epochs_without_improvement = 0;
        } else {
            self.progress.epochs_without_improvement += 1;
        }
        let record = EpochRecord { epoch, train_loss, val_loss, val_score, lr, epoch_seconds, dice };
        self.progress.history.push(record.clone());
        self.progress.epoch = epoch;

        let folder = self.folder.clone().expect("folder created");
        if improved {
            let toolbox = self.toolbox.as_ref().expect("toolbox built");
            fast_save(&state_dict(&toolbox.eval_model().params())?, folder.join(BEST_CKPT))?;
        }
        self.save_state(&folder)?;
        write_metrics_csv(&folder.join(METRICS_CSV), &self.progress.history, self.config.num_classes)?;

        let prediction = ScorePredictor { warmup_epochs: self.args.warmup_epochs, plateau_fraction: self.args.plateau_fraction }.estimate(
            &self.progress.history.iter().map(|r| r.val_score).collect::<Vec<_>>(),
            &self.progress.history.iter().map(|r| r.epoch_seconds).collect::<Vec<_>>(),
        );
        if let Err(e) = self.save_plots(&folder, prediction.as_ref().map(|(m, _)| m)) {
            log::warn!("cannot render plots: {e}");
        }
        if self.args.save_previews {
            if let Some(w) = worst {
                let dir = folder.join(PREVIEWS_DIR).join(format!("epoch_{epoch}"));
                if let Err(e) = save_previews(&dir, &w.image, &w.label, &w.prediction) {
                    log::warn!("cannot save previews: {e}");
                }
            }
        }

        self.report_epoch(&record, &cases, improved, prediction.as_ref().map(|(_, p)| p));
        let mut payload = Payload::new();
        payload.insert("epoch".into(), json!(epoch));
        for (k, v) in [
            ("train_loss", train_loss),
            ("val_loss", val_loss),
            ("val_score", val_score),
            ("lr", lr),
            ("epoch_seconds", epoch_seconds),
        ] {
            payload.insert(k.into(), json!(v));
        }
        for (k, d) in classes.iter().zip(&record.dice) {
            payload.insert(format!("dice_{k}"), json!(d));
        }
        if let Some((_, p)) = &prediction {
            payload.insert("predicted_max_score".into(), json!(p.max_score));
            payload.insert("predicted_target_epoch".into(), json!(p.target_epoch));
            payload.insert("etc_seconds".into(), json!(p.etc_seconds));
        }
        self.emit(EventKind::EpochEnd, payload);
        Ok(())
    }

    fn validate(&mut self, epoch: usize) -> Result<(Vec<CaseResult>, Option<Worst>)> {
        let toolbox = self.toolbox.as_ref().expect("toolbox built");
        let net = toolbox.eval_model();
        let criterion = full_resolution(toolbox.criterion.as_ref());
        let classes = foreground_classes(self.config.num_classes);
        let num_classes = self.config.num_classes.max(2);
        let mut cases = Vec::with_capacity(self.val_ds.len());
        let mut worst: Option<Worst> = None;
        for i in 0..self.val_ds.len() {
            let sample = self.val_ds.get(i)?;
            let x = sample.image.unsqueeze(0)?;
            let y = sample.label.unsqueeze(0)?;
            let logits = match &toolbox.padding {
                Some(p) => {
                    let (xp, pad) = p.pad(&x)?;
                    pad.crop(&net.forward_t(&xp, false)?[0])?
                }
                None => net.forward_t(&x, false)?.swap_remove(0),
            }
            .detach();
            let loss = criterion.compute(&logits, &y)?.value()?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: i, value: loss });
            }
            let pred = logits_to_classes(&logits)?;
            let all = class_map_dice(&pred, &y, num_classes)?;
            let case = CaseResult { index: i, id: sample.id.clone(), loss, score: -loss, dice: classes.iter().map(|&k| all[k]).collect() };
            if worst.as_ref().map_or(true, |w| case.score < w.score) {
                worst = Some(Worst { score: case.score, image: sample.image, label: sample.label, prediction: pred.squeeze(0)? });
            }
            cases.push(case);
        }
        Ok((cases, worst))
    }

    fn save_state(&self, folder: &Path) -> Result<()> {
        let toolbox = self.toolbox.as_ref().expect("toolbox built");
        let loader = self.loader.as_ref().expect("loader built");
        let mut tensors = BTreeMap::new();
        for (k, v) in state_dict(&toolbox.model.params())? {
            tensors.insert(format!("model.{k}"), v);
        }
        if let Some(ema) = &toolbox.ema_model {
            for (k, v) in state_dict(&ema.params())? {
                tensors.insert(format!("ema.{k}"), v);
            }
        }
        for (k, v) in toolbox.optimizer.state_tensors()? {
            tensors.insert(format!("optimizer.{k}"), v);
        }
        let tmp = folder.join(format!("{LATEST_CKPT}.tmp"));
        fast_save(&tensors, &tmp)?;
        std::fs::rename(&tmp, folder.join(LATEST_CKPT)).map_err(|e| Error::io(folder.join(LATEST_CKPT), e))?;
        let orb = StateOrb {
            trainer: self.hooks.trainer_name(),
            epoch: self.progress.epoch,
            best_score: self.progress.best_score,
            best_epoch: self.progress.best_epoch,
            epochs_without_improvement: self.progress.epochs_without_improvement,
            config: self.config.clone(),
            train_args: self.args.clone(),
            example_shape: self.example_shape.clone(),
            rng_state: loader.state(),
            val_rng_state: self.val_ds.rng_state(),
            epoch_durations: self.progress.history.iter().map(|r| r.epoch_seconds).collect(),
            history: self.progress.history.clone(),
            optimizer: toolbox.optimizer.config(),
            scheduler: toolbox.scheduler.config(),
            criterion: toolbox.criterion.name().to_string(),
        };
        orb.save(&folder.join(STATE_ORB))
    }

    fn save_plots(&self, folder: &Path, model: Option<&QuotientModel>) -> Result<()> {
        let h = &self.progress.history;
        let col = |f: fn(&EpochRecord) -> f64| h.iter().map(f).collect::<Vec<f64>>();
        let dir = folder.join(PLOTS_DIR);
        LineChart::new("Loss", "epoch", "loss")
            .with(Series::per_epoch("train", &col(|r| r.train_loss), PALETTE[0]))
            .with(Series::per_epoch("val", &col(|r| r.val_loss), PALETTE[1]))
            .save(&dir.join("loss.png"))?;
        let scores = col(|r| r.val_score);
        let mut best = Vec::with_capacity(scores.len());
        for s in &scores {
            best.push(best.last().map_or(*s, |b: &f64| b.max(*s)));
        }
        LineChart::new("Validation score", "epoch", "score")
            .with(Series::per_epoch("score", &scores, PALETTE[2]))
            .with(Series::per_epoch("best", &best, PALETTE[3]))
            .save(&dir.join("score.png"))?;
        let mut dice_chart = LineChart::new("Validation dice", "epoch", "dice");
        for (i, k) in foreground_classes(self.config.num_classes).iter().enumerate() {
            let ys: Vec<f64> = h.iter().map(|r| r.dice[i]).collect();
            dice_chart = dice_chart.with(Series::per_epoch(format!("class {k}"), &ys, PALETTE[i % PALETTE.len()]));
        }
        dice_chart.save(&dir.join("dice.png"))?;
        LineChart::new("Learning rate", "epoch", "lr").with(Series::per_epoch("lr", &col(|r| r.lr), PALETTE[4])).save(&dir.join("lr.png"))?;
        LineChart::new("Epoch time", "epoch", "seconds")
            .with(Series::per_epoch("time", &col(|r| r.epoch_seconds), PALETTE[5]))
            .save(&dir.join("epoch_time.png"))?;
        let mut forecast = LineChart::new("Score forecast", "epoch", "score").with(Series::per_epoch("score", &scores, PALETTE[2]));
        if let Some(m) = model {
            let end = (h.len() as f64 * 1.5).max(h.len() as f64 + 1.0);
            let pts = (0..=100).map(|i| 1.0 + (end - 1.0) * i as f64 / 100.0).map(|x| (x, m.eval(x))).collect();
            forecast = forecast.with(Series::new("fit", pts, PALETTE[6]));
        }
        forecast.save(&dir.join("score_forecast.png"))?;
        Ok(())
    }

    fn report_epoch(&self, r: &EpochRecord, cases: &[CaseResult], improved: bool, prediction: Option<&crate::numerics::ScorePrediction>) {
        let classes = foreground_classes(self.config.num_classes);
        let mut header = vec!["case", "loss", "score"];
        let dice_names: Vec<String> = classes.iter().map(|k| format!("dice_{k}")).collect();
        header.extend(dice_names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = cases
            .iter()
            .map(|c| {
                let mut row = vec![c.id.clone(), format!("{:.4}", c.loss), format!("{:.4}", c.score)];
                row.extend(c.dice.iter().map(|d| format!("{d:.4}")));
                row
            })
            .collect();
        let summary = text_table(
            &["epoch", "train_loss", "val_loss", "val_score", "mean_dice", "lr", "time"],
            &[vec![
                format!("{}/{}", r.epoch, self.args.epochs),
                format!("{:.4}", r.train_loss),
                format!("{:.4}", r.val_loss),
                format!("{:.4}", r.val_score),
                format!("{:.4}", r.mean_dice()),
                format!("{:.3e}", r.lr),
                seconds(r.epoch_seconds),
            ]],
        );
        self.log_line(&format!("{}\n{}", text_table(&header, &rows), summary));
        if improved {
            self.log_line(&format!("new best score {:.6} at epoch {}", r.val_score, r.epoch));
        }
        if let Some(p) = prediction {
            self.log_line(&format!(
                "forecast: max score {:.4} reached around epoch {:.1}, ETC {}",
                p.max_score,
                p.target_epoch,
                seconds(p.etc_seconds)
            ));
        }
    }
}

/// Parameter values for comparisons in tests and tools.
pub fn flat_params(net: &dyn Network) -> Result<Vec<(String, Vec<f32>)>> {
    net.params()
        .iter()
        .map(|p| Ok((p.name.clone(), p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)))
        .collect()
}

/// Summary of a run as JSON, for the CLI.
pub fn summary_json(s: &TrainSummary) -> Value {
    json!({
        "folder": s.folder.display().to_string(),
        "epochs_completed": s.epochs_completed,
        "best_score": if s.best_score.is_finite() { json!(s.best_score) } else { Value::Null },
        "best_epoch": s.best_epoch,
        "stopped_early": s.stopped_early,
        "interrupted": s.interrupted,
    })
}

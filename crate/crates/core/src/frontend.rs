//! Experiment-tracking notifications.
//!
//! The trainer reports three kinds of events: run start, end of every epoch
//! and run end. Delivery failures (errors and panics) are logged and never
//! reach the training loop.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, IoContext, Result};

pub type Payload = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStart,
    EpochEnd,
    RunEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendEvent {
    pub kind: EventKind,
    pub timestamp: DateTime<Utc>,
    pub payload: Payload,
}

impl FrontendEvent {
    pub fn new(kind: EventKind, payload: Payload) -> Self {
        Self { kind, timestamp: Utc::now(), payload }
    }
}

pub trait Frontend: Send {
    fn name(&self) -> &str;

    fn on_run_start(&mut self, meta: &Payload) -> Result<()>;

    /// `metrics` always contains `epoch` and `val_score`.
    fn on_epoch_end(&mut self, metrics: &Payload) -> Result<()>;

    fn on_run_end(&mut self, summary: &Payload) -> Result<()>;

    fn handle(&mut self, event: &FrontendEvent) -> Result<()> {
        match event.kind {
            EventKind::RunStart => self.on_run_start(&event.payload),
            EventKind::EpochEnd => self.on_epoch_end(&event.payload),
            EventKind::RunEnd => self.on_run_end(&event.payload),
        }
    }
}

/// Delivers `event`, converting errors and panics into a warning. Returns
/// whether delivery succeeded.
pub fn dispatch(frontend: &mut dyn Frontend, event: &FrontendEvent) -> bool {
    let name = frontend.name().to_string();
    match catch_unwind(AssertUnwindSafe(|| frontend.handle(event))) {
        Ok(Ok(())) => true,
        Ok(Err(e)) => {
            log::warn!("frontend `{name}` failed on {:?}: {e}", event.kind);
            false
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            log::warn!("frontend `{name}` panicked on {:?}: {msg}", event.kind);
            false
        }
    }
}

/// Ignores every event.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullFrontend;

impl Frontend for NullFrontend {
    fn name(&self) -> &str {
        "null"
    }
    fn on_run_start(&mut self, _: &Payload) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _: &Payload) -> Result<()> {
        Ok(())
    }
    fn on_run_end(&mut self, _: &Payload) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per event to a file.
#[derive(Debug, Clone)]
pub struct FileFrontend {
    path: PathBuf,
}

pub fn file_frontend(path: impl Into<PathBuf>) -> FileFrontend {
    FileFrontend { path: path.into() }
}

impl FileFrontend {
    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, kind: EventKind, payload: &Payload) -> Result<()> {
        let line = serde_json::to_string(&FrontendEvent::new(kind, payload.clone()))?;
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).at(&self.path)?;
        writeln!(f, "{line}").at(&self.path)
    }
}

impl Frontend for FileFrontend {
    fn name(&self) -> &str {
        "file"
    }
    fn on_run_start(&mut self, meta: &Payload) -> Result<()> {
        self.append(EventKind::RunStart, meta)
    }
    fn on_epoch_end(&mut self, metrics: &Payload) -> Result<()> {
        self.append(EventKind::EpochEnd, metrics)
    }
    fn on_run_end(&mut self, summary: &Payload) -> Result<()> {
        self.append(EventKind::RunEnd, summary)
    }
}

/// Reads back an event log written by [`FileFrontend`].
pub fn read_events(path: &Path) -> Result<Vec<FrontendEvent>> {
    let f = std::fs::File::open(path).at(path)?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(events)
}

/// Request paths of the tracking server, relative to the base URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingEndpoints {
    pub create_run: String,
    pub log_batch: String,
    pub update_run: String,
}

impl Default for TrackingEndpoints {
    fn default() -> Self {
        Self {
            create_run: "/api/2.0/mlflow/runs/create".into(),
            log_batch: "/api/2.0/mlflow/runs/log-batch".into(),
            update_run: "/api/2.0/mlflow/runs/update".into(),
        }
    }
}

/// Client for an MLflow-compatible tracking server: one create-run request
/// at start, one log-batch request per epoch, one update request marking the
/// run finished. Failed requests are retried once.
pub struct HttpFrontend {
    base_url: String,
    experiment_name: String,
    experiment_id: String,
    endpoints: TrackingEndpoints,
    agent: ureq::Agent,
    run_id: Option<String>,
}

pub fn http_frontend(base_url: &str, experiment_name: &str) -> HttpFrontend {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(10))).build().into();
    HttpFrontend {
        base_url: base_url.trim_end_matches('/').to_string(),
        experiment_name: experiment_name.to_string(),
        experiment_id: "0".into(),
        endpoints: TrackingEndpoints::default(),
        agent,
        run_id: None,
    }
}

fn millis() -> i64 {
    Utc::now().timestamp_millis()
}

fn value_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl HttpFrontend {
    pub fn with_experiment_id(mut self, id: impl Into<String>) -> Self {
        self.experiment_id = id.into();
        self
    }

    pub fn with_endpoints(mut self, endpoints: TrackingEndpoints) -> Self {
        self.endpoints = endpoints;
        self
    }

    pub fn run_id(&self) -> Option<&str> {
        self.run_id.as_deref()
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{}", self.base_url, path);
        let attempt = || -> std::result::Result<Value, ureq::Error> {
            let mut resp = self.agent.post(&url).send_json(body)?;
            let text = resp.body_mut().read_to_string()?;
            Ok(serde_json::from_str(&text).unwrap_or(Value::Null))
        };
        attempt().or_else(|first| {
            log::debug!("POST {url} failed ({first}), retrying");
            attempt()
        })
        .map_err(|e| Error::Frontend(format!("POST {url}: {e}")))
    }

    fn active_run(&self) -> Result<&str> {
        self.run_id.as_deref().ok_or_else(|| Error::Frontend("no active run".into()))
    }
}

impl Frontend for HttpFrontend {
    fn name(&self) -> &str {
        "http"
    }

    fn on_run_start(&mut self, meta: &Payload) -> Result<()> {
        let mut tags = vec![json!({"key": "experiment_name", "value": self.experiment_name})];
        tags.extend(meta.iter().map(|(k, v)| json!({"key": k, "value": value_string(v)})));
        let body = json!({
            "experiment_id": self.experiment_id,
            "run_name": meta.get("run_name").map(value_string).unwrap_or_else(|| self.experiment_name.clone()),
            "start_time": millis(),
            "tags": tags,
        });
        let resp = self.post(&self.endpoints.create_run, &body)?;
        let id = resp
            .pointer("/run/info/run_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Frontend(format!("create-run response has no run id: {resp}")))?;
        self.run_id = Some(id.to_string());
        Ok(())
    }

    fn on_epoch_end(&mut self, metrics: &Payload) -> Result<()> {
        let run_id = self.active_run()?;
        let step = metrics.get("epoch").and_then(Value::as_i64).unwrap_or(0);
        let ts = millis();
        let metrics: Vec<Value> = metrics
            .iter()
            .filter_map(|(k, v)| v.as_f64().map(|x| json!({"key": k, "value": x, "timestamp": ts, "step": step})))
            .collect();
        let body = json!({"run_id": run_id, "metrics": metrics, "params": [], "tags": []});
        self.post(&self.endpoints.log_batch, &body).map(|_| ())
    }

    fn on_run_end(&mut self, summary: &Payload) -> Result<()> {
        let run_id = self.active_run()?;
        let status = summary.get("status").and_then(Value::as_str).unwrap_or("FINISHED");
        let body = json!({"run_id": run_id, "status": status, "end_time": millis()});
        self.post(&self.endpoints.update_run, &body)?;
        self.run_id = None;
        Ok(())
    }
}

/// Forwards every event to each child in order. A failing child is logged
/// and does not stop delivery to the others.
pub struct HybridFrontend {
    children: Vec<Box<dyn Frontend>>,
}

pub fn create_hybrid_frontend(children: Vec<Box<dyn Frontend>>) -> HybridFrontend {
    HybridFrontend { children }
}

impl HybridFrontend {
    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    fn fan_out(&mut self, kind: EventKind, payload: &Payload) -> Result<()> {
        let event = FrontendEvent::new(kind, payload.clone());
        let failed: Vec<String> = self
            .children
            .iter_mut()
            .filter_map(|c| (!dispatch(c.as_mut(), &event)).then(|| c.name().to_string()))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Frontend(format!("children failed: {}", failed.join(", "))))
        }
    }
}

impl Frontend for HybridFrontend {
    fn name(&self) -> &str {
        "hybrid"
    }
    fn on_run_start(&mut self, meta: &Payload) -> Result<()> {
        self.fan_out(EventKind::RunStart, meta)
    }
    fn on_epoch_end(&mut self, metrics: &Payload) -> Result<()> {
        self.fan_out(EventKind::EpochEnd, metrics)
    }
    fn on_run_end(&mut self, summary: &Payload) -> Result<()> {
        self.fan_out(EventKind::RunEnd, summary)
    }
}

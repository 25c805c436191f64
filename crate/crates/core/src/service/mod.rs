//! Workflow service: registry, controller and per-workflow workers.
//!
//! The controller watches every workflow topic and provisions a worker when
//! events are waiting. A worker runs one kernel until the workflow
//! terminates or stays quiet for the idle grace period, then drops all of
//! its in-memory state. The next worker rebuilds it from the checkpoint.

mod config;
mod local;
mod registry;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::Value;

pub use config::{ConfigError, ServiceConfig, ROOT_ENV};
pub use local::LocalEngine;
pub use registry::{Interception, Registry, WorkflowSpec};

use crate::bus::{BusError, EventBus, FileBus, MemoryBus};
use crate::event::CloudEvent;
use crate::executor::{BusPublisher, Invoker, LocalExecutor, Publisher};
use crate::kernel::action::{Effects, Runtime};
use crate::kernel::checkpoint::{CheckpointError, CheckpointStore, FileCheckpointStore, MemoryCheckpointStore};
use crate::kernel::{validate_trigger, Extensions, Kernel, KernelDeps, KernelError, Selector, StateDoc, Trigger, WorkflowStatus};
use crate::timer::TimerService;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("workflow {0:?} already exists")]
    DuplicateWorkflow(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid trigger: {0}")]
    InvalidTrigger(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("workflow {0:?} has terminated")]
    Terminated(String),
    #[error(transparent)]
    Kernel(KernelError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage: {0}")]
    Storage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<KernelError> for ServiceError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::InvalidTrigger { .. } | KernelError::DuplicateTrigger(_) => ServiceError::InvalidTrigger(e.to_string()),
            KernelError::UnknownTrigger(id) => ServiceError::NotFound(format!("trigger {id:?}")),
            KernelError::SelectorNotFound(s) => ServiceError::NotFound(s),
            other => ServiceError::Kernel(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Provisioned,
    Deprovisioned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerHandle {
    pub workflow_id: String,
    pub state: WorkerState,
    /// When the worker will scale to zero absent new events.
    pub idle_deadline: Option<Instant>,
    pub poll_interval: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ServiceStats {
    pub provisions: u64,
    pub deprovisions: u64,
    pub active_workers: usize,
    pub peak_workers: usize,
}

/// One worker lifecycle change, relative to service start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvisionEvent {
    pub at_s: f64,
    pub workflow: String,
    pub state: WorkerState,
}

struct WorkerSlot {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    idle_deadline: Arc<Mutex<Instant>>,
}

pub type InvokerFactory = Box<dyn FnOnce(Arc<dyn Publisher>) -> Arc<dyn Invoker>>;

pub struct Service {
    config: ServiceConfig,
    registry: Registry,
    bus: Arc<dyn EventBus>,
    store: Arc<dyn CheckpointStore>,
    ext: Arc<Extensions>,
    effects: Arc<dyn Effects>,
    executor: Option<Arc<LocalExecutor>>,
    timers: Arc<TimerService>,
    workers: Mutex<HashMap<String, WorkerSlot>>,
    backoff: Mutex<HashMap<String, Instant>>,
    stats: Mutex<ServiceStats>,
    started: Instant,
    timeline: Mutex<Vec<ProvisionEvent>>,
    shutdown: AtomicBool,
    controller: Mutex<Option<JoinHandle<()>>>,
}

impl Service {
    /// Service with the standard extensions and a local executor.
    pub fn open(config: ServiceConfig) -> Result<Arc<Service>, ServiceError> {
        Self::open_with(config, Extensions::standard(), None)
    }

    /// `invoker` replaces the local executor, e.g. with a remote one.
    pub fn open_with(config: ServiceConfig, ext: Extensions, invoker: Option<InvokerFactory>) -> Result<Arc<Service>, ServiceError> {
        let (bus, store, registry): (Arc<dyn EventBus>, Arc<dyn CheckpointStore>, Registry) = match &config.storage_root {
            Some(root) => (
                Arc::new(FileBus::open(root.join("bus"))?.with_fsync(config.fsync)),
                Arc::new(FileCheckpointStore::new(root.join("checkpoints"))),
                Registry::open(root.join("registry"))?,
            ),
            None => (Arc::new(MemoryBus::new()), Arc::new(MemoryCheckpointStore::new()), Registry::in_memory()),
        };
        let publisher: Arc<dyn Publisher> = Arc::new(BusPublisher(bus.clone()));
        let (invoker, executor): (Arc<dyn Invoker>, _) = match invoker {
            Some(make) => (make(publisher.clone()), None),
            None => {
                let local = LocalExecutor::new(publisher.clone(), config.seed).with_standard_tasks();
                (local.clone(), Some(local))
            }
        };
        let timers = Arc::new(TimerService::new(publisher));
        let effects = Arc::new(Runtime { invoker, timers: timers.clone() });
        Ok(Arc::new(Service {
            config,
            registry,
            bus,
            store,
            ext: Arc::new(ext),
            effects,
            executor,
            timers,
            workers: Mutex::new(HashMap::new()),
            backoff: Mutex::new(HashMap::new()),
            stats: Mutex::new(ServiceStats::default()),
            started: Instant::now(),
            timeline: Mutex::new(Vec::new()),
            shutdown: AtomicBool::new(false),
            controller: Mutex::new(None),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn bus(&self) -> &Arc<dyn EventBus> {
        &self.bus
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn extensions(&self) -> &Extensions {
        &self.ext
    }

    /// The built-in executor, absent when a custom invoker was supplied.
    pub fn executor(&self) -> Option<&Arc<LocalExecutor>> {
        self.executor.as_ref()
    }

    pub fn timers(&self) -> &TimerService {
        &self.timers
    }

    pub fn stats(&self) -> ServiceStats {
        let mut s = self.stats.lock().clone();
        s.active_workers = self.workers.lock().len();
        s
    }

    /// Provision and deprovision events in order.
    pub fn timeline(&self) -> Vec<ProvisionEvent> {
        self.timeline.lock().clone()
    }

    fn record(&self, workflow: &str, state: WorkerState) {
        let at_s = self.started.elapsed().as_secs_f64();
        self.timeline.lock().push(ProvisionEvent { at_s, workflow: workflow.to_string(), state });
    }

    fn deps(&self) -> KernelDeps {
        KernelDeps { bus: self.bus.clone(), store: self.store.clone(), effects: self.effects.clone(), ext: self.ext.clone() }
    }

    /// Starts the controller thread.
    pub fn start(self: &Arc<Self>) {
        let mut slot = self.controller.lock();
        if slot.is_some() {
            return;
        }
        let weak: Weak<Service> = Arc::downgrade(self);
        let interval = self.config.poll_interval();
        let handle = std::thread::Builder::new()
            .name("tf-controller".into())
            .spawn(move || loop {
                let Some(svc) = weak.upgrade() else { return };
                if svc.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                svc.reconcile();
                drop(svc);
                std::thread::sleep(interval);
            })
            .expect("spawn controller");
        *slot = Some(handle);
    }

    /// Stops the controller and every worker. Workers checkpoint first.
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.controller.lock().take() {
            // The controller may itself drop the last reference.
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
        let ids: Vec<String> = self.workers.lock().keys().cloned().collect();
        for id in ids {
            self.stop_worker(&id);
        }
    }

    /// One controller pass: provision workers for workflows with a backlog.
    pub fn reconcile(self: &Arc<Self>) {
        for id in self.registry.ids() {
            let Some(status) = self.registry.status(&id) else { continue };
            if status.is_terminal() || self.workers.lock().contains_key(&id) {
                continue;
            }
            if self.backoff.lock().get(&id).is_some_and(|t| Instant::now() < *t) {
                continue;
            }
            match self.bus.pending(&id) {
                Ok(0) => {
                    if status == WorkflowStatus::Running {
                        let _ = self.registry.set_status(&id, WorkflowStatus::Idle);
                    }
                }
                Ok(_) => {
                    self.provision(&id);
                }
                Err(e) => tracing::warn!(workflow = %id, error = %e, "cannot inspect topic"),
            }
        }
    }

    /// Starts a worker unless one is running or the cap is reached.
    pub fn provision(self: &Arc<Self>, workflow: &str) -> bool {
        let mut workers = self.workers.lock();
        if workers.contains_key(workflow) || self.shutdown.load(Ordering::SeqCst) {
            return false;
        }
        if workers.len() >= self.config.max_workers.max(1) {
            tracing::debug!(%workflow, "worker cap reached");
            return false;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let idle_deadline = Arc::new(Mutex::new(Instant::now() + self.config.idle_grace()));
        let svc = self.clone();
        let id = workflow.to_string();
        let (stop2, deadline2) = (stop.clone(), idle_deadline.clone());
        let thread = std::thread::Builder::new()
            .name(format!("tf-worker-{workflow}"))
            .spawn(move || svc.run_worker(&id, &stop2, &deadline2))
            .expect("spawn worker");
        workers.insert(workflow.to_string(), WorkerSlot { stop, thread: Some(thread), idle_deadline });
        let mut stats = self.stats.lock();
        stats.provisions += 1;
        stats.peak_workers = stats.peak_workers.max(workers.len());
        drop(stats);
        self.record(workflow, WorkerState::Provisioned);
        tracing::info!(%workflow, "worker provisioned");
        true
    }

    fn stop_worker(&self, workflow: &str) {
        let thread = {
            let mut workers = self.workers.lock();
            workers.get_mut(workflow).and_then(|slot| {
                slot.stop.store(true, Ordering::SeqCst);
                slot.thread.take()
            })
        };
        if let Some(t) = thread {
            let _ = t.join();
        }
    }

    fn run_worker(&self, workflow: &str, stop: &AtomicBool, deadline: &Mutex<Instant>) {
        if let Err(e) = self.worker_loop(workflow, stop, deadline) {
            tracing::error!(%workflow, error = %e, "worker failed; retrying later");
            self.backoff.lock().insert(workflow.to_string(), Instant::now() + self.config.poll_interval() * 10);
        }
        // The kernel is gone by now; only then may another worker start.
        self.workers.lock().remove(workflow);
        self.stats.lock().deprovisions += 1;
        self.record(workflow, WorkerState::Deprovisioned);
        tracing::info!(%workflow, "worker deprovisioned");
    }

    fn worker_loop(&self, workflow: &str, stop: &AtomicBool, deadline: &Mutex<Instant>) -> Result<(), ServiceError> {
        let spec = self.registry.get(workflow)?;
        let mut kernel = Kernel::open(workflow, spec.triggers.clone(), self.deps(), self.config.kernel())?;
        for (k, v) in &spec.global_context {
            if !kernel.global().contains_key(k) {
                kernel.set_global(k, v.clone());
            }
        }
        let mut seen = self.sync(&mut kernel)?;
        if kernel.status().is_terminal() {
            self.registry.set_status(workflow, kernel.status())?;
            return Ok(());
        }
        self.registry.set_status(workflow, WorkflowStatus::Running)?;
        let grace = self.config.idle_grace();
        let mut last_activity = Instant::now();
        loop {
            if stop.load(Ordering::SeqCst) {
                kernel.flush()?;
                return Ok(());
            }
            if self.registry.version(workflow) != Some(seen) {
                seen = self.sync(&mut kernel)?;
            }
            let wait = self.config.poll_interval().min(grace.saturating_sub(last_activity.elapsed()).max(Duration::from_millis(1)));
            if kernel.step(wait)? > 0 {
                last_activity = Instant::now();
                *deadline.lock() = last_activity + grace;
            }
            if kernel.status().is_terminal() {
                kernel.flush()?;
                self.registry.set_status(workflow, kernel.status())?;
                return Ok(());
            }
            if last_activity.elapsed() >= grace && kernel.queue_len() == 0 {
                kernel.flush()?;
                self.registry.set_status(workflow, WorkflowStatus::Idle)?;
                return Ok(());
            }
        }
    }

    /// Registers triggers and interceptors the kernel has not seen yet.
    fn sync(&self, kernel: &mut Kernel) -> Result<u64, ServiceError> {
        let spec = self.registry.get(kernel.workflow())?;
        for t in &spec.triggers {
            if kernel.trigger(&t.id).is_none() {
                kernel.add_trigger(t.clone())?;
            }
        }
        for i in &spec.interceptors {
            if kernel.trigger(&i.trigger.id).is_none() {
                kernel.intercept(&i.selector, i.trigger.clone())?;
            }
        }
        Ok(spec.version)
    }

    pub fn worker(&self, workflow: &str) -> WorkerHandle {
        let workers = self.workers.lock();
        let slot = workers.get(workflow);
        WorkerHandle {
            workflow_id: workflow.to_string(),
            state: if slot.is_some() { WorkerState::Provisioned } else { WorkerState::Deprovisioned },
            idle_deadline: slot.map(|s| *s.idle_deadline.lock()),
            poll_interval: self.config.poll_interval(),
        }
    }

    pub fn create_workflow(&self, id: &str, event_sources: Vec<String>) -> Result<WorkflowSpec, ServiceError> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(ServiceError::Storage(format!("unusable workflow id {id:?}")));
        }
        let spec = self.registry.create(WorkflowSpec::new(id, event_sources))?;
        if !self.bus.has_topic(id) {
            self.bus.create_topic(id)?;
        }
        Ok(spec)
    }

    /// Binds another event source namespace to the workflow.
    pub fn add_event_source(&self, workflow: &str, source: &str) -> Result<(), ServiceError> {
        self.registry.update(workflow, |s| {
            if !s.event_sources.iter().any(|e| e == source) {
                s.event_sources.push(source.to_string());
            }
            Ok(())
        })
    }

    pub fn add_trigger(self: &Arc<Self>, workflow: &str, trigger: Trigger) -> Result<String, ServiceError> {
        self.add_triggers(workflow, vec![trigger]).map(|mut ids| ids.remove(0))
    }

    pub fn add_triggers(self: &Arc<Self>, workflow: &str, triggers: Vec<Trigger>) -> Result<Vec<String>, ServiceError> {
        let ids = self.registry.update(workflow, |spec| {
            if spec.status.is_terminal() {
                return Err(ServiceError::Terminated(workflow.to_string()));
            }
            let mut ids = Vec::new();
            for t in triggers {
                validate_trigger(&t, &self.ext)?;
                if spec.has_trigger(&t.id) {
                    return Err(ServiceError::InvalidTrigger(format!("duplicate trigger id {:?}", t.id)));
                }
                ids.push(t.id.clone());
                spec.triggers.push(t);
            }
            Ok(ids)
        })?;
        self.wake(workflow);
        Ok(ids)
    }

    pub fn intercept(self: &Arc<Self>, workflow: &str, selector: Selector, trigger: Trigger) -> Result<(), ServiceError> {
        validate_trigger(&trigger, &self.ext)?;
        self.registry.update(workflow, |spec| {
            if spec.has_trigger(&trigger.id) {
                return Err(ServiceError::InvalidTrigger(format!("duplicate trigger id {:?}", trigger.id)));
            }
            let found = match &selector {
                Selector::TriggerId(id) => spec.triggers.iter().any(|t| &t.id == id),
                Selector::ConditionId(c) => spec.triggers.iter().any(|t| t.condition_id() == c),
            };
            if !found {
                return Err(ServiceError::NotFound(selector.to_string()));
            }
            spec.interceptors.push(Interception { selector, trigger });
            Ok(())
        })?;
        self.wake(workflow);
        Ok(())
    }

    pub fn set_global_context(&self, workflow: &str, key: &str, value: Value) -> Result<(), ServiceError> {
        self.registry.update(workflow, |spec| {
            spec.global_context.insert(key.to_string(), value);
            Ok(())
        })
    }

    /// A running or idle workflow picks up definition changes right away,
    /// so parked events can replay against new triggers.
    fn wake(self: &Arc<Self>, workflow: &str) {
        if matches!(self.registry.status(workflow), Some(WorkflowStatus::Running | WorkflowStatus::Idle)) {
            self.provision(workflow);
        }
    }

    /// Injects an external event into the workflow's topic.
    pub fn publish(&self, workflow: &str, event: &CloudEvent) -> Result<u64, ServiceError> {
        self.registry.get(workflow)?;
        event.validate().map_err(|e| ServiceError::InvalidEvent(e.to_string()))?;
        Ok(self.bus.publish(workflow, event)?)
    }

    /// Event-log records from `from`, decoded where possible.
    pub fn read_events(&self, workflow: &str, from: u64, max: usize) -> Result<Vec<Value>, ServiceError> {
        self.registry.get(workflow)?;
        Ok(self
            .bus
            .read(workflow, from, max)?
            .into_iter()
            .map(|r| match serde_json::from_slice::<Value>(&r.bytes) {
                Ok(v) => serde_json::json!({"offset": r.offset, "event": v}),
                Err(_) => serde_json::json!({"offset": r.offset, "raw": String::from_utf8_lossy(&r.bytes)}),
            })
            .collect())
    }

    /// State from the last checkpoint, which is all that survives a worker.
    pub fn get_state(&self, workflow: &str, trigger: Option<&str>) -> Result<Value, ServiceError> {
        let spec = self.registry.get(workflow)?;
        let ck = self.store.load(workflow)?;
        let empty = crate::kernel::checkpoint::Checkpoint::empty(workflow, self.config.dedup_capacity);
        let ck = ck.as_ref().unwrap_or(&empty);
        let mut triggers: Vec<&Trigger> = ck.triggers.iter().collect();
        for t in spec.triggers.iter().chain(spec.interceptors.iter().map(|i| &i.trigger)) {
            if ck.trigger(&t.id).is_none() {
                triggers.push(t);
            }
        }
        let mut global = spec.global_context.clone();
        global.extend(ck.global_context.clone());
        let doc = StateDoc {
            workflow,
            status: spec.status,
            triggers: &triggers,
            dlq: &ck.dlq,
            committed_offset: self.bus.committed(workflow).unwrap_or(ck.next_offset),
            result: ck.result.as_ref(),
            global: &global,
            counters: &ck.counters,
        };
        Ok(doc.render(trigger)?)
    }

    pub fn delete_workflow(&self, workflow: &str) -> Result<(), ServiceError> {
        self.registry.get(workflow)?;
        self.stop_worker(workflow);
        if self.bus.has_topic(workflow) {
            self.bus.delete_topic(workflow)?;
        }
        self.store.delete(workflow)?;
        self.registry.remove(workflow)?;
        Ok(())
    }

    /// Blocks until the workflow reaches a terminal status.
    pub fn wait_terminal(&self, workflow: &str, timeout: Duration) -> Result<WorkflowStatus, ServiceError> {
        let deadline = Instant::now() + timeout;
        loop {
            let status = self.registry.status(workflow).ok_or_else(|| ServiceError::NotFound(workflow.to_string()))?;
            if status.is_terminal() || Instant::now() >= deadline {
                return Ok(status);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Blocks until `pred` holds for the workflow state or `timeout` passes.
    pub fn wait_state(&self, workflow: &str, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Result<bool, ServiceError> {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(&self.get_state(workflow, None)?) {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}

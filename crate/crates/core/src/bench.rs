//! Benchmark scenarios: raw event throughput, per-step engine overhead and
//! worker autoscaling. Reports serialize to a `timestamp,metric,value` CSV
//! plus a JSON summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::EventBus;
use crate::dag::{DagSpec, DagTask};
use crate::event::CloudEvent;
use crate::executor::{TaskBehavior, TaskDefinition};
use crate::kernel::trigger::{Matcher, Spec};
use crate::kernel::{KernelError, Trigger};
use crate::service::{LocalEngine, ProvisionEvent, Service, ServiceConfig, ServiceError};
use crate::WorkflowStatus;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("scenario did not complete: {0}")]
    Incomplete(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub t_s: f64,
    pub active_workers: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: String,
    pub events_processed: u64,
    pub elapsed_s: f64,
    pub throughput: f64,
    /// Engine time per step: everything outside the tasks themselves.
    pub step_overheads_ms: Vec<f64>,
    pub overhead_ms: f64,
    pub fires: BTreeMap<String, u64>,
    pub timeline: Vec<TimelinePoint>,
    pub provisions: Vec<(f64, String, String)>,
    pub notes: BTreeMap<String, Value>,
}

impl BenchmarkReport {
    fn new(scenario: impl Into<String>) -> Self {
        BenchmarkReport { scenario: scenario.into(), ..Default::default() }
    }

    fn set_throughput(&mut self, events: u64, elapsed: Duration) {
        self.events_processed = events;
        self.elapsed_s = elapsed.as_secs_f64();
        self.throughput = if events == 0 || self.elapsed_s == 0.0 { 0.0 } else { events as f64 / self.elapsed_s };
    }

    pub fn median_step_overhead_ms(&self) -> Option<f64> {
        median(&self.step_overheads_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,metric,value\n");
        let end = self.elapsed_s;
        let mut row = |t: f64, metric: &str, v: f64| {
            let _ = writeln!(out, "{t:.6},{metric},{v}");
        };
        row(end, "events_processed", self.events_processed as f64);
        row(end, "elapsed_s", self.elapsed_s);
        row(end, "throughput_eps", self.throughput);
        row(end, "overhead_ms", self.overhead_ms);
        for (i, o) in self.step_overheads_ms.iter().enumerate() {
            row(i as f64, "step_overhead_ms", *o);
        }
        for (id, n) in &self.fires {
            row(end, &format!("fires.{id}"), *n as f64);
        }
        for p in &self.timeline {
            row(p.t_s, "active_workers", p.active_workers as f64);
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Some(m) = self.median_step_overhead_ms() {
            v["median_step_overhead_ms"] = json!(m);
        }
        v
    }

    /// Writes `<path>` as CSV and `<path>.json` next to it.
    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        let mut json_path = path.as_os_str().to_owned();
        json_path.push(".json");
        std::fs::write(json_path, serde_json::to_string_pretty(&self.to_json()).unwrap_or_default())?;
        Ok(())
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadKind {
    /// One trigger with a `true` condition and a noop action; every event fires.
    Noop,
    /// 100 counter-join triggers, each joining `n / 100` events.
    Join,
}

pub const JOIN_TRIGGERS: u64 = 100;

/// Publishes `n_events` up front, then times one worker consuming them.
pub fn bench_load(n_events: u64, kind: LoadKind) -> Result<BenchmarkReport, BenchError> {
    let wf = "load";
    let triggers: Vec<Trigger> = match kind {
        LoadKind::Noop => vec![Trigger::new("noop", vec![Matcher::any("e")], Spec::new("true"), Spec::new("noop"))],
        LoadKind::Join => {
            if !n_events.is_multiple_of(JOIN_TRIGGERS) {
                return Err(BenchError::Invalid(format!("join load needs a multiple of {JOIN_TRIGGERS} events")));
            }
            let per = n_events / JOIN_TRIGGERS;
            (0..JOIN_TRIGGERS)
                .map(|i| {
                    Trigger::new(format!("join{i}"), vec![Matcher::any(format!("j{i}"))], Spec::new("counter-join").with("expected", json!(per)), Spec::new("noop"))
                        .transient()
                })
                .collect()
        }
    };
    let engine = LocalEngine::new(0);
    engine.bus.create_topic(wf).map_err(KernelError::from)?;
    for i in 0..n_events {
        let subject = match kind {
            LoadKind::Noop => "e".to_string(),
            LoadKind::Join => format!("j{}", i % JOIN_TRIGGERS),
        };
        engine.publish(wf, &CloudEvent::success(format!("e{i}"), "tf://bench", subject, Value::Null))?;
    }
    let mut k = engine.open(wf, triggers)?;
    let started = Instant::now();
    let limit = Duration::from_secs(120);
    while k.counters().events < n_events {
        if started.elapsed() > limit {
            return Err(BenchError::Incomplete(format!("{} of {n_events} events after {limit:?}", k.counters().events)));
        }
        k.step(Duration::from_millis(10))?;
    }
    k.flush()?;
    let elapsed = started.elapsed();

    let mut report = BenchmarkReport::new(format!("load-{}", if kind == LoadKind::Noop { "noop" } else { "join" }));
    report.set_throughput(n_events, elapsed);
    report.fires.insert("total".into(), k.counters().fires);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "shape", content = "n")]
pub enum Shape {
    Sequence(usize),
    Parallel(usize),
}

const STEP_TASK: &str = "bench-step";

/// Overhead = wall time minus time spent inside tasks on the critical path.
/// Sequence steps are timed from the executor's acceptance instants.
pub fn bench_overhead(shape: Shape, task_duration: Duration) -> Result<BenchmarkReport, BenchError> {
    let engine = LocalEngine::new(0);
    engine.executor.register(TaskDefinition::new(STEP_TASK, TaskBehavior::Sleep(task_duration))).map_err(|e| BenchError::Invalid(e.to_string()))?;
    let (spec, name, critical) = match shape {
        Shape::Sequence(n) if n > 0 => {
            let tasks = (0..n)
                .map(|i| {
                    let t = DagTask::invoke(&format!("s{i}"), STEP_TASK);
                    if i + 1 < n {
                        t.then(&[&format!("s{}", i + 1)])
                    } else {
                        t
                    }
                })
                .collect();
            (DagSpec::new("seq", tasks), format!("overhead-sequence-{n}"), task_duration * n as u32)
        }
        Shape::Parallel(n) if n > 0 => {
            let items: Vec<u64> = (0..n as u64).collect();
            let tasks = vec![DagTask::map("fan", STEP_TASK).with_param("items", json!(items))];
            (DagSpec::new("par", tasks), format!("overhead-parallel-{n}"), task_duration)
        }
        _ => return Err(BenchError::Invalid("shape needs at least one task".into())),
    };
    let compiled = spec.compile().map_err(|e| BenchError::Invalid(e.to_string()))?;
    let mut k = engine.open(&spec.dag_id, compiled.all_triggers())?;
    let started = Instant::now();
    engine.publish(&spec.dag_id, &spec.start_event(json!(0)))?;
    k.run_until(Duration::from_secs(300), |k| k.status().is_terminal())?;
    let elapsed = started.elapsed();
    if k.status() != WorkflowStatus::Finished {
        return Err(BenchError::Incomplete(format!("{} ended {:?}", spec.dag_id, k.status())));
    }

    let mut report = BenchmarkReport::new(name);
    report.set_throughput(k.counters().events, elapsed);
    report.overhead_ms = ms(elapsed.saturating_sub(critical));
    if let Shape::Sequence(_) = shape {
        let mut marks: Vec<Instant> = vec![started];
        marks.extend(engine.executor.executions().iter().map(|e| e.at));
        let end = started + elapsed;
        // Gap before each dispatch, minus the previous task's own run time.
        for (i, w) in marks.windows(2).enumerate() {
            let busy = if i == 0 { Duration::ZERO } else { task_duration };
            report.step_overheads_ms.push(ms((w[1] - w[0]).saturating_sub(busy)));
        }
        report.step_overheads_ms.push(ms((end - *marks.last().unwrap()).saturating_sub(task_duration)));
    }
    report.fires.insert("total".into(), k.counters().fires);
    report.notes.insert("task_duration_ms".into(), json!(ms(task_duration)));
    Ok(report)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase {
    pub active_s: f64,
    pub pause_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoscaleSpec {
    pub workflows: usize,
    pub phases: Vec<Phase>,
    /// Events per second per workflow while active.
    pub rate_per_s: f64,
    pub grace_s: f64,
    pub poll_ms: u64,
    pub sample_ms: u64,
}

impl Default for AutoscaleSpec {
    fn default() -> Self {
        AutoscaleSpec {
            workflows: 10,
            phases: vec![Phase { active_s: 1.0, pause_s: 2.0 }, Phase { active_s: 1.0, pause_s: 0.0 }],
            rate_per_s: 20.0,
            grace_s: 0.5,
            poll_ms: 20,
            sample_ms: 25,
        }
    }
}

/// Drives `workflows` counters through active and paused phases and samples
/// the provisioned-worker count.
pub fn bench_autoscale(spec: &AutoscaleSpec) -> Result<BenchmarkReport, BenchError> {
    if spec.workflows == 0 || spec.rate_per_s <= 0.0 {
        return Err(BenchError::Invalid("need at least one workflow and a positive rate".into()));
    }
    let config = ServiceConfig { idle_grace_s: spec.grace_s, poll_interval_ms: spec.poll_ms, ..ServiceConfig::in_memory() };
    let svc = Service::open(config)?;
    svc.start();
    let ids: Vec<String> = (0..spec.workflows).map(|i| format!("wf{i}")).collect();
    for id in &ids {
        svc.create_workflow(id, vec![])?;
        svc.add_trigger(id, Trigger::new("count", vec![Matcher::any("tick")], Spec::new("true"), Spec::new("noop")))?;
    }

    let started = Instant::now();
    let sampling = Arc::new(AtomicBool::new(true));
    let sampler = {
        let (svc, sampling, every) = (svc.clone(), sampling.clone(), Duration::from_millis(spec.sample_ms.max(1)));
        std::thread::spawn(move || {
            let mut points = Vec::new();
            while sampling.load(Ordering::SeqCst) {
                points.push(TimelinePoint { t_s: started.elapsed().as_secs_f64(), active_workers: svc.stats().active_workers });
                std::thread::sleep(every);
            }
            points
        })
    };

    let gap = Duration::from_secs_f64(1.0 / spec.rate_per_s);
    let mut sent = 0u64;
    let mut pauses = Vec::new();
    for phase in &spec.phases {
        let until = Instant::now() + Duration::from_secs_f64(phase.active_s);
        while Instant::now() < until {
            for id in &ids {
                svc.publish(id, &CloudEvent::success(format!("t{sent}"), "tf://bench", "tick", Value::Null))?;
            }
            sent += 1;
            std::thread::sleep(gap);
        }
        let pause_start = started.elapsed().as_secs_f64();
        std::thread::sleep(Duration::from_secs_f64(phase.pause_s));
        if phase.pause_s > 0.0 {
            pauses.push((pause_start, started.elapsed().as_secs_f64()));
        }
    }
    let mut fires = BTreeMap::new();
    for id in &ids {
        let done = svc.wait_state(id, Duration::from_secs(30), |s| {
            s["triggers"].as_array().and_then(|ts| ts.first()).and_then(|t| t["fire_count"].as_u64()) == Some(sent)
        })?;
        if !done {
            return Err(BenchError::Incomplete(format!("{id} did not process {sent} events")));
        }
        fires.insert(id.clone(), sent);
    }
    // Let everything drain back to zero before stopping the sampler.
    let settle = Instant::now() + Duration::from_secs_f64(spec.grace_s * 4.0 + 1.0);
    while svc.stats().active_workers > 0 && Instant::now() < settle {
        std::thread::sleep(Duration::from_millis(spec.sample_ms.max(1)));
    }
    let elapsed = started.elapsed();
    sampling.store(false, Ordering::SeqCst);
    let timeline = sampler.join().unwrap_or_default();
    svc.shutdown();

    let mut report = BenchmarkReport::new("autoscale");
    report.set_throughput(sent * spec.workflows as u64, elapsed);
    report.fires = fires;
    let zero_in_pause = pauses.iter().map(|(a, b)| timeline.iter().any(|p| p.t_s >= *a && p.t_s <= *b && p.active_workers == 0)).collect::<Vec<_>>();
    report.notes.insert("scaled_to_zero_in_pause".into(), json!(zero_in_pause));
    report.notes.insert("peak_workers".into(), json!(timeline.iter().map(|p| p.active_workers).max().unwrap_or(0)));
    report.timeline = timeline;
    report.provisions = provision_rows(&svc.timeline());
    Ok(report)
}

const SLEEPY_TASK: &str = "sleepy";

/// One workflow whose only task outlasts the idle grace period.
/// With `grace_s < task_s` the worker is expected to scale to zero while the
/// task runs and come back for its termination event.
pub fn bench_scale_to_zero(grace_s: f64, task_s: f64) -> Result<BenchmarkReport, BenchError> {
    let poll_ms = 20;
    let config = ServiceConfig { idle_grace_s: grace_s, poll_interval_ms: poll_ms, ..ServiceConfig::in_memory() };
    let svc = Service::open(config)?;
    let executor = svc.executor().ok_or_else(|| BenchError::Invalid("service has no local executor".into()))?;
    executor
        .register(TaskDefinition::new(SLEEPY_TASK, TaskBehavior::Sleep(Duration::from_secs_f64(task_s))))
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    svc.start();
    let wf = "sleepy";
    svc.create_workflow(wf, vec![])?;
    svc.add_triggers(
        wf,
        vec![
            Trigger::new("work", vec![Matcher::success("go")], Spec::new("true"), Spec::new("invoke-task").with("task", json!(SLEEPY_TASK)).with("reply", json!("slept")))
                .transient(),
            Trigger::new("finish", vec![Matcher::success("slept")], Spec::new("true"), Spec::new("terminate-workflow")).transient(),
        ],
    )?;
    let started = Instant::now();
    svc.publish(wf, &CloudEvent::success("go-1", "tf://bench", "go", json!({"payload": 42})))?;
    let status = svc.wait_terminal(wf, Duration::from_secs_f64(task_s + grace_s + 30.0))?;
    let elapsed = started.elapsed();
    if status != WorkflowStatus::Finished {
        return Err(BenchError::Incomplete(format!("{wf} ended {status:?}")));
    }
    // Wait for the final deprovision so the timeline is complete.
    let settle = Instant::now() + Duration::from_secs(5);
    while svc.stats().active_workers > 0 && Instant::now() < settle {
        std::thread::sleep(Duration::from_millis(poll_ms));
    }
    let state = svc.get_state(wf, None)?;
    let timeline = svc.timeline();
    svc.shutdown();

    // Only the task's termination event can start a second worker, so a
    // provision/deprovision/provision/deprovision sequence means the worker
    // went away while the task was still running.
    use crate::service::WorkerState::{Deprovisioned, Provisioned};
    let states: Vec<_> = timeline.iter().map(|e| e.state).collect();
    let deprovisioned_during_task = states == [Provisioned, Deprovisioned, Provisioned, Deprovisioned];
    let provisions = states.iter().filter(|s| **s == Provisioned).count();

    let mut report = BenchmarkReport::new("scale-to-zero");
    report.set_throughput(state["counters"]["events"].as_u64().unwrap_or(0), elapsed);
    for t in state["triggers"].as_array().into_iter().flatten() {
        report.fires.insert(t["id"].as_str().unwrap_or_default().to_string(), t["fire_count"].as_u64().unwrap_or(0));
    }
    report.notes.insert("deprovisioned_during_task".into(), json!(deprovisioned_during_task));
    report.notes.insert("provision_count".into(), json!(provisions));
    report.notes.insert("end_state".into(), json!({"status": state["status"], "result": state["result"], "triggers": state["triggers"]}));
    report.provisions = provision_rows(&timeline);
    Ok(report)
}

pub fn provision_rows(events: &[ProvisionEvent]) -> Vec<(f64, String, String)> {
    events.iter().map(|e| (e.at_s, e.workflow.clone(), format!("{:?}", e.state).to_lowercase())).collect()
}

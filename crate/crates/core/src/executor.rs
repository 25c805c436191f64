//! In-process stand-in for a serverless function platform.
//!
//! Tasks run asynchronously with configurable latency and injected failures
//! and report back by publishing a termination CloudEvent to the reply
//! subject of the invocation. Invocation ids double as idempotency keys: a
//! repeated id is acknowledged without running the task again.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bus::EventBus;
use crate::event::{CloudEvent, EXT_INDEX, EXT_WORKFLOW, TYPE_FAILURE, TYPE_SUCCESS};
use crate::sched::DelayQueue;

pub const DEFAULT_POOL_SIZE: usize = 1024;
pub const EXECUTOR_SOURCE: &str = "tf://executor";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid task definition: {0}")]
    InvalidDefinition(String),
    #[error("remote invoker: {0}")]
    Remote(String),
}

/// Request to run one task. Wire format of the remote invoker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub task: String,
    /// Reply-to subject of the termination event.
    pub subject: String,
    #[serde(default)]
    pub payload: Value,
    pub invocation_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
}

impl Invocation {
    pub fn new(task: impl Into<String>, subject: impl Into<String>, payload: Value, invocation_id: impl Into<String>) -> Self {
        Invocation {
            task: task.into(),
            subject: subject.into(),
            payload,
            invocation_id: invocation_id.into(),
            workflow: None,
            index: None,
        }
    }

    pub fn for_workflow(mut self, workflow: impl Into<String>) -> Self {
        self.workflow = Some(workflow.into());
        self
    }

    pub fn termination_id(&self) -> String {
        format!("{}-term", self.invocation_id)
    }

    /// Termination event reporting `outcome` for this invocation.
    pub fn termination(&self, ok: bool, data: Value) -> CloudEvent {
        let ty = if ok { TYPE_SUCCESS } else { TYPE_FAILURE };
        let mut ev = CloudEvent::new(self.termination_id(), EXECUTOR_SOURCE, self.subject.clone(), ty).with_data(data);
        if let Some(wf) = &self.workflow {
            ev = ev.with_extension(EXT_WORKFLOW, json!(wf));
        }
        if let Some(i) = self.index {
            ev = ev.with_extension(EXT_INDEX, json!(i));
        }
        ev
    }
}

/// Anything able to run invocations: the local executor or a remote one.
pub trait Invoker: Send + Sync {
    fn invoke(&self, invocation: Invocation) -> Result<(), ExecutorError>;

    /// `args.len()` concurrent invocations replying to the same subject.
    fn invoke_map(
        &self,
        task: &str,
        args: Vec<Value>,
        reply_subject: &str,
        base_id: &str,
        workflow: Option<&str>,
    ) -> Result<(), ExecutorError> {
        for (i, arg) in args.into_iter().enumerate() {
            let mut inv = Invocation::new(task, reply_subject, arg, format!("{base_id}#{i}"));
            inv.workflow = workflow.map(str::to_string);
            inv.index = Some(i as u64);
            self.invoke(inv)?;
        }
        Ok(())
    }
}

/// Where termination events go.
pub trait Publisher: Send + Sync {
    fn publish(&self, workflow: Option<&str>, event: CloudEvent) -> Result<(), String>;
}

/// Publishes to the bus topic named after the workflow.
pub struct BusPublisher(pub Arc<dyn EventBus>);

impl Publisher for BusPublisher {
    fn publish(&self, workflow: Option<&str>, event: CloudEvent) -> Result<(), String> {
        let topic = workflow.or_else(|| event.workflow()).ok_or("event carries no workflow")?.to_string();
        self.0.publish(&topic, &event).map(|_| ()).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Success(Value),
    Failure(Value),
    /// The task never reports back.
    NoResponse,
}

pub type ScriptFn = dyn Fn(&Value, &mut dyn RngCore) -> TaskOutcome + Send + Sync;

#[derive(Clone)]
pub enum TaskBehavior {
    /// Waits, then returns its input.
    Sleep(Duration),
    Add(f64),
    Mul(f64),
    Echo,
    Scripted(Arc<ScriptFn>),
}

impl std::fmt::Debug for TaskBehavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskBehavior::Sleep(d) => write!(f, "Sleep({d:?})"),
            TaskBehavior::Add(x) => write!(f, "Add({x})"),
            TaskBehavior::Mul(x) => write!(f, "Mul({x})"),
            TaskBehavior::Echo => f.write_str("Echo"),
            TaskBehavior::Scripted(_) => f.write_str("Scripted"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskDefinition {
    pub name: String,
    pub behavior: TaskBehavior,
    /// Extra latency drawn uniformly from `[0, jitter)`.
    pub jitter: Duration,
    pub failure_rate: f64,
    pub no_response_rate: f64,
}

impl TaskDefinition {
    pub fn new(name: impl Into<String>, behavior: TaskBehavior) -> Self {
        TaskDefinition { name: name.into(), behavior, jitter: Duration::ZERO, failure_rate: 0.0, no_response_rate: 0.0 }
    }

    pub fn with_jitter(mut self, jitter: Duration) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn with_failure_rate(mut self, p: f64) -> Self {
        self.failure_rate = p;
        self
    }

    pub fn with_no_response_rate(mut self, p: f64) -> Self {
        self.no_response_rate = p;
        self
    }

    fn validate(&self) -> Result<(), ExecutorError> {
        for (label, p) in [("failure_rate", self.failure_rate), ("no_response_rate", self.no_response_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ExecutorError::InvalidDefinition(format!("{}: {label} {p} outside [0,1]", self.name)));
            }
        }
        if self.name.is_empty() {
            return Err(ExecutorError::InvalidDefinition("empty task name".into()));
        }
        Ok(())
    }

    fn base_latency(&self) -> Duration {
        match self.behavior {
            TaskBehavior::Sleep(d) => d,
            _ => Duration::ZERO,
        }
    }

    /// Computes the outcome of one run. Deterministic in `rng`.
    pub fn run(&self, input: &Value, rng: &mut dyn RngCore) -> TaskOutcome {
        if self.no_response_rate > 0.0 && rng.gen_bool(self.no_response_rate) {
            return TaskOutcome::NoResponse;
        }
        if self.failure_rate > 0.0 && rng.gen_bool(self.failure_rate) {
            return TaskOutcome::Failure(json!({"error": "injected failure", "task": self.name}));
        }
        let numeric = |f: &dyn Fn(f64) -> f64| match input.as_f64() {
            Some(x) => TaskOutcome::Success(number(f(x))),
            None => TaskOutcome::Failure(json!({"error": "non-numeric input", "task": self.name})),
        };
        match &self.behavior {
            TaskBehavior::Sleep(_) | TaskBehavior::Echo => TaskOutcome::Success(input.clone()),
            TaskBehavior::Add(k) => numeric(&|x| x + k),
            TaskBehavior::Mul(k) => numeric(&|x| x * k),
            TaskBehavior::Scripted(f) => f(input, rng),
        }
    }
}

/// Integral results stay integers so `2 + 3` reports `5`, not `5.0`.
fn number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub invocation_id: String,
    pub task: String,
    pub subject: String,
    /// When the invocation was accepted.
    pub at: Instant,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutorStats {
    pub executed: u64,
    pub duplicates_suppressed: u64,
    pub no_response: u64,
    pub failures: u64,
}

struct Inflight {
    running: usize,
    queued: VecDeque<(Invocation, Arc<TaskDefinition>)>,
}

/// Bounded-concurrency local executor.
pub struct LocalExecutor {
    tasks: RwLock<HashMap<String, Arc<TaskDefinition>>>,
    publisher: Arc<dyn Publisher>,
    seed: u64,
    pool_size: usize,
    accepted: Mutex<HashSet<String>>,
    log: Mutex<Vec<ExecutionRecord>>,
    stats: Mutex<ExecutorStats>,
    inflight: Mutex<Inflight>,
    delays: DelayQueue,
    me: std::sync::Weak<LocalExecutor>,
}

impl LocalExecutor {
    pub fn new(publisher: Arc<dyn Publisher>, seed: u64) -> Arc<Self> {
        LocalExecutor::with_pool(publisher, seed, DEFAULT_POOL_SIZE)
    }

    pub fn with_pool(publisher: Arc<dyn Publisher>, seed: u64, pool_size: usize) -> Arc<Self> {
        Arc::new_cyclic(|me| LocalExecutor {
            tasks: RwLock::new(HashMap::new()),
            publisher,
            seed,
            pool_size: pool_size.max(1),
            accepted: Mutex::new(HashSet::new()),
            log: Mutex::new(Vec::new()),
            stats: Mutex::new(ExecutorStats::default()),
            inflight: Mutex::new(Inflight { running: 0, queued: VecDeque::new() }),
            delays: DelayQueue::new("tf-executor"),
            me: me.clone(),
        })
    }

    /// Registers the arithmetic and sleep tasks used throughout the examples.
    pub fn with_standard_tasks(self: Arc<Self>) -> Arc<Self> {
        for def in standard_tasks() {
            self.register(def).expect("standard tasks are valid");
        }
        self
    }

    pub fn register(&self, def: TaskDefinition) -> Result<(), ExecutorError> {
        def.validate()?;
        self.tasks.write().insert(def.name.clone(), Arc::new(def));
        Ok(())
    }

    pub fn task(&self, name: &str) -> Option<Arc<TaskDefinition>> {
        self.tasks.read().get(name).cloned()
    }

    pub fn task_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.tasks.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn stats(&self) -> ExecutorStats {
        self.stats.lock().clone()
    }

    pub fn executions(&self) -> Vec<ExecutionRecord> {
        self.log.lock().clone()
    }

    /// Executions per task name.
    pub fn execution_counts(&self) -> HashMap<String, u64> {
        let mut counts = HashMap::new();
        for rec in self.log.lock().iter() {
            *counts.entry(rec.task.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn rng_for(&self, invocation_id: &str) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        invocation_id.hash(&mut h);
        ChaCha8Rng::seed_from_u64(self.seed ^ h.finish())
    }

    /// Runs a task synchronously without publishing, for oracles.
    pub fn run_inline(&self, task: &str, input: &Value, invocation_id: &str) -> Result<TaskOutcome, ExecutorError> {
        let def = self.task(task).ok_or_else(|| ExecutorError::UnknownTask(task.to_string()))?;
        Ok(def.run(input, &mut self.rng_for(invocation_id)))
    }

    fn start(&self, inv: Invocation, def: Arc<TaskDefinition>) {
        let mut rng = self.rng_for(&inv.invocation_id);
        let jitter = if def.jitter.is_zero() { Duration::ZERO } else { def.jitter.mul_f64(rng.gen::<f64>()) };
        let delay = def.base_latency() + jitter;
        if delay.is_zero() {
            self.complete(inv, def, rng);
        } else {
            let me = self.me.clone();
            self.delays.schedule(Instant::now() + delay, move || {
                if let Some(me) = me.upgrade() {
                    me.complete(inv, def, rng);
                }
            });
        }
    }

    fn complete(&self, inv: Invocation, def: Arc<TaskDefinition>, mut rng: ChaCha8Rng) {
        let outcome = def.run(&inv.payload, &mut rng);
        let event = match outcome {
            TaskOutcome::Success(v) => Some(inv.termination(true, v)),
            TaskOutcome::Failure(v) => {
                self.stats.lock().failures += 1;
                Some(inv.termination(false, v))
            }
            TaskOutcome::NoResponse => {
                self.stats.lock().no_response += 1;
                None
            }
        };
        if let Some(event) = event {
            if let Err(e) = self.publisher.publish(inv.workflow.as_deref(), event) {
                tracing::warn!(invocation = %inv.invocation_id, error = %e, "termination event dropped");
            }
        }
        let next = {
            let mut fl = self.inflight.lock();
            match fl.queued.pop_front() {
                Some(next) => Some(next),
                None => {
                    fl.running -= 1;
                    None
                }
            }
        };
        if let Some((inv, def)) = next {
            self.start(inv, def);
        }
    }
}

impl Invoker for LocalExecutor {
    fn invoke(&self, inv: Invocation) -> Result<(), ExecutorError> {
        let def = self.task(&inv.task).ok_or_else(|| ExecutorError::UnknownTask(inv.task.clone()))?;
        if !self.accepted.lock().insert(inv.invocation_id.clone()) {
            self.stats.lock().duplicates_suppressed += 1;
            return Ok(());
        }
        self.stats.lock().executed += 1;
        self.log.lock().push(ExecutionRecord {
            invocation_id: inv.invocation_id.clone(),
            task: inv.task.clone(),
            subject: inv.subject.clone(),
            at: Instant::now(),
        });
        {
            let mut fl = self.inflight.lock();
            if fl.running >= self.pool_size {
                fl.queued.push_back((inv, def));
                return Ok(());
            }
            fl.running += 1;
        }
        self.start(inv, def);
        Ok(())
    }
}

pub fn standard_tasks() -> Vec<TaskDefinition> {
    vec![
        TaskDefinition::new("add3", TaskBehavior::Add(3.0)),
        TaskDefinition::new("inc", TaskBehavior::Add(1.0)),
        TaskDefinition::new("double", TaskBehavior::Mul(2.0)),
        TaskDefinition::new("echo", TaskBehavior::Echo),
        TaskDefinition::new("noop", TaskBehavior::Echo),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;

    struct ChannelPublisher(Mutex<mpsc::Sender<CloudEvent>>);

    impl Publisher for ChannelPublisher {
        fn publish(&self, _workflow: Option<&str>, event: CloudEvent) -> Result<(), String> {
            self.0.lock().send(event).map_err(|e| e.to_string())
        }
    }

    fn executor(seed: u64) -> (Arc<LocalExecutor>, mpsc::Receiver<CloudEvent>) {
        let (tx, rx) = mpsc::channel();
        let ex = LocalExecutor::new(Arc::new(ChannelPublisher(Mutex::new(tx))), seed).with_standard_tasks();
        (ex, rx)
    }

    #[test]
    fn add3_of_two_is_five() {
        let (ex, rx) = executor(1);
        ex.invoke(Invocation::new("add3", "reply", json!(2), "inv-1")).unwrap();
        let ev = rx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(ev.data, Some(json!(5)));
        assert_eq!(ev.id, "inv-1-term");
        assert_eq!(ev.subject(), "reply");
        assert_eq!(ev.event_type, TYPE_SUCCESS);
    }

    #[test]
    fn certain_failure_emits_failure_event() {
        let (ex, rx) = executor(1);
        ex.register(TaskDefinition::new("boom", TaskBehavior::Echo).with_failure_rate(1.0)).unwrap();
        ex.invoke(Invocation::new("boom", "r", json!(null), "x")).unwrap();
        let ev = rx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(ev.event_type, TYPE_FAILURE);
    }

    #[test]
    fn unknown_task_is_rejected_synchronously() {
        let (ex, _rx) = executor(1);
        assert_eq!(
            ex.invoke(Invocation::new("nope", "r", json!(null), "x")),
            Err(ExecutorError::UnknownTask("nope".into()))
        );
        assert!(ex.register(TaskDefinition::new("bad", TaskBehavior::Echo).with_failure_rate(1.5)).is_err());
    }

    #[test]
    fn repeated_invocation_id_runs_once() {
        let (ex, rx) = executor(1);
        for _ in 0..3 {
            ex.invoke(Invocation::new("echo", "r", json!(1), "same")).unwrap();
        }
        assert!(rx.recv_timeout(Duration::from_secs(1)).is_ok());
        assert!(rx.recv_timeout(Duration::from_millis(50)).is_err());
        assert_eq!(ex.stats().executed, 1);
        assert_eq!(ex.stats().duplicates_suppressed, 2);
    }

    #[test]
    fn map_of_2000_sleep_zero_delivers_all() {
        let (ex, rx) = executor(1);
        ex.register(TaskDefinition::new("sleep0", TaskBehavior::Sleep(Duration::ZERO))).unwrap();
        ex.invoke_map("sleep0", (0..2000).map(|i| json!(i)).collect(), "join", "m", None).unwrap();
        let ids: HashSet<String> = (0..2000).map(|_| rx.recv_timeout(Duration::from_secs(5)).unwrap().id).collect();
        assert_eq!(ids.len(), 2000);
        ex.invoke_map("sleep0", vec![], "join", "empty", None).unwrap();
        assert!(rx.recv_timeout(Duration::from_millis(30)).is_err());
    }

    #[test]
    fn seeded_no_response_matches_rng_expectation() {
        // The oracle replays the per-invocation RNG draw directly.
        let (ex, rx) = executor(42);
        ex.register(TaskDefinition::new("flaky", TaskBehavior::Echo).with_no_response_rate(0.3)).unwrap();
        let expected = (0..50)
            .filter(|i| {
                let mut rng = ex.rng_for(&format!("fm#{i}"));
                !rng.gen_bool(0.3)
            })
            .count();
        ex.invoke_map("flaky", (0..50).map(|i| json!(i)).collect(), "r", "fm", None).unwrap();
        let mut got = 0;
        while rx.recv_timeout(Duration::from_millis(100)).is_ok() {
            got += 1;
        }
        assert_eq!(got, expected);
        assert!((25..=45).contains(&got), "{got} responses from 50 at 30% loss");
    }

    #[test]
    fn latency_and_bounded_pool() {
        let (tx, rx) = mpsc::channel();
        let ex = LocalExecutor::with_pool(Arc::new(ChannelPublisher(Mutex::new(tx))), 3, 2);
        ex.register(TaskDefinition::new("s20", TaskBehavior::Sleep(Duration::from_millis(20)))).unwrap();
        let started = Instant::now();
        ex.invoke_map("s20", (0..4).map(|i| json!(i)).collect(), "r", "p", None).unwrap();
        for _ in 0..4 {
            rx.recv_timeout(Duration::from_secs(2)).unwrap();
        }
        // Two slots, four 20 ms tasks: two waves.
        assert!(started.elapsed() >= Duration::from_millis(40));
    }
}

//! Event-condition-action kernel: one instance per workflow, driven by a
//! single worker thread.
//!
//! The loop is poll → dedup → match → condition → action → checkpoint →
//! commit. Events produced by actions go to the front of the work queue so
//! a cascade finishes before the next bus record is looked at. Every event
//! that fires at least one trigger ends with a checkpoint of all changed
//! state followed by a bus commit, so a restart re-evaluates conditions but
//! never re-runs a checkpointed action.

pub mod action;
pub mod checkpoint;
pub mod condition;
pub mod ext;
pub mod trigger;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use action::{Action, ActionCtx, Command, Effects, Introspect, RecordingEffects, Runtime, Termination};
pub use checkpoint::{
    Checkpoint, CheckpointDelta, CheckpointError, CheckpointStore, FileCheckpointStore, KernelCounters, MemoryCheckpointStore,
    PendingItem,
};
pub use condition::{Condition, Verdict};
pub use ext::Extensions;
pub use trigger::{ActionSpec, ConditionSpec, Matcher, Spec, Trigger, TriggerContext};

use crate::bus::{BusError, DeadLetterQueue, EventBus, ParkReason, ParkedEvent, Record};
use crate::event::{CloudEvent, DedupIndex, DedupKey, TYPE_FAILURE, DEFAULT_DEDUP_CAPACITY};

pub const DEFAULT_CASCADE_LIMIT: u32 = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkflowStatus {
    Created,
    Running,
    Idle,
    Finished,
    Failed,
}

impl WorkflowStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, WorkflowStatus::Finished | WorkflowStatus::Failed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("invalid trigger {id:?}: {reason}")]
    InvalidTrigger { id: String, reason: String },
    #[error("duplicate trigger {0:?}")]
    DuplicateTrigger(String),
    #[error("unknown trigger {0:?}")]
    UnknownTrigger(String),
    #[error("selector {0} matches no trigger")]
    SelectorNotFound(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("worker killed at {0:?}")]
    Killed(FaultPoint),
}

/// Interception target selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    TriggerId(String),
    ConditionId(String),
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::TriggerId(id) => write!(f, "trigger {id:?}"),
            Selector::ConditionId(id) => write!(f, "condition {id:?}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub batch_size: usize,
    pub dedup_capacity: usize,
    pub cascade_limit: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { batch_size: DEFAULT_BATCH_SIZE, dedup_capacity: DEFAULT_DEDUP_CAPACITY, cascade_limit: DEFAULT_CASCADE_LIMIT }
    }
}

/// Crash-injection points, in loop order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    BeforeItem,
    AfterCondition,
    AfterAction,
    AfterCheckpoint,
    AfterCommit,
}

/// Kill the worker the `at`-th time (1-based) `point` is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    pub point: FaultPoint,
    pub at: u64,
}

#[derive(Clone)]
pub struct KernelDeps {
    pub bus: Arc<dyn EventBus>,
    pub store: Arc<dyn CheckpointStore>,
    pub effects: Arc<dyn Effects>,
    pub ext: Arc<Extensions>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryInfo {
    pub from_checkpoint: bool,
    pub corrupt_checkpoint: bool,
    pub skipped_records: u64,
}

enum WorkItem {
    Bus(Record),
    Sink { event: CloudEvent, depth: u32 },
    Replay(ParkedEvent),
}

struct Slot {
    trigger: Trigger,
    cond: Condition,
    action: Action,
}

struct View<'a> {
    slots: &'a [Slot],
    by_id: &'a HashMap<String, usize>,
    global: &'a Map<String, Value>,
}

impl Introspect for View<'_> {
    fn trigger(&self, id: &str) -> Option<&Trigger> {
        self.by_id.get(id).map(|&i| &self.slots[i].trigger)
    }

    fn global(&self) -> &Map<String, Value> {
        self.global
    }
}

pub struct Kernel {
    workflow: String,
    config: KernelConfig,
    deps: KernelDeps,
    slots: Vec<Slot>,
    by_id: HashMap<String, usize>,
    index: HashMap<String, Vec<usize>>,
    dedup: DedupIndex,
    dlq: DeadLetterQueue,
    queue: VecDeque<WorkItem>,
    next_offset: u64,
    processed_above: BTreeSet<u64>,
    committed: u64,
    status: WorkflowStatus,
    result: Option<Value>,
    global: Map<String, Value>,
    counters: KernelCounters,
    dirty: BTreeSet<usize>,
    dedup_added: Vec<DedupKey>,
    dlq_dirty: bool,
    global_dirty: bool,
    state_dirty: bool,
    touched: HashSet<usize>,
    structural: bool,
    fault: Option<FaultPlan>,
    fault_hits: HashMap<FaultPoint, u64>,
    recovery: RecoveryInfo,
}

impl Kernel {
    /// Opens the kernel for `workflow`, restoring the last checkpoint if one
    /// exists. `initial` triggers are registered when not already present.
    /// A corrupt checkpoint falls back to the initial triggers and a full
    /// replay of the event log from offset 0.
    pub fn open(workflow: &str, initial: Vec<Trigger>, deps: KernelDeps, config: KernelConfig) -> Result<Kernel, KernelError> {
        if !deps.bus.has_topic(workflow) {
            deps.bus.create_topic(workflow)?;
        }
        let mut k = Kernel {
            workflow: workflow.to_string(),
            dedup: DedupIndex::new(config.dedup_capacity),
            config,
            deps,
            slots: Vec::new(),
            by_id: HashMap::new(),
            index: HashMap::new(),
            dlq: DeadLetterQueue::default(),
            queue: VecDeque::new(),
            next_offset: 0,
            processed_above: BTreeSet::new(),
            committed: 0,
            status: WorkflowStatus::Running,
            result: None,
            global: Map::new(),
            counters: KernelCounters::default(),
            dirty: BTreeSet::new(),
            dedup_added: Vec::new(),
            dlq_dirty: false,
            global_dirty: false,
            state_dirty: false,
            touched: HashSet::new(),
            structural: false,
            fault: None,
            fault_hits: HashMap::new(),
            recovery: RecoveryInfo::default(),
        };
        let bus = k.deps.bus.clone();
        match k.deps.store.load(workflow) {
            Ok(Some(ck)) => {
                k.restore(ck)?;
                k.recovery.from_checkpoint = true;
                bus.reset_consumer(workflow)?;
                let committed = bus.committed(workflow)?;
                if k.next_offset > committed {
                    bus.seek(workflow, k.next_offset)?;
                    bus.commit(workflow, k.next_offset - 1)?;
                }
            }
            Ok(None) => bus.reset_consumer(workflow)?,
            Err(CheckpointError::Corrupt { reason, .. }) => {
                tracing::warn!(%workflow, %reason, "corrupt checkpoint, replaying the full event log");
                k.recovery.corrupt_checkpoint = true;
                bus.seek(workflow, 0)?;
                k.dlq_dirty = true;
                k.global_dirty = true;
            }
            Err(e) => return Err(e.into()),
        }
        k.committed = bus.committed(workflow)?;
        for t in initial {
            if !k.by_id.contains_key(&t.id) {
                k.register(t)?;
            }
        }
        k.structural = false;
        Ok(k)
    }

    fn restore(&mut self, ck: Checkpoint) -> Result<(), KernelError> {
        for t in ck.triggers {
            self.register(t)?;
        }
        self.dirty.clear();
        self.dedup = DedupIndex::from_keys(self.config.dedup_capacity, ck.dedup.keys().cloned());
        self.dlq = ck.dlq;
        self.next_offset = ck.next_offset;
        self.processed_above = ck.processed_above.into_iter().collect();
        self.status = ck.status;
        self.result = ck.result;
        self.global = ck.global_context;
        self.counters = ck.counters;
        for p in ck.pending {
            self.queue.push_back(match p {
                PendingItem::Sink { event, depth } => WorkItem::Sink { event, depth },
                PendingItem::Replay { entry } => WorkItem::Replay(entry),
            });
        }
        Ok(())
    }

    pub fn workflow(&self) -> &str {
        &self.workflow
    }

    pub fn status(&self) -> WorkflowStatus {
        self.status
    }

    pub fn result(&self) -> Option<&Value> {
        self.result.as_ref()
    }

    pub fn counters(&self) -> &KernelCounters {
        &self.counters
    }

    pub fn dlq(&self) -> &DeadLetterQueue {
        &self.dlq
    }

    pub fn global(&self) -> &Map<String, Value> {
        &self.global
    }

    pub fn recovery(&self) -> &RecoveryInfo {
        &self.recovery
    }

    pub fn committed_offset(&self) -> u64 {
        self.committed
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn trigger(&self, id: &str) -> Option<&Trigger> {
        self.by_id.get(id).map(|&i| &self.slots[i].trigger)
    }

    pub fn triggers(&self) -> impl Iterator<Item = &Trigger> {
        self.slots.iter().map(|s| &s.trigger)
    }

    pub fn trigger_count(&self) -> usize {
        self.slots.len()
    }

    pub fn set_fault(&mut self, plan: Option<FaultPlan>) {
        self.fault = plan;
        self.fault_hits.clear();
    }

    pub fn set_global(&mut self, key: &str, value: Value) {
        self.global.insert(key.to_string(), value);
        self.global_dirty = true;
    }

    /// Registers a trigger at run time and checkpoints it.
    pub fn add_trigger(&mut self, trigger: Trigger) -> Result<String, KernelError> {
        let id = trigger.id.clone();
        self.register(trigger)?;
        self.replay_dlq();
        self.checkpoint()?;
        Ok(id)
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> Result<(), KernelError> {
        let i = *self.by_id.get(id).ok_or_else(|| KernelError::UnknownTrigger(id.to_string()))?;
        self.slots[i].trigger.enabled = enabled;
        self.dirty.insert(i);
        self.touched.insert(i);
        self.replay_dlq();
        self.checkpoint()
    }

    /// Installs `interceptor` so it sees the events of every trigger
    /// selected, ahead of them. Returns the selected trigger ids.
    pub fn intercept(&mut self, selector: &Selector, mut interceptor: Trigger) -> Result<Vec<String>, KernelError> {
        let targets: Vec<String> = match selector {
            Selector::TriggerId(id) => if self.by_id.contains_key(id) { vec![id.clone()] } else { Default::default() },
            Selector::ConditionId(c) => self
                .slots
                .iter()
                .filter(|s| s.trigger.intercepts.is_empty() && s.trigger.condition_id() == c)
                .map(|s| s.trigger.id.clone())
                .collect(),
        };
        if targets.is_empty() {
            return Err(KernelError::SelectorNotFound(selector.to_string()));
        }
        interceptor.intercepts = targets.clone();
        self.add_trigger(interceptor)?;
        Ok(targets)
    }

    fn register(&mut self, mut trigger: Trigger) -> Result<(), KernelError> {
        let invalid = |reason: String| KernelError::InvalidTrigger { id: trigger.id.clone(), reason };
        if trigger.id.is_empty() {
            return Err(invalid("empty trigger id".into()));
        }
        if self.by_id.contains_key(&trigger.id) {
            return Err(KernelError::DuplicateTrigger(trigger.id));
        }
        if let Some(t) = trigger.intercepts.iter().find(|t| !self.by_id.contains_key(*t)) {
            return Err(invalid(format!("intercepted trigger {t:?} does not exist")));
        }
        let (cond, action) = compile_trigger(&trigger, &self.deps.ext)?;
        cond.init_context(&mut trigger.context);
        let i = self.slots.len();
        self.by_id.insert(trigger.id.clone(), i);
        self.slots.push(Slot { trigger, cond, action });
        self.index_slot(i);
        self.dirty.insert(i);
        self.structural = true;
        Ok(())
    }

    fn subjects_of(&self, i: usize) -> Vec<String> {
        let t = &self.slots[i].trigger;
        let mut subjects: Vec<String> = t.activation.iter().map(|m| m.subject.clone()).collect();
        for target in &t.intercepts {
            if let Some(&j) = self.by_id.get(target) {
                subjects.extend(self.slots[j].trigger.activation.iter().map(|m| m.subject.clone()));
            }
        }
        subjects
    }

    fn index_slot(&mut self, i: usize) {
        for subject in self.subjects_of(i) {
            let entries = self.index.entry(subject).or_default();
            if !entries.contains(&i) {
                entries.push(i);
                let slots = &self.slots;
                entries.sort_by_key(|&j| (slots[j].trigger.intercepts.is_empty(), j));
            }
        }
    }

    /// Interceptors of `target` must follow its activation set.
    fn reindex_interceptors_of(&mut self, target: &str) {
        let interceptors: Vec<usize> =
            (0..self.slots.len()).filter(|&j| self.slots[j].trigger.intercepts.iter().any(|t| t == target)).collect();
        for j in interceptors {
            self.index_slot(j);
        }
    }

    /// Own matchers first, then those inherited from intercepted triggers.
    fn matches(&self, i: usize, event: &CloudEvent) -> (bool, bool) {
        let t = &self.slots[i].trigger;
        let direct = t.activation.iter().any(|m| m.matches(event));
        let inherited = !direct
            && t.intercepts.iter().any(|target| {
                self.by_id.get(target).is_some_and(|&j| self.slots[j].trigger.activation.iter().any(|m| m.matches(event)))
            });
        (direct, inherited)
    }

    fn hit(&mut self, point: FaultPoint) -> Result<(), KernelError> {
        if let Some(plan) = self.fault {
            if plan.point == point {
                let n = self.fault_hits.entry(point).or_insert(0);
                *n += 1;
                if *n == plan.at {
                    tracing::info!(workflow = %self.workflow, ?point, "injected worker crash");
                    return Err(KernelError::Killed(point));
                }
            }
        }
        Ok(())
    }

    /// Polls one batch (if the queue is empty) and processes everything
    /// queued. Returns the number of items processed.
    pub fn step(&mut self, wait: Duration) -> Result<usize, KernelError> {
        if self.queue.is_empty() {
            let batch = self.deps.bus.poll(&self.workflow, self.config.batch_size, wait)?;
            self.queue.extend(batch.into_iter().map(WorkItem::Bus));
        }
        self.drain()
    }

    pub fn drain(&mut self) -> Result<usize, KernelError> {
        let mut n = 0;
        while let Some(item) = self.queue.pop_front() {
            self.process(item)?;
            n += 1;
        }
        self.flush()?;
        Ok(n)
    }

    /// Steps until `done` holds or `timeout` passes. True when `done` held.
    pub fn run_until(&mut self, timeout: Duration, mut done: impl FnMut(&Kernel) -> bool) -> Result<bool, KernelError> {
        let deadline = Instant::now() + timeout;
        loop {
            if done(self) {
                return Ok(true);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(false);
            }
            self.step((deadline - now).min(Duration::from_millis(20)))?;
        }
    }

    /// Processes until the bus has nothing more to deliver right now.
    pub fn run_until_quiet(&mut self, quiet: Duration) -> Result<(), KernelError> {
        while self.step(quiet)? > 0 {}
        Ok(())
    }

    /// Checkpoints whatever changed since the last checkpoint.
    pub fn flush(&mut self) -> Result<(), KernelError> {
        if self.has_changes() {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn has_changes(&self) -> bool {
        !self.dirty.is_empty()
            || !self.dedup_added.is_empty()
            || self.dlq_dirty
            || self.global_dirty
            || self.state_dirty
            || self.next_offset > self.committed
    }

    fn mark_offset(&mut self, offset: u64) {
        if offset == self.next_offset {
            self.next_offset += 1;
            while self.processed_above.remove(&self.next_offset) {
                self.next_offset += 1;
            }
        } else if offset > self.next_offset {
            self.processed_above.insert(offset);
        }
    }

    fn process(&mut self, item: WorkItem) -> Result<(), KernelError> {
        self.hit(FaultPoint::BeforeItem)?;
        let (event, depth, only) = match item {
            WorkItem::Bus(rec) => {
                if rec.offset < self.next_offset || self.processed_above.contains(&rec.offset) {
                    self.recovery.skipped_records += 1;
                    return Ok(());
                }
                self.mark_offset(rec.offset);
                match rec.decode() {
                    Ok(ev) => (ev, 0, None),
                    Err(e) => {
                        tracing::debug!(offset = rec.offset, error = %e, "malformed record");
                        let placeholder =
                            CloudEvent::new(format!("malformed-{}", rec.offset), "tf://bus", "", "event.triggerflow.malformed")
                                .with_data(json!({"raw": String::from_utf8_lossy(&rec.bytes), "error": e.to_string()}));
                        self.park(placeholder, ParkReason::Malformed, Vec::new(), 0);
                        return Ok(());
                    }
                }
            }
            WorkItem::Sink { event, depth } => (event, depth, None),
            WorkItem::Replay(entry) => {
                let only = (!entry.blocked_on.is_empty()).then(|| entry.blocked_on.clone());
                let generations = entry.generations;
                return self.route(entry.event, 0, only, generations);
            }
        };
        self.counters.events += 1;
        if !self.dedup.check_and_record(&event) {
            self.counters.duplicates += 1;
            return Ok(());
        }
        self.dedup_added.push(event.dedup_key());
        if depth > self.config.cascade_limit {
            tracing::warn!(workflow = %self.workflow, id = %event.id, "sink cascade limit reached");
            self.park(event, ParkReason::CascadeLimit, Vec::new(), 0);
            return Ok(());
        }
        self.route(event, depth, only, 0)
    }

    fn park(&mut self, event: CloudEvent, reason: ParkReason, blocked_on: Vec<String>, generations: u32) {
        self.counters.parked += 1;
        self.dlq.park_entry(ParkedEvent { event, reason, generations, blocked_on });
        self.dlq_dirty = true;
    }

    fn route(&mut self, event: CloudEvent, depth: u32, only: Option<Vec<String>>, generations: u32) -> Result<(), KernelError> {
        if self.status.is_terminal() {
            return Ok(());
        }
        let candidates = self.index.get(event.subject()).cloned().unwrap_or_default();
        let mut matched_any = false;
        let mut handled = false;
        let mut fired_any = false;
        let mut disabled = Vec::new();
        let mut deferred = Vec::new();
        let mut failed: Option<(String, String)> = None;
        for i in candidates {
            if let Some(only) = &only {
                if !only.contains(&self.slots[i].trigger.id) {
                    continue;
                }
            }
            let (direct, inherited) = self.matches(i, &event);
            if !direct && !inherited {
                continue;
            }
            matched_any = true;
            let slot = &mut self.slots[i];
            if !slot.trigger.enabled {
                disabled.push(slot.trigger.id.clone());
                continue;
            }
            if direct {
                handled = true;
            }
            let stateless = matches!(slot.cond, Condition::True { .. } | Condition::Predicate(_));
            let verdict = slot.cond.evaluate(&slot.trigger.condition, &mut slot.trigger.context, &event);
            if !stateless {
                self.dirty.insert(i);
            }
            match verdict {
                Ok(Verdict::Hold) => {}
                Ok(Verdict::Defer) => deferred.push(self.slots[i].trigger.id.clone()),
                Ok(Verdict::Fire) => {
                    self.hit(FaultPoint::AfterCondition)?;
                    self.fire(i, &event, depth)?;
                    fired_any = true;
                    handled = true;
                }
                Err(e) => {
                    tracing::debug!(trigger = %self.slots[i].trigger.id, error = %e, "condition failed");
                    failed = Some((self.slots[i].trigger.id.clone(), e));
                }
            }
            if matches!(self.slots[i].cond, Condition::SequenceGate { .. }) {
                self.touched.insert(i);
            }
        }
        if let Some((id, _)) = failed {
            self.park(event, ParkReason::MalformedConditionInput, vec![id], generations);
        } else if !deferred.is_empty() {
            self.park(event, ParkReason::OutOfSequence, deferred, generations);
        } else if !handled {
            if matched_any {
                self.park(event, ParkReason::TriggerDisabled, disabled, generations);
            } else {
                self.park(event, ParkReason::NoMatchingTrigger, Vec::new(), generations);
            }
        }
        if fired_any || self.structural || !self.touched.is_empty() {
            self.replay_dlq();
        }
        if fired_any {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn fire(&mut self, i: usize, event: &CloudEvent, depth: u32) -> Result<(), KernelError> {
        let fire_index = self.slots[i].trigger.fired;
        self.slots[i].trigger.fired += 1;
        self.counters.fires += 1;
        let transient = self.slots[i].trigger.transient;
        if transient {
            self.slots[i].trigger.enabled = false;
        }
        self.dirty.insert(i);
        self.touched.insert(i);
        let mut ctx = std::mem::take(&mut self.slots[i].trigger.context);
        let outcome = {
            let view = View { slots: &self.slots, by_id: &self.by_id, global: &self.global };
            let slot = &self.slots[i];
            let mut actx =
                ActionCtx::new(&self.workflow, &slot.trigger.id, fire_index, event, &mut ctx, &slot.trigger.action.params, &view);
            slot.action.run(&mut actx).map(|()| actx.into_commands())
        };
        let slot = &mut self.slots[i];
        slot.cond.after_fire(&mut ctx, transient);
        slot.trigger.context = ctx;
        let trigger_id = slot.trigger.id.clone();
        match outcome {
            Ok(commands) => self.apply(&trigger_id, fire_index, commands, event, depth)?,
            Err(e) => {
                tracing::debug!(trigger = %trigger_id, error = %e, "action failed");
                self.counters.action_failures += 1;
                let failure = action::action_failure(&self.workflow, &trigger_id, fire_index, &e);
                self.queue.push_front(WorkItem::Sink { event: failure, depth: depth + 1 });
            }
        }
        self.hit(FaultPoint::AfterAction)
    }

    fn lookup(&self, id: &str) -> Result<usize, String> {
        self.by_id.get(id).copied().ok_or_else(|| format!("unknown trigger {id:?}"))
    }

    fn apply(&mut self, trigger_id: &str, fire_index: u64, commands: Vec<Command>, event: &CloudEvent, depth: u32) -> Result<(), KernelError> {
        let mut sink = Vec::new();
        let mut forced = Vec::new();
        let mut errors = Vec::new();
        for cmd in commands {
            let res: Result<(), String> = match cmd {
                Command::Emit(ev) => {
                    sink.push(ev);
                    Ok(())
                }
                Command::Invoke(inv) => {
                    self.counters.dispatched += 1;
                    let failure_subject = inv.subject.clone();
                    let failure_id = inv.termination_id();
                    match self.deps.effects.invoke(inv) {
                        Ok(()) => Ok(()),
                        Err(e) => {
                            sink.push(
                                CloudEvent::new(failure_id, format!("tf://{}", self.workflow), failure_subject, TYPE_FAILURE)
                                    .with_data(json!({"error": e.to_string()})),
                            );
                            Ok(())
                        }
                    }
                }
                Command::Schedule { delay, event } => {
                    self.deps.effects.schedule(&self.workflow, delay, event);
                    Ok(())
                }
                Command::AddTrigger(t) => {
                    if self.by_id.contains_key(&t.id) {
                        // Re-executed action after recovery: registration is idempotent by id.
                        Ok(())
                    } else {
                        self.register(t).map_err(|e| e.to_string())
                    }
                }
                Command::SetEnabled { trigger, enabled } => self.lookup(&trigger).map(|j| {
                    self.slots[j].trigger.enabled = enabled;
                    self.dirty.insert(j);
                    self.touched.insert(j);
                }),
                Command::SetContext { trigger, key, value } => self.lookup(&trigger).map(|j| {
                    self.slots[j].trigger.context.set(&key, value);
                    self.dirty.insert(j);
                    self.touched.insert(j);
                }),
                Command::ResolveMapJoin { trigger, source, n } => self.lookup(&trigger).and_then(|j| {
                    let slot = &mut self.slots[j];
                    condition::resolve_map_join(&slot.cond, &mut slot.trigger.context, source.as_deref(), n)?;
                    self.dirty.insert(j);
                    self.touched.insert(j);
                    Ok(())
                }),
                Command::AddActivation { trigger, matcher } => self.lookup(&trigger).map(|j| {
                    let acts = &mut self.slots[j].trigger.activation;
                    if !acts.contains(&matcher) {
                        acts.push(matcher);
                        self.index_slot(j);
                        self.reindex_interceptors_of(&trigger);
                        self.structural = true;
                    }
                    self.dirty.insert(j);
                }),
                Command::ForceFire { trigger } => self.lookup(&trigger).map(|j| forced.push(j)),
                Command::SetGlobal { key, value } => {
                    self.global.insert(key, value);
                    self.global_dirty = true;
                    Ok(())
                }
                Command::Terminate { status, result } => {
                    self.status = match status {
                        Termination::Finished => WorkflowStatus::Finished,
                        Termination::Failed => WorkflowStatus::Failed,
                    };
                    self.result = Some(result);
                    self.state_dirty = true;
                    tracing::info!(workflow = %self.workflow, status = ?self.status, "workflow terminated");
                    Ok(())
                }
            };
            if let Err(e) = res {
                errors.push(e);
            }
        }
        if !errors.is_empty() {
            self.counters.action_failures += 1;
            sink.push(action::action_failure(&self.workflow, trigger_id, fire_index, &errors.join("; ")));
        }
        for ev in sink.into_iter().rev() {
            self.queue.push_front(WorkItem::Sink { event: ev, depth: depth + 1 });
        }
        for j in forced {
            if self.slots[j].trigger.enabled && !self.status.is_terminal() {
                self.fire(j, event, depth + 1)?;
            }
        }
        Ok(())
    }

    /// Re-queues parked events that the latest state change may unblock.
    fn replay_dlq(&mut self) {
        let structural = std::mem::take(&mut self.structural);
        let touched: HashSet<&str> = self.touched.drain().map(|i| self.slots[i].trigger.id.as_str()).collect();
        if self.dlq.is_empty() {
            return;
        }
        let taken = self.dlq.replay_where(|e| match e.reason {
            ParkReason::NoMatchingTrigger => structural,
            ParkReason::TriggerDisabled | ParkReason::OutOfSequence | ParkReason::MalformedConditionInput => {
                structural || e.blocked_on.iter().any(|id| touched.contains(id.as_str()))
            }
            ParkReason::Malformed | ParkReason::CascadeLimit => false,
        });
        if taken.is_empty() {
            return;
        }
        let taken: Vec<ParkedEvent> = taken
            .into_iter()
            .map(|mut e| {
                // A disabled-trigger park may now be routable anywhere.
                if structural && e.reason == ParkReason::TriggerDisabled {
                    e.blocked_on.clear();
                }
                e
            })
            .collect();
        self.dlq_dirty = true;
        self.queue.extend(taken.into_iter().map(WorkItem::Replay));
    }

    fn checkpoint(&mut self) -> Result<(), KernelError> {
        let pending = self
            .queue
            .iter()
            .filter_map(|item| match item {
                WorkItem::Bus(_) => None,
                WorkItem::Sink { event, depth } => Some(PendingItem::Sink { event: event.clone(), depth: *depth }),
                WorkItem::Replay(entry) => Some(PendingItem::Replay { entry: entry.clone() }),
            })
            .collect();
        let delta = CheckpointDelta {
            workflow: self.workflow.clone(),
            dedup_capacity: self.config.dedup_capacity,
            triggers: std::mem::take(&mut self.dirty).into_iter().map(|i| self.slots[i].trigger.clone()).collect(),
            dedup_added: std::mem::take(&mut self.dedup_added),
            dlq: self.dlq_dirty.then(|| self.dlq.clone()),
            global_context: self.global_dirty.then(|| self.global.clone()),
            next_offset: self.next_offset,
            processed_above: self.processed_above.iter().copied().collect(),
            pending,
            status: self.status,
            result: self.result.clone(),
            counters: self.counters.clone(),
        };
        self.deps.store.commit(delta)?;
        if self.dlq_dirty {
            if let Err(e) = self.deps.bus.store_dlq(&self.workflow, &self.dlq) {
                tracing::warn!(workflow = %self.workflow, error = %e, "dlq mirror not written");
            }
        }
        self.dlq_dirty = false;
        self.global_dirty = false;
        self.state_dirty = false;
        self.hit(FaultPoint::AfterCheckpoint)?;
        if self.next_offset > self.committed {
            self.deps.bus.commit(&self.workflow, self.next_offset - 1)?;
            self.committed = self.next_offset;
        }
        self.hit(FaultPoint::AfterCommit)
    }

    pub fn state(&self, trigger: Option<&str>) -> Result<Value, KernelError> {
        let triggers: Vec<&Trigger> = self.triggers().collect();
        StateDoc {
            workflow: &self.workflow,
            status: self.status,
            triggers: &triggers,
            dlq: &self.dlq,
            committed_offset: self.committed,
            result: self.result.as_ref(),
            global: &self.global,
            counters: &self.counters,
        }
        .render(trigger)
    }
}

fn compile_trigger(trigger: &Trigger, ext: &Extensions) -> Result<(Condition, Action), KernelError> {
    let invalid = |reason: String| KernelError::InvalidTrigger { id: trigger.id.clone(), reason };
    if trigger.id.is_empty() {
        return Err(invalid("empty trigger id".into()));
    }
    if trigger.activation.is_empty() {
        return Err(invalid("no activation events".into()));
    }
    let cond = Condition::compile(&trigger.condition, ext).map_err(invalid)?;
    let action = Action::compile(&trigger.action, ext).map_err(invalid)?;
    Ok((cond, action))
}

/// Checks that a trigger's condition and action kinds exist and their
/// parameters are well formed.
pub fn validate_trigger(trigger: &Trigger, ext: &Extensions) -> Result<(), KernelError> {
    compile_trigger(trigger, ext).map(|_| ())
}

/// State document shared by live kernels and persisted checkpoints.
pub struct StateDoc<'a> {
    pub workflow: &'a str,
    pub status: WorkflowStatus,
    pub triggers: &'a [&'a Trigger],
    pub dlq: &'a DeadLetterQueue,
    pub committed_offset: u64,
    pub result: Option<&'a Value>,
    pub global: &'a Map<String, Value>,
    pub counters: &'a KernelCounters,
}

impl StateDoc<'_> {
    pub fn render(&self, trigger: Option<&str>) -> Result<Value, KernelError> {
        if let Some(id) = trigger {
            let t = self.triggers.iter().find(|t| t.id == id).ok_or_else(|| KernelError::UnknownTrigger(id.to_string()))?;
            return Ok(t.summary());
        }
        Ok(json!({
            "workflow": self.workflow,
            "status": self.status,
            "committed_offset": self.committed_offset,
            "dlq_depth": self.dlq.len(),
            "poisoned": self.dlq.poisoned().len(),
            "result": self.result,
            "global_context": self.global,
            "counters": self.counters,
            "triggers": self.triggers.iter().map(|t| t.summary()).collect::<Vec<_>>(),
        }))
    }
}

#[cfg(test)]
mod tests;

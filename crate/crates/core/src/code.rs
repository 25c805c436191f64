//! Workflow-as-code. An orchestration program runs inside the
//! `orchestrator-replay` action and is re-executed from the top on every
//! wake-up. Steps already recorded in the replay log resolve instantly; the
//! first awaited step without a result suspends the program.
//!
//! Steps are numbered in issue order. A `call_async` step replies on
//! `step/<k>`; a transient trigger of the same id turns the termination into
//! a `code.wake` event for the orchestrator. A `map` step uses a counter-join
//! on `step/<k>` instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::event::{CloudEvent, TYPE_FAILURE, TYPE_SUCCESS};
use crate::kernel::action::{ActionCtx, Termination};
use crate::kernel::trigger::{Matcher, Spec};
use crate::kernel::{Extensions, Trigger};

pub const ORCHESTRATOR_ID: &str = "orchestrator";
pub const START_SUBJECT: &str = "code.start";
pub const WAKE_SUBJECT: &str = "code.wake";

pub type ProgramFn = dyn Fn(&mut Orchestration, Value) -> Result<Value, StepError> + Send + Sync;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    /// Awaited step has no result yet. Programs propagate this with `?`.
    #[error("suspended at step {0}")]
    Suspended(usize),
    #[error("step {step} failed: {error}")]
    TaskFailed { step: usize, error: Value },
    #[error("NondeterminismDetected at step {step}: log has {logged}, program issued {issued}")]
    NondeterminismDetected { step: usize, logged: String, issued: String },
    #[error("{0}")]
    Program(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Call,
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: StepKind,
    pub task: String,
    pub n: usize,
}

impl StepRecord {
    fn describe(&self) -> String {
        match self.kind {
            StepKind::Call => format!("call_async({})", self.task),
            StepKind::Map => format!("map({}, {} items)", self.task, self.n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub ok: bool,
    pub value: Value,
}

/// Issued steps and the results received so far. Append-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub issued: Vec<StepRecord>,
    pub results: BTreeMap<usize, StepResult>,
}

impl ReplayLog {
    /// Records a result once; later deliveries of the same step are ignored.
    pub fn resolve(&mut self, step: usize, result: StepResult) -> bool {
        if self.results.contains_key(&step) {
            return false;
        }
        self.results.insert(step, result);
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Future {
    pub step: usize,
    /// Position within a map step.
    pub item: Option<usize>,
}

/// A step issued for the first time during this replay.
#[derive(Debug, Clone, PartialEq)]
pub struct NewStep {
    pub step: usize,
    pub record: StepRecord,
    pub args: Vec<Value>,
}

pub struct Orchestration<'a> {
    log: &'a ReplayLog,
    cursor: usize,
    new_steps: Vec<NewStep>,
    /// Results for empty maps, which resolve at issue time.
    immediate: BTreeMap<usize, StepResult>,
    error: Option<StepError>,
}

impl<'a> Orchestration<'a> {
    fn new(log: &'a ReplayLog) -> Self {
        Orchestration { log, cursor: 0, new_steps: Vec::new(), immediate: BTreeMap::new(), error: None }
    }

    fn issue(&mut self, record: StepRecord, args: Vec<Value>) -> usize {
        let step = self.cursor;
        self.cursor += 1;
        match self.log.issued.get(step) {
            Some(logged) if *logged != record => {
                self.error.get_or_insert(StepError::NondeterminismDetected {
                    step,
                    logged: logged.describe(),
                    issued: record.describe(),
                });
            }
            Some(_) => {}
            None => {
                if record.kind == StepKind::Map && record.n == 0 {
                    self.immediate.insert(step, StepResult { ok: true, value: json!([]) });
                }
                self.new_steps.push(NewStep { step, record, args });
            }
        }
        step
    }

    pub fn call_async(&mut self, task: &str, arg: Value) -> Future {
        let step = self.issue(StepRecord { kind: StepKind::Call, task: task.to_string(), n: 1 }, vec![arg]);
        Future { step, item: None }
    }

    pub fn map(&mut self, task: &str, args: Vec<Value>) -> Vec<Future> {
        let n = args.len();
        let step = self.issue(StepRecord { kind: StepKind::Map, task: task.to_string(), n }, args);
        (0..n).map(|i| Future { step, item: Some(i) }).collect()
    }

    fn lookup(&self, step: usize) -> Option<&StepResult> {
        self.log.results.get(&step).or_else(|| self.immediate.get(&step))
    }

    pub fn result(&mut self, future: &Future) -> Result<Value, StepError> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        let r = self.lookup(future.step).ok_or(StepError::Suspended(future.step))?;
        if !r.ok {
            return Err(StepError::TaskFailed { step: future.step, error: r.value.clone() });
        }
        Ok(match future.item {
            Some(i) => r.value.get(i).cloned().unwrap_or(Value::Null),
            None => r.value.clone(),
        })
    }

    /// Awaits a whole map step. Empty input resolves to an empty list.
    pub fn results(&mut self, futures: &[Future]) -> Result<Vec<Value>, StepError> {
        futures.iter().map(|f| self.result(f)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    Suspended { step: usize, new_steps: Vec<NewStep> },
    Completed { value: Value, new_steps: Vec<NewStep> },
    Failed { error: StepError, new_steps: Vec<NewStep> },
}

/// Re-runs `program` against `log` without side effects.
pub fn replay(program: &ProgramFn, input: Value, log: &ReplayLog) -> ReplayOutcome {
    let mut o = Orchestration::new(log);
    let out = program(&mut o, input);
    let new_steps = std::mem::take(&mut o.new_steps);
    if let Some(error) = o.error.take() {
        return ReplayOutcome::Failed { error, new_steps };
    }
    match out {
        Ok(value) => ReplayOutcome::Completed { value, new_steps },
        Err(StepError::Suspended(step)) => ReplayOutcome::Suspended { step, new_steps },
        Err(error) => ReplayOutcome::Failed { error, new_steps },
    }
}

pub fn step_subject(step: usize) -> String {
    format!("step/{step}")
}

/// The persistent trigger that hosts `program`.
pub fn orchestrator(program: &str) -> Trigger {
    Trigger::new(
        ORCHESTRATOR_ID,
        vec![Matcher::success(START_SUBJECT), Matcher::success(WAKE_SUBJECT)],
        Spec::new("true"),
        Spec::new("orchestrator-replay").with("program", json!(program)),
    )
}

pub fn start_event(run_id: &str, input: Value) -> CloudEvent {
    CloudEvent::success(format!("{run_id}/start"), "tf://client", START_SUBJECT, input)
}

fn load_log(ctx: &ActionCtx<'_>) -> Result<ReplayLog, String> {
    match ctx.context.get("log") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("corrupt replay log: {e}")),
        None => Ok(ReplayLog::default()),
    }
}

/// Body of the `orchestrator-replay` action.
pub fn replay_action(ctx: &mut ActionCtx<'_>, _program: &str, f: &ProgramFn) -> Result<(), String> {
    let mut log = load_log(ctx)?;
    let data = ctx.event_data();
    if ctx.event.subject() == START_SUBJECT {
        if ctx.context.get("input").is_some() {
            return Ok(());
        }
        ctx.context.set("input", data);
    } else {
        let step = data.get("step").and_then(Value::as_u64).ok_or("wake event without step")? as usize;
        let ok = data.get("ok").and_then(Value::as_bool).unwrap_or(false);
        if !log.resolve(step, StepResult { ok, value: data.get("value").cloned().unwrap_or(Value::Null) }) {
            return Ok(());
        }
    }
    let input = ctx.context.get("input").cloned().ok_or("wake before start")?;

    let outcome = replay(f, input, &log);
    let new_steps = match &outcome {
        ReplayOutcome::Suspended { new_steps, .. } | ReplayOutcome::Completed { new_steps, .. } | ReplayOutcome::Failed { new_steps, .. } => {
            new_steps.clone()
        }
    };
    if let ReplayOutcome::Failed { error: e @ StepError::NondeterminismDetected { .. }, .. } = &outcome {
        return Err(e.to_string());
    }
    for s in new_steps {
        let subject = step_subject(s.step);
        log.issued.push(s.record.clone());
        match s.record.kind {
            StepKind::Call => {
                let t = Trigger::new(
                    &subject,
                    vec![Matcher::success(&subject), Matcher::new(&subject, TYPE_FAILURE)],
                    Spec::new("true"),
                    Spec::new("code.resolve").with("step", json!(s.step)),
                );
                ctx.add_trigger(t.transient());
                let arg = s.args.into_iter().next().unwrap_or(Value::Null);
                ctx.invoke(&s.record.task, &subject, arg);
            }
            StepKind::Map if s.record.n == 0 => {
                log.resolve(s.step, StepResult { ok: true, value: json!([]) });
            }
            StepKind::Map => {
                let t = Trigger::new(
                    &subject,
                    vec![Matcher::success(&subject), Matcher::new(&subject, TYPE_FAILURE)],
                    Spec::new("counter-join").with("expected", json!(s.record.n)),
                    Spec::new("code.resolve").with("step", json!(s.step)).with("map", json!(true)),
                );
                ctx.add_trigger(t.transient());
                ctx.invoke_map(&s.record.task, &subject, s.args);
            }
        }
    }
    ctx.context.set("log", serde_json::to_value(&log).map_err(|e| e.to_string())?);

    match outcome {
        ReplayOutcome::Suspended { step, .. } => ctx.context.set("suspended_at", json!(step)),
        ReplayOutcome::Completed { value, .. } => ctx.terminate(Termination::Finished, value),
        ReplayOutcome::Failed { error, .. } => ctx.terminate(Termination::Failed, json!({"error": error.to_string()})),
    }
    Ok(())
}

/// Forwards a step's termination (or joined map results) to the orchestrator.
fn resolve_step(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let step = ctx.param("step").and_then(Value::as_u64).ok_or("missing step")?;
    let (ok, value) = if ctx.param("map").and_then(Value::as_bool).unwrap_or(false) {
        // A failed instance marks the whole map; its payload stays in place.
        (!ctx.context.any_failed(), ctx.context.results_value())
    } else {
        (ctx.event.event_type != TYPE_FAILURE, ctx.event_data())
    };
    ctx.emit(WAKE_SUBJECT, TYPE_SUCCESS, json!({"step": step, "ok": ok, "value": value}));
    Ok(())
}

/// `add3(2)`, then `add3` over `range(result)`.
pub fn add3_listing(o: &mut Orchestration, input: Value) -> Result<Value, StepError> {
    let arg = if input.is_null() { json!(2) } else { input };
    let f = o.call_async("add3", arg);
    let result = o.result(&f)?;
    let n = result.as_u64().ok_or_else(|| StepError::Program(format!("expected a count, got {result}")))?;
    let futures = o.map("add3", (0..n).map(|i| json!(i)).collect());
    let mapped = o.results(&futures)?;
    Ok(json!({"result": result, "map": mapped}))
}

/// Registers the resolver action and the bundled example programs.
pub fn register_examples(ext: &mut Extensions) {
    ext.register_action("code.resolve", resolve_step);
    ext.register_program("add3-listing", add3_listing);
}

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::ext::{ActionFn, Extensions};
use super::trigger::{ActionSpec, Matcher, Trigger, TriggerContext};
use crate::code::ProgramFn;
use crate::event::{CloudEvent, EXT_EMPTY_JOIN, EXT_INDEX, EXT_WORKFLOW, TYPE_FAILURE, TYPE_SUCCESS};
use crate::executor::{ExecutorError, Invocation, Invoker};
use crate::timer::TimerService;

/// Side effects the kernel hands to the outside world. Both survive a
/// worker being dropped: completions come back as bus events.
pub trait Effects: Send + Sync {
    fn invoke(&self, invocation: Invocation) -> Result<(), ExecutorError>;
    fn schedule(&self, workflow: &str, delay: Duration, event: CloudEvent);
}

/// Executor plus timer source.
pub struct Runtime {
    pub invoker: Arc<dyn Invoker>,
    pub timers: Arc<TimerService>,
}

impl Effects for Runtime {
    fn invoke(&self, invocation: Invocation) -> Result<(), ExecutorError> {
        self.invoker.invoke(invocation)
    }

    fn schedule(&self, workflow: &str, delay: Duration, event: CloudEvent) {
        self.timers.schedule(workflow, delay, event)
    }
}

/// Collects effects instead of performing them.
#[derive(Default)]
pub struct RecordingEffects {
    pub invocations: Mutex<Vec<Invocation>>,
    pub scheduled: Mutex<Vec<(String, Duration, CloudEvent)>>,
}

impl Effects for RecordingEffects {
    fn invoke(&self, invocation: Invocation) -> Result<(), ExecutorError> {
        self.invocations.lock().push(invocation);
        Ok(())
    }

    fn schedule(&self, workflow: &str, delay: Duration, event: CloudEvent) {
        self.scheduled.lock().push((workflow.to_string(), delay, event));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Finished,
    Failed,
}

/// State changes requested by an action, applied by the kernel once the
/// action returns.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Emit(CloudEvent),
    Invoke(Invocation),
    Schedule { delay: Duration, event: CloudEvent },
    AddTrigger(Trigger),
    SetEnabled { trigger: String, enabled: bool },
    SetContext { trigger: String, key: String, value: Value },
    ResolveMapJoin { trigger: String, source: Option<String>, n: u64 },
    AddActivation { trigger: String, matcher: Matcher },
    ForceFire { trigger: String },
    SetGlobal { key: String, value: Value },
    Terminate { status: Termination, result: Value },
}

/// Read-only view of the workflow available to actions.
pub trait Introspect {
    fn trigger(&self, id: &str) -> Option<&Trigger>;
    fn global(&self) -> &Map<String, Value>;
}

pub struct ActionCtx<'a> {
    pub workflow: &'a str,
    pub trigger_id: &'a str,
    pub fire_index: u64,
    pub event: &'a CloudEvent,
    pub context: &'a mut TriggerContext,
    pub params: &'a Map<String, Value>,
    pub view: &'a dyn Introspect,
    commands: Vec<Command>,
    emitted: u32,
    invoked: u32,
}

impl<'a> ActionCtx<'a> {
    pub fn new(
        workflow: &'a str,
        trigger_id: &'a str,
        fire_index: u64,
        event: &'a CloudEvent,
        context: &'a mut TriggerContext,
        params: &'a Map<String, Value>,
        view: &'a dyn Introspect,
    ) -> Self {
        ActionCtx { workflow, trigger_id, fire_index, event, context, params, view, commands: Vec::new(), emitted: 0, invoked: 0 }
    }

    pub fn into_commands(self) -> Vec<Command> {
        self.commands
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    pub fn param(&self, key: &str) -> Option<&Value> {
        self.params.get(key).filter(|v| !v.is_null())
    }

    pub fn param_str(&self, key: &str) -> Result<&str, String> {
        self.param(key).and_then(Value::as_str).ok_or_else(|| format!("missing string param {key:?}"))
    }

    pub fn event_data(&self) -> Value {
        self.event.data.clone().unwrap_or(Value::Null)
    }

    /// Payload chosen by the `input` param: `event` (default), `results`
    /// (ordered join results) or `none`. A literal `payload` param wins.
    pub fn input(&self) -> Result<Value, String> {
        if let Some(p) = self.param("payload") {
            return Ok(p.clone());
        }
        match self.param("input").and_then(Value::as_str).unwrap_or("event") {
            "event" => Ok(self.event_data()),
            "results" => Ok(self.context.results_value()),
            "none" => Ok(Value::Null),
            other => Err(format!("unknown input selector {other:?}")),
        }
    }

    fn base_id(&self) -> String {
        format!("{}/{}/{}", self.workflow, self.trigger_id, self.fire_index)
    }

    pub fn source(&self) -> String {
        format!("tf://{}", self.workflow)
    }

    /// Builds an internal event with a deterministic id.
    pub fn make_event(&mut self, subject: &str, event_type: &str, data: Value) -> CloudEvent {
        let id = format!("{}/emit{}", self.base_id(), self.emitted);
        self.emitted += 1;
        CloudEvent::new(id, self.source(), subject, event_type)
            .with_data(data)
            .with_extension(EXT_WORKFLOW, json!(self.workflow))
    }

    pub fn emit(&mut self, subject: &str, event_type: &str, data: Value) {
        let ev = self.make_event(subject, event_type, data);
        self.commands.push(Command::Emit(ev));
    }

    pub fn emit_event(&mut self, event: CloudEvent) {
        self.commands.push(Command::Emit(event));
    }

    pub fn invoke(&mut self, task: &str, reply: &str, payload: Value) -> String {
        self.invoke_indexed(task, reply, payload, None)
    }

    /// Like [`invoke`](Self::invoke), tagging the invocation as one map instance.
    pub fn invoke_indexed(&mut self, task: &str, reply: &str, payload: Value, index: Option<u64>) -> String {
        let id = match self.invoked {
            0 => self.base_id(),
            k => format!("{}.{k}", self.base_id()),
        };
        self.invoked += 1;
        let mut inv = Invocation::new(task, reply, payload, id.clone()).for_workflow(self.workflow);
        inv.index = index;
        self.commands.push(Command::Invoke(inv));
        id
    }

    /// One invocation per item, ids `<base>#<i>`, each tagged with its index.
    pub fn invoke_map(&mut self, task: &str, reply: &str, items: Vec<Value>) {
        let base = match self.invoked {
            0 => self.base_id(),
            k => format!("{}.{k}", self.base_id()),
        };
        self.invoked += 1;
        for (i, item) in items.into_iter().enumerate() {
            let mut inv = Invocation::new(task, reply, item, format!("{base}#{i}")).for_workflow(self.workflow);
            inv.index = Some(i as u64);
            self.commands.push(Command::Invoke(inv));
        }
    }

    pub fn schedule(&mut self, delay: Duration, subject: &str, event_type: &str, data: Value) {
        let event = self.make_event(subject, event_type, data);
        self.commands.push(Command::Schedule { delay, event });
    }

    pub fn add_trigger(&mut self, trigger: Trigger) {
        self.commands.push(Command::AddTrigger(trigger));
    }

    pub fn set_enabled(&mut self, trigger: &str, enabled: bool) {
        self.commands.push(Command::SetEnabled { trigger: trigger.to_string(), enabled });
    }

    pub fn set_context(&mut self, trigger: &str, key: &str, value: Value) {
        self.commands.push(Command::SetContext { trigger: trigger.to_string(), key: key.to_string(), value });
    }

    pub fn resolve_map_join(&mut self, trigger: &str, source: Option<&str>, n: u64) {
        self.commands.push(Command::ResolveMapJoin { trigger: trigger.to_string(), source: source.map(str::to_string), n });
    }

    pub fn add_activation(&mut self, trigger: &str, matcher: Matcher) {
        self.commands.push(Command::AddActivation { trigger: trigger.to_string(), matcher });
    }

    pub fn force_fire(&mut self, trigger: &str) {
        self.commands.push(Command::ForceFire { trigger: trigger.to_string() });
    }

    pub fn set_global(&mut self, key: &str, value: Value) {
        self.commands.push(Command::SetGlobal { key: key.to_string(), value });
    }

    pub fn terminate(&mut self, status: Termination, result: Value) {
        self.commands.push(Command::Terminate { status, result });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    List,
    Sum,
    /// Element-wise mean of numeric vectors.
    Mean,
}

#[derive(Clone)]
pub enum Action {
    Noop,
    InvokeTask { task: String, reply: Option<String> },
    InvokeMap { task: String, reply: Option<String>, joins: Vec<String>, join_source: Option<String> },
    EmitEvent { subject: String, event_type: String },
    OrchestratorReplay { program: String, f: Arc<ProgramFn> },
    AggregateResults { subject: String, reducer: Reducer },
    TerminateWorkflow { status: Termination },
    /// Acts on the triggers this interceptor was attached to.
    Intercept(InterceptOp),
    Extension(Arc<ActionFn>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterceptOp {
    ForceFire,
    Disable,
    Enable,
    SetContext { key: String, value: Value },
}

fn str_list(v: Option<&Value>) -> Result<Vec<String>, String> {
    match v {
        None => Ok(Vec::new()),
        Some(Value::Array(a)) => a.iter().map(|s| s.as_str().map(str::to_string).ok_or("expected strings".to_string())).collect(),
        Some(_) => Err("expected an array of trigger ids".into()),
    }
}

impl Action {
    pub fn compile(spec: &ActionSpec, ext: &Extensions) -> Result<Action, String> {
        let p = |k: &str| spec.param(k);
        let s = |k: &str| p(k).and_then(Value::as_str).map(str::to_string);
        let required = |k: &str| s(k).ok_or_else(|| format!("{} needs string param {k:?}", spec.kind));
        if let Some(sel) = p("input") {
            if !matches!(sel.as_str(), Some("event" | "results" | "none")) {
                return Err(format!("bad input selector {sel}"));
            }
        }
        str_list(p("enable"))?;
        Ok(match spec.kind.as_str() {
            "noop" => Action::Noop,
            "invoke-task" => Action::InvokeTask { task: required("task")?, reply: s("reply") },
            "invoke-map" => {
                if let Some(items) = p("items") {
                    if !items.is_array() {
                        return Err("items must be an array".into());
                    }
                }
                Action::InvokeMap { task: required("task")?, reply: s("reply"), joins: str_list(p("joins"))?, join_source: s("join_source") }
            }
            "emit-event" => Action::EmitEvent { subject: required("subject")?, event_type: s("type").unwrap_or_else(|| TYPE_SUCCESS.into()) },
            "orchestrator-replay" => {
                let program = required("program")?;
                let f = ext.program(&program).ok_or_else(|| format!("unknown program {program:?}"))?;
                Action::OrchestratorReplay { program, f }
            }
            "aggregate-results" => {
                let reducer = match s("reducer").as_deref().unwrap_or("list") {
                    "list" => Reducer::List,
                    "sum" => Reducer::Sum,
                    "mean" => Reducer::Mean,
                    other => return Err(format!("unknown reducer {other:?}")),
                };
                Action::AggregateResults { subject: required("subject")?, reducer }
            }
            "terminate-workflow" => Action::TerminateWorkflow {
                status: match s("status").as_deref().unwrap_or("finished") {
                    "finished" => Termination::Finished,
                    "failed" => Termination::Failed,
                    other => return Err(format!("unknown status {other:?}")),
                },
            },
            "force-fire" => Action::Intercept(InterceptOp::ForceFire),
            "disable-target" => Action::Intercept(InterceptOp::Disable),
            "enable-target" => Action::Intercept(InterceptOp::Enable),
            "set-target-context" => Action::Intercept(InterceptOp::SetContext {
                key: required("key")?,
                value: p("value").cloned().unwrap_or(Value::Null),
            }),
            other => match ext.action(other) {
                Some(f) => Action::Extension(f),
                None => return Err(format!("unknown action kind {other:?}")),
            },
        })
    }

    pub fn run(&self, ctx: &mut ActionCtx<'_>) -> Result<(), String> {
        match self {
            Action::Noop => {}
            Action::InvokeTask { task, reply } => {
                let payload = ctx.input()?;
                ctx.context.set("last_input", payload.clone());
                let reply = reply.clone().unwrap_or_else(|| ctx.trigger_id.to_string());
                ctx.invoke(task, &reply, payload);
            }
            Action::InvokeMap { task, reply, joins, join_source } => {
                let items = match ctx.param("items") {
                    Some(Value::Array(items)) => items.clone(),
                    _ => iterable(ctx.input()?)?,
                };
                let reply = reply.clone().unwrap_or_else(|| ctx.trigger_id.to_string());
                let source = join_source.clone().unwrap_or_else(|| ctx.trigger_id.to_string());
                let n = items.len() as u64;
                for j in joins {
                    ctx.resolve_map_join(j, Some(&source), n);
                }
                ctx.context.set("map_size", json!(n));
                ctx.context.set("last_input", Value::Array(items.clone()));
                if n == 0 {
                    let marker = ctx.make_event(&reply, TYPE_SUCCESS, json!([])).with_extension(EXT_EMPTY_JOIN, json!(true));
                    ctx.emit_event(marker);
                }
                ctx.invoke_map(task, &reply, items);
            }
            Action::EmitEvent { subject, event_type } => {
                let data = ctx.input()?;
                ctx.emit(subject, event_type, data);
            }
            Action::OrchestratorReplay { program, f } => crate::code::replay_action(ctx, program, f.as_ref())?,
            Action::AggregateResults { subject, reducer } => {
                let ok: Vec<Value> = ctx.context.ordered_results().into_iter().filter(|r| r.ok).map(|r| r.data.clone()).collect();
                let failed = ctx.context.results.len() - ok.len();
                let value = reduce(*reducer, &ok)?;
                let data = json!({"trigger": ctx.trigger_id, "count": ok.len(), "failed": failed, "value": value});
                ctx.emit(subject, TYPE_SUCCESS, data);
            }
            Action::TerminateWorkflow { status } => {
                let result = ctx.input()?;
                ctx.terminate(*status, result);
            }
            Action::Intercept(op) => {
                let targets = match ctx.param("targets") {
                    Some(t) => str_list(Some(t))?,
                    None => ctx.view.trigger(ctx.trigger_id).map(|t| t.intercepts.clone()).unwrap_or_default(),
                };
                for target in &targets {
                    match op {
                        InterceptOp::ForceFire => ctx.force_fire(target),
                        InterceptOp::Disable => ctx.set_enabled(target, false),
                        InterceptOp::Enable => ctx.set_enabled(target, true),
                        InterceptOp::SetContext { key, value } => ctx.set_context(target, key, value.clone()),
                    }
                }
            }
            Action::Extension(f) => f(ctx)?,
        }
        for id in str_list(ctx.params.get("enable"))? {
            ctx.set_enabled(&id, true);
        }
        Ok(())
    }
}

/// Array items, or `0..n` for a non-negative integer.
pub fn iterable(v: Value) -> Result<Vec<Value>, String> {
    match v {
        Value::Array(items) => Ok(items),
        Value::Number(n) if n.as_u64().is_some() => Ok((0..n.as_u64().unwrap()).map(Value::from).collect()),
        other => Err(format!("map input is not iterable: {other}")),
    }
}

fn reduce(reducer: Reducer, values: &[Value]) -> Result<Value, String> {
    match reducer {
        Reducer::List => Ok(Value::Array(values.to_vec())),
        Reducer::Sum => Ok(json!(values.iter().filter_map(Value::as_f64).sum::<f64>())),
        Reducer::Mean => {
            let vectors: Vec<Vec<f64>> = values
                .iter()
                .map(|v| match v {
                    Value::Array(a) => a.iter().map(|x| x.as_f64().ok_or("non-numeric weight")).collect::<Result<Vec<_>, _>>(),
                    other => other.as_f64().map(|x| vec![x]).ok_or("non-numeric weight"),
                })
                .collect::<Result<_, _>>()?;
            let Some(width) = vectors.first().map(Vec::len) else { return Ok(json!([])) };
            if vectors.iter().any(|v| v.len() != width) {
                return Err("weight vectors differ in length".into());
            }
            let n = vectors.len() as f64;
            Ok(json!((0..width).map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / n).collect::<Vec<_>>()))
        }
    }
}

/// Failure event reported when an action errors. Subject is the trigger id
/// so error-handling triggers can listen for it.
pub fn action_failure(workflow: &str, trigger_id: &str, fire_index: u64, error: &str) -> CloudEvent {
    CloudEvent::new(format!("{workflow}/{trigger_id}/{fire_index}/failure"), format!("tf://{workflow}"), trigger_id, TYPE_FAILURE)
        .with_data(json!({"error": error, "trigger": trigger_id}))
        .with_extension(EXT_WORKFLOW, json!(workflow))
}

/// Copies the index extension so joins downstream keep instance order.
pub fn with_index(event: CloudEvent, index: Option<u64>) -> CloudEvent {
    match index {
        Some(i) => event.with_extension(EXT_INDEX, json!(i)),
        None => event,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::trigger::Spec;

    struct NoView(Map<String, Value>);

    impl Introspect for NoView {
        fn trigger(&self, _id: &str) -> Option<&Trigger> {
            None
        }
        fn global(&self) -> &Map<String, Value> {
            &self.0
        }
    }

    fn run(spec: &Spec, event: &CloudEvent, ctx: &mut TriggerContext) -> Result<Vec<Command>, String> {
        let action = Action::compile(spec, &Extensions::default())?;
        let view = NoView(Map::new());
        let mut actx = ActionCtx::new("wf", "t", 0, event, ctx, &spec.params, &view);
        action.run(&mut actx)?;
        Ok(actx.into_commands())
    }

    #[test]
    fn emit_event_targets_subject() {
        let ev = CloudEvent::success("e", "s", "a", json!(4));
        let cmds = run(&Spec::new("emit-event").with("subject", json!("next")), &ev, &mut TriggerContext::default()).unwrap();
        let [Command::Emit(out)] = cmds.as_slice() else { panic!("{cmds:?}") };
        assert_eq!(out.subject(), "next");
        assert_eq!(out.data, Some(json!(4)));
        assert_eq!(out.id, "wf/t/0/emit0");
    }

    #[test]
    fn invoke_map_resolves_joins_and_marks_empty() {
        let ev = CloudEvent::success("e", "s", "a", json!([]));
        let spec = Spec::new("invoke-map").with("task", json!("inc")).with("joins", json!(["D"]));
        let cmds = run(&spec, &ev, &mut TriggerContext::default()).unwrap();
        assert_eq!(cmds.len(), 2);
        assert!(matches!(&cmds[0], Command::ResolveMapJoin { n: 0, .. }));
        let Command::Emit(marker) = &cmds[1] else { panic!() };
        assert!(marker.is_empty_join());

        let ev = CloudEvent::success("e", "s", "a", json!(3));
        let cmds = run(&spec, &ev, &mut TriggerContext::default()).unwrap();
        let ids: Vec<_> = cmds
            .iter()
            .filter_map(|c| match c {
                Command::Invoke(i) => Some((i.invocation_id.clone(), i.index, i.payload.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(ids, vec![("wf/t/0#0".into(), Some(0), json!(0)), ("wf/t/0#1".into(), Some(1), json!(1)), ("wf/t/0#2".into(), Some(2), json!(2))]);
    }

    #[test]
    fn mean_reducer_averages_vectors() {
        assert_eq!(reduce(Reducer::Mean, &[json!([1.0, 2.0]), json!([3.0, 4.0])]).unwrap(), json!([2.0, 3.0]));
        assert!(reduce(Reducer::Mean, &[json!([1.0]), json!([1.0, 2.0])]).is_err());
    }

    #[test]
    fn bad_action_specs_are_rejected() {
        let ext = Extensions::default();
        assert!(Action::compile(&Spec::new("invoke-task"), &ext).is_err());
        assert!(Action::compile(&Spec::new("launch"), &ext).is_err());
        assert!(Action::compile(&Spec::new("noop").with("input", json!("sideways")), &ext).is_err());
    }
}

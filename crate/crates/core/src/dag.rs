//! DAG workflows compiled to triggers.
//!
//! Every task becomes one transient trigger listening for the success events
//! of its upstream tasks, joined with a counter equal to its in-degree. Map
//! tasks learn their fan-out at run time and rewrite the expected count of
//! the joins they feed.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::event::{CloudEvent, TYPE_FAILURE, TYPE_SUCCESS};
use crate::kernel::action::{with_index, ActionCtx};
use crate::kernel::trigger::{Matcher, Spec};
use crate::kernel::{Extensions, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    InvokeTask,
    InvokeMap,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum ErrorPolicy {
    /// Re-invoke the failed task (or map instance) up to `attempts` times.
    Retry {
        #[serde(default = "one")]
        attempts: u32,
    },
    /// Report success with `value` in place of the failed output.
    Skip {
        #[serde(default)]
        value: Value,
    },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagTask {
    pub task_id: String,
    pub operator: Operator,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub downstream: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_error: Option<ErrorPolicy>,
}

impl DagTask {
    pub fn new(task_id: &str, operator: Operator) -> Self {
        DagTask { task_id: task_id.into(), operator, params: Map::new(), downstream: Vec::new(), on_error: None }
    }

    /// Invokes executor task `task`.
    pub fn invoke(task_id: &str, task: &str) -> Self {
        DagTask::new(task_id, Operator::InvokeTask).with_param("task", json!(task))
    }

    pub fn map(task_id: &str, task: &str) -> Self {
        DagTask::new(task_id, Operator::InvokeMap).with_param("task", json!(task))
    }

    pub fn with_param(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn then(mut self, downstream: &[&str]) -> Self {
        self.downstream.extend(downstream.iter().map(|s| s.to_string()));
        self
    }

    pub fn on_error(mut self, policy: ErrorPolicy) -> Self {
        self.on_error = Some(policy);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagSpec {
    pub dag_id: String,
    pub tasks: Vec<DagTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("cyclic dependency: {}", .0.join(" -> "))]
    CyclicDependency(Vec<String>),
    #[error("task {from:?} references unknown task {to:?}")]
    UnknownTask { from: String, to: String },
    #[error("duplicate task id {0:?}")]
    DuplicateTask(String),
    #[error("task id {0:?} collides with a generated trigger id")]
    ReservedId(String),
    #[error("task {task:?}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("dag has no tasks")]
    Empty,
    #[error("invalid dag document: {0}")]
    Parse(String),
}

impl DagSpec {
    pub fn new(dag_id: &str, tasks: Vec<DagTask>) -> Self {
        DagSpec { dag_id: dag_id.into(), tasks }
    }

    pub fn from_json(text: &str) -> Result<Self, DagError> {
        serde_json::from_str(text).map_err(|e| DagError::Parse(e.to_string()))
    }

    pub fn start_subject(&self) -> String {
        format!("{}.start", self.dag_id)
    }

    pub fn end_trigger_id(&self) -> String {
        format!("{}.end", self.dag_id)
    }

    /// The event that activates the root tasks.
    pub fn start_event(&self, input: Value) -> CloudEvent {
        CloudEvent::success(self.start_subject(), "tf://client", self.start_subject(), input)
    }

    /// Manually completes a halted task with `output`, as if it had
    /// succeeded. `index` addresses one instance of a map task.
    pub fn resume_event(&self, task_id: &str, output: Value, index: Option<u64>) -> CloudEvent {
        let id = match index {
            Some(i) => format!("{}/{task_id}#{i}/resume", self.dag_id),
            None => format!("{}/{task_id}/resume", self.dag_id),
        };
        with_index(CloudEvent::success(id, "tf://client", task_id, output), index)
    }

    fn task(&self, id: &str) -> Option<&DagTask> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    /// Upstream task ids, in declaration order.
    pub fn upstream(&self) -> HashMap<&str, Vec<&str>> {
        let mut up: HashMap<&str, Vec<&str>> = self.tasks.iter().map(|t| (t.task_id.as_str(), Vec::new())).collect();
        for t in &self.tasks {
            for d in &t.downstream {
                if let Some(list) = up.get_mut(d.as_str()) {
                    if !list.contains(&t.task_id.as_str()) {
                        list.push(&t.task_id);
                    }
                }
            }
        }
        up
    }

    pub fn validate(&self) -> Result<(), DagError> {
        if self.tasks.is_empty() {
            return Err(DagError::Empty);
        }
        let reserved = [self.start_subject(), self.end_trigger_id()];
        let mut seen = HashMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if seen.insert(t.task_id.as_str(), i).is_some() {
                return Err(DagError::DuplicateTask(t.task_id.clone()));
            }
            if reserved.contains(&t.task_id) || t.task_id.ends_with(".on_error") {
                return Err(DagError::ReservedId(t.task_id.clone()));
            }
            let invalid = |reason: &str| DagError::InvalidTask { task: t.task_id.clone(), reason: reason.into() };
            if t.operator != Operator::Noop && !t.params.get("task").is_some_and(Value::is_string) {
                return Err(invalid("invoke operators need a string \"task\" param"));
            }
            if matches!(t.on_error, Some(ErrorPolicy::Retry { attempts: 0 })) {
                return Err(invalid("retry needs at least one attempt"));
            }
        }
        for t in &self.tasks {
            if let Some(d) = t.downstream.iter().find(|d| !seen.contains_key(d.as_str())) {
                return Err(DagError::UnknownTask { from: t.task_id.clone(), to: d.clone() });
            }
        }
        match self.find_cycle(&seen) {
            Some(cycle) => Err(DagError::CyclicDependency(cycle)),
            None => Ok(()),
        }
    }

    fn find_cycle(&self, index: &HashMap<&str, usize>) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut marks = vec![Mark::New; self.tasks.len()];
        for root in 0..self.tasks.len() {
            if marks[root] != Mark::New {
                continue;
            }
            // Iterative DFS; `path` holds the active chain.
            let mut path = vec![root];
            let mut next_edge = vec![0usize];
            marks[root] = Mark::Active;
            while let Some(&u) = path.last() {
                let edge = next_edge.last_mut().expect("parallel stacks");
                match self.tasks[u].downstream.get(*edge) {
                    Some(d) => {
                        *edge += 1;
                        let v = index[d.as_str()];
                        match marks[v] {
                            Mark::Active => {
                                let from = path.iter().position(|&x| x == v).expect("active nodes are on the path");
                                return Some(path[from..].iter().map(|&x| self.tasks[x].task_id.clone()).collect());
                            }
                            Mark::New => {
                                marks[v] = Mark::Active;
                                path.push(v);
                                next_edge.push(0);
                            }
                            Mark::Done => {}
                        }
                    }
                    None => {
                        marks[u] = Mark::Done;
                        path.pop();
                        next_edge.pop();
                    }
                }
            }
        }
        None
    }

    pub fn compile(&self) -> Result<CompiledDag, DagError> {
        self.validate()?;
        let up = self.upstream();
        let is_map = |id: &str| self.task(id).is_some_and(|t| t.operator == Operator::InvokeMap);
        let end = self.end_trigger_id();
        let sinks: Vec<&str> = self.tasks.iter().filter(|t| t.downstream.is_empty()).map(|t| t.task_id.as_str()).collect();

        let mut triggers = Vec::new();
        for t in &self.tasks {
            let parents = &up[t.task_id.as_str()];
            let (activation, condition) = if parents.is_empty() {
                (vec![Matcher::success(self.start_subject())], Spec::new("true"))
            } else {
                (parents.iter().map(|p| Matcher::success(*p)).collect(), join_condition(parents, &is_map))
            };
            let mut action = Spec::new(match t.operator {
                Operator::InvokeTask => "invoke-task",
                Operator::InvokeMap => "invoke-map",
                Operator::Noop => "emit-event",
            });
            action.params = t.params.clone();
            if !action.params.contains_key("input") && !action.params.contains_key("payload") {
                let single = parents.len() <= 1 && !parents.iter().any(|p| is_map(p));
                action.params.insert("input".into(), json!(if single { "event" } else { "results" }));
            }
            match t.operator {
                Operator::Noop => {
                    action.params.insert("subject".into(), json!(t.task_id));
                }
                Operator::InvokeMap => {
                    let mut joins = t.downstream.clone();
                    if t.downstream.is_empty() {
                        joins.push(end.clone());
                    }
                    action.params.insert("joins".into(), json!(joins));
                }
                Operator::InvokeTask => {}
            }
            triggers.push(Trigger::new(&t.task_id, activation, condition, action).transient());
        }

        for t in &self.tasks {
            let Some(policy) = &t.on_error else { continue };
            let action = match policy {
                ErrorPolicy::Retry { attempts } => Spec::new("dag.retry")
                    .with("target", json!(t.task_id))
                    .with("task", t.params["task"].clone())
                    .with("attempts", json!(attempts)),
                ErrorPolicy::Skip { value } => Spec::new("dag.skip").with("target", json!(t.task_id)).with("value", value.clone()),
            };
            let id = format!("{}.on_error", t.task_id);
            triggers.push(Trigger::new(&id, vec![Matcher::new(&t.task_id, TYPE_FAILURE)], Spec::new("true"), action));
        }

        let single_sink = sinks.len() == 1 && !is_map(sinks[0]);
        let finish = Trigger::new(
            &end,
            sinks.iter().map(|s| Matcher::success(*s)).collect(),
            join_condition(&sinks, &is_map),
            Spec::new("terminate-workflow").with("input", json!(if single_sink { "event" } else { "results" })),
        )
        .transient();
        Ok(CompiledDag { dag_id: self.dag_id.clone(), triggers, finish, start_subject: self.start_subject() })
    }
}

fn join_condition(parents: &[&str], is_map: &dyn Fn(&str) -> bool) -> Spec {
    let maps: Vec<&str> = parents.iter().copied().filter(|p| is_map(p)).collect();
    let spec = Spec::new("counter-join").with("expected", json!(parents.len() - maps.len()));
    if maps.is_empty() {
        spec
    } else {
        spec.with("map_sources", json!(maps))
    }
}

#[derive(Debug, Clone)]
pub struct CompiledDag {
    pub dag_id: String,
    /// One trigger per task, then one per error-handled task.
    pub triggers: Vec<Trigger>,
    /// Terminates the workflow once every sink task has succeeded.
    pub finish: Trigger,
    pub start_subject: String,
}

impl CompiledDag {
    pub fn all_triggers(&self) -> Vec<Trigger> {
        let mut all = self.triggers.clone();
        all.push(self.finish.clone());
        all
    }
}

fn retry(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let target = ctx.param_str("target")?.to_string();
    let task = ctx.param_str("task")?.to_string();
    let max = ctx.param("attempts").and_then(Value::as_u64).ok_or("retry needs attempts")?;
    let index = ctx.event.index();
    let key = index.map_or_else(|| "task".to_string(), |i| i.to_string());
    let mut attempts: BTreeMap<String, u64> =
        ctx.context.get("attempts").map(|v| serde_json::from_value(v.clone())).transpose().map_err(|e| e.to_string())?.unwrap_or_default();
    let used = attempts.get(&key).copied().unwrap_or(0);
    if used >= max {
        tracing::warn!(workflow = ctx.workflow, task = %target, ?index, "retries exhausted, task halted");
        let mut halted = ctx.context.get("halted").and_then(Value::as_array).cloned().unwrap_or_default();
        halted.push(json!(key));
        ctx.context.set("halted", Value::Array(halted));
        return Ok(());
    }
    attempts.insert(key, used + 1);
    ctx.context.set("attempts", json!(attempts));
    let last = ctx.view.trigger(&target).and_then(|t| t.context.get("last_input")).cloned().unwrap_or(Value::Null);
    let payload = match index {
        Some(i) => last.get(i as usize).cloned().unwrap_or(Value::Null),
        None => last,
    };
    ctx.invoke_indexed(&task, &target, payload, index);
    Ok(())
}

fn skip(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let target = ctx.param_str("target")?.to_string();
    let value = ctx.param("value").cloned().unwrap_or(Value::Null);
    let index = ctx.event.index();
    let ev = ctx.make_event(&target, TYPE_SUCCESS, value);
    ctx.emit_event(with_index(ev, index));
    Ok(())
}

pub fn register(ext: &mut Extensions) {
    ext.register_action("dag.retry", retry);
    ext.register_action("dag.skip", skip);
}

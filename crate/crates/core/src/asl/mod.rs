//! A subset of the Amazon States Language compiled to triggers.
//!
//! Every state of a machine with tag `T` is entered by an event whose
//! subject is `T:<state>`. States hand their output to the next state's
//! entry subject, or to `T:$end` when they end the machine. Nested machines
//! (Parallel branches, Map iterations) get tags of the form
//! `T/<state>#<index>` and announce their end with an event whose subject is
//! their tag.

mod compile;
mod interpret;

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde_json::Value;

pub use compile::{compile, entry_subject, start_event, END_STATE};
pub use interpret::{interpret, Trace, TraceStatus};

use crate::kernel::Extensions;
use crate::predicate::{ChoiceRule, JsonPath};

/// Payloads larger than this must travel by reference.
pub const MAX_PAYLOAD_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid state machine at {path}: {reason}")]
pub struct AslValidation {
    pub path: String,
    pub reason: String,
}

fn invalid(path: &str, reason: impl Into<String>) -> AslValidation {
    AslValidation { path: path.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WaitFor {
    Seconds(f64),
    Timestamp(DateTime<Utc>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceBranch {
    pub rule: ChoiceRule,
    pub next: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateKind {
    Task { resource: String },
    Pass { result: Option<Value> },
    Choice { choices: Vec<ChoiceBranch>, default: Option<String> },
    Parallel { branches: Vec<StateMachine> },
    Map { iterator: Box<StateMachine>, items_path: JsonPath },
    Wait(WaitFor),
    Fail { error: Option<String>, cause: Option<String> },
    Succeed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    Next(String),
    End,
    /// Choice, Fail and Succeed carry no `Next`/`End`.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub kind: StateKind,
    pub transition: Transition,
}

impl State {
    pub fn type_name(&self) -> &'static str {
        match self.kind {
            StateKind::Task { .. } => "Task",
            StateKind::Pass { .. } => "Pass",
            StateKind::Choice { .. } => "Choice",
            StateKind::Parallel { .. } => "Parallel",
            StateKind::Map { .. } => "Map",
            StateKind::Wait(_) => "Wait",
            StateKind::Fail { .. } => "Fail",
            StateKind::Succeed => "Succeed",
        }
    }

    /// States reachable in one step.
    pub fn successors(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Transition::Next(n) = &self.transition {
            out.push(n.as_str());
        }
        if let StateKind::Choice { choices, default } = &self.kind {
            out.extend(choices.iter().map(|c| c.next.as_str()));
            out.extend(default.as_deref());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateMachine {
    pub start_at: String,
    pub states: IndexMap<String, State>,
    /// The document this machine was parsed from; Map iterators are
    /// recompiled from it at run time.
    pub source: Value,
}

impl StateMachine {
    pub fn parse(doc: &Value) -> Result<StateMachine, AslValidation> {
        parse_machine(doc, "$")
    }

    pub fn from_json(text: &str) -> Result<StateMachine, AslValidation> {
        let doc: Value = serde_json::from_str(text).map_err(|e| invalid("$", e.to_string()))?;
        Self::parse(&doc)
    }

    pub fn state(&self, name: &str) -> Option<&State> {
        self.states.get(name)
    }

    /// Branch machines of a Parallel state with their tags under `tag`.
    pub fn sub_machines<'a>(&'a self, tag: &str, state: &str) -> Vec<(String, &'a StateMachine)> {
        match self.states.get(state).map(|s| &s.kind) {
            Some(StateKind::Parallel { branches }) => {
                branches.iter().enumerate().map(|(i, m)| (sub_tag(tag, state, i), m)).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Total number of states, nested machines included.
    pub fn state_count(&self) -> usize {
        self.states
            .values()
            .map(|s| {
                1 + match &s.kind {
                    StateKind::Parallel { branches } => branches.iter().map(StateMachine::state_count).sum(),
                    StateKind::Map { iterator, .. } => iterator.state_count(),
                    _ => 0,
                }
            })
            .sum()
    }
}

/// Tag of nested machine `index` spawned by `state` in machine `tag`.
pub fn sub_tag(tag: &str, state: &str, index: usize) -> String {
    format!("{tag}/{state}#{index}")
}

fn parse_machine(doc: &Value, path: &str) -> Result<StateMachine, AslValidation> {
    let obj = doc.as_object().ok_or_else(|| invalid(path, "state machine must be an object"))?;
    let start_at = obj.get("StartAt").and_then(Value::as_str).ok_or_else(|| invalid(path, "missing StartAt"))?.to_string();
    let raw_states = obj.get("States").and_then(Value::as_object).ok_or_else(|| invalid(path, "missing States"))?;
    if raw_states.is_empty() {
        return Err(invalid(path, "States is empty"));
    }
    let mut states = IndexMap::new();
    for (name, raw) in raw_states {
        if name.is_empty() || name.contains([':', '/', '#']) {
            return Err(invalid(path, format!("state name {name:?} may not be empty or contain ':', '/' or '#'")));
        }
        let spath = format!("{path}.States.{name}");
        states.insert(name.clone(), parse_state(raw, &spath)?);
    }
    let machine = StateMachine { start_at, states, source: doc.clone() };
    check_graph(&machine, path)?;
    Ok(machine)
}

/// Rejected rather than ignored, since ignoring them would change results.
const UNSUPPORTED_FIELDS: &[&str] = &["InputPath", "OutputPath", "ResultPath", "Parameters", "ResultSelector", "Retry", "Catch"];

fn parse_state(raw: &Value, path: &str) -> Result<State, AslValidation> {
    let obj = raw.as_object().ok_or_else(|| invalid(path, "state must be an object"))?;
    let ty = obj.get("Type").and_then(Value::as_str).ok_or_else(|| invalid(path, "missing Type"))?;
    if let Some(field) = UNSUPPORTED_FIELDS.iter().find(|f| obj.contains_key(**f)) {
        return Err(invalid(path, format!("{field} is not supported")));
    }
    let str_field = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string);
    let kind = match ty {
        "Task" => {
            let resource = str_field("Resource").ok_or_else(|| invalid(path, "Task needs Resource"))?;
            StateKind::Task { resource: task_name(&resource).to_string() }
        }
        "Pass" => StateKind::Pass { result: obj.get("Result").cloned() },
        "Choice" => {
            let list = obj.get("Choices").and_then(Value::as_array).filter(|c| !c.is_empty());
            let list = list.ok_or_else(|| invalid(path, "Choice needs a non-empty Choices list"))?;
            let mut choices = Vec::new();
            for (i, c) in list.iter().enumerate() {
                let cpath = format!("{path}.Choices[{i}]");
                let next = c.get("Next").and_then(Value::as_str).ok_or_else(|| invalid(&cpath, "choice needs Next"))?;
                let rule = ChoiceRule::from_json(c).map_err(|e| invalid(&cpath, e.0))?;
                choices.push(ChoiceBranch { rule, next: next.to_string() });
            }
            StateKind::Choice { choices, default: str_field("Default") }
        }
        "Parallel" => {
            let list = obj.get("Branches").and_then(Value::as_array).filter(|b| !b.is_empty());
            let list = list.ok_or_else(|| invalid(path, "Parallel needs a non-empty Branches list"))?;
            let branches = list
                .iter()
                .enumerate()
                .map(|(i, b)| parse_machine(b, &format!("{path}.Branches[{i}]")))
                .collect::<Result<_, _>>()?;
            StateKind::Parallel { branches }
        }
        "Map" => {
            let it = obj.get("Iterator").or_else(|| obj.get("ItemProcessor")).ok_or_else(|| invalid(path, "Map needs Iterator"))?;
            let iterator = Box::new(parse_machine(it, &format!("{path}.Iterator"))?);
            let items_path = JsonPath::parse(obj.get("ItemsPath").and_then(Value::as_str).unwrap_or("$")).map_err(|e| invalid(path, e.0))?;
            StateKind::Map { iterator, items_path }
        }
        "Wait" => {
            let wait = match (obj.get("Seconds"), obj.get("Timestamp")) {
                (Some(s), None) => {
                    let secs = s.as_f64().filter(|s| *s >= 0.0).ok_or_else(|| invalid(path, "Seconds must be a non-negative number"))?;
                    WaitFor::Seconds(secs)
                }
                (None, Some(t)) => {
                    let t = t.as_str().and_then(|s| DateTime::parse_from_rfc3339(s).ok());
                    WaitFor::Timestamp(t.ok_or_else(|| invalid(path, "Timestamp must be RFC 3339"))?.with_timezone(&Utc))
                }
                _ => return Err(invalid(path, "Wait needs exactly one of Seconds or Timestamp")),
            };
            StateKind::Wait(wait)
        }
        "Fail" => StateKind::Fail { error: str_field("Error"), cause: str_field("Cause") },
        "Succeed" => StateKind::Succeed,
        other => return Err(invalid(path, format!("unknown state Type {other:?}"))),
    };
    let next = str_field("Next");
    let end = obj.get("End").and_then(Value::as_bool).unwrap_or(false);
    let transition = match (&kind, next, end) {
        (StateKind::Choice { .. } | StateKind::Fail { .. } | StateKind::Succeed, None, false) => Transition::None,
        (StateKind::Choice { .. } | StateKind::Fail { .. } | StateKind::Succeed, _, _) => {
            return Err(invalid(path, format!("{ty} takes neither Next nor End")))
        }
        (_, Some(n), false) => Transition::Next(n),
        (_, None, true) => Transition::End,
        (_, Some(_), true) => return Err(invalid(path, "both Next and End")),
        (_, None, false) => return Err(invalid(path, "needs Next or End")),
    };
    Ok(State { kind, transition })
}

/// `arn:...:function:name` and plain `name` both name task `name`.
fn task_name(resource: &str) -> &str {
    resource.rsplit(':').next().unwrap_or(resource)
}

/// Every transition resolves, every state is reachable, and there are no
/// cycles.
fn check_graph(m: &StateMachine, path: &str) -> Result<(), AslValidation> {
    if !m.states.contains_key(&m.start_at) {
        return Err(invalid(path, format!("StartAt {:?} is not a state", m.start_at)));
    }
    for (name, s) in &m.states {
        if let Some(bad) = s.successors().into_iter().find(|n| !m.states.contains_key(*n)) {
            return Err(invalid(&format!("{path}.States.{name}"), format!("transition to undefined state {bad:?}")));
        }
    }
    let mut reached = HashSet::new();
    let mut on_path = HashSet::new();
    visit(m, &m.start_at, &mut reached, &mut on_path, path)?;
    if let Some(name) = m.states.keys().find(|n| !reached.contains(n.as_str())) {
        return Err(invalid(path, format!("state {name:?} is unreachable")));
    }
    Ok(())
}

fn visit<'a>(
    m: &'a StateMachine,
    name: &'a str,
    reached: &mut HashSet<&'a str>,
    on_path: &mut HashSet<&'a str>,
    path: &str,
) -> Result<(), AslValidation> {
    if on_path.contains(name) {
        return Err(invalid(path, format!("cycle through state {name:?}")));
    }
    if !reached.insert(name) {
        return Ok(());
    }
    on_path.insert(name);
    for next in m.states[name].successors() {
        visit(m, next, reached, on_path, path)?;
    }
    on_path.remove(name);
    Ok(())
}

pub fn register(ext: &mut Extensions) {
    compile::register(ext);
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_pass_machine() {
        let m = StateMachine::parse(&json!({"StartAt": "P", "States": {"P": {"Type": "Pass", "End": true}}})).unwrap();
        assert_eq!(m.states.len(), 1);
        assert_eq!(m.states["P"].transition, Transition::End);
    }

    #[test]
    fn dangling_next_is_rejected() {
        let err = StateMachine::parse(&json!({"StartAt": "P", "States": {"P": {"Type": "Pass", "Next": "Q"}}})).unwrap_err();
        assert!(err.reason.contains("undefined state \"Q\""), "{err}");
    }

    #[test]
    fn missing_start_at_and_unknown_type() {
        assert!(StateMachine::parse(&json!({"States": {"P": {"Type": "Pass", "End": true}}})).is_err());
        let err = StateMachine::parse(&json!({"StartAt": "P", "States": {"P": {"Type": "Teleport", "End": true}}})).unwrap_err();
        assert!(err.reason.contains("Teleport"));
        assert!(StateMachine::parse(&json!({"StartAt": "X", "States": {"P": {"Type": "Pass", "End": true}}})).is_err());
    }

    #[test]
    fn data_flow_fields_are_rejected() {
        let doc = json!({"StartAt": "P", "States": {"P": {"Type": "Pass", "Result": 1, "ResultPath": "$.x", "End": true}}});
        let err = StateMachine::parse(&doc).unwrap_err();
        assert_eq!(err.path, "$.States.P");
        assert!(err.reason.contains("ResultPath"), "{err}");
    }

    #[test]
    fn per_type_fields() {
        let bad = [
            json!({"Type": "Task", "End": true}),
            json!({"Type": "Choice", "Choices": []}),
            json!({"Type": "Wait", "End": true}),
            json!({"Type": "Wait", "Seconds": 1, "Timestamp": "2020-01-01T00:00:00Z", "End": true}),
            json!({"Type": "Pass"}),
            json!({"Type": "Succeed", "End": true}),
            json!({"Type": "Pass", "Next": "P", "End": true}),
        ];
        for state in bad {
            let doc = json!({"StartAt": "P", "States": {"P": state}});
            assert!(StateMachine::parse(&doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn cycles_and_unreachable_states_are_rejected() {
        let cycle = json!({"StartAt": "A", "States": {
            "A": {"Type": "Pass", "Next": "B"},
            "B": {"Type": "Choice", "Choices": [{"Variable": "$", "NumericLessThan": 3, "Next": "A"}], "Default": "C"},
            "C": {"Type": "Succeed"}}});
        assert!(StateMachine::parse(&cycle).unwrap_err().reason.contains("cycle"));
        let orphan = json!({"StartAt": "A", "States": {"A": {"Type": "Succeed"}, "B": {"Type": "Succeed"}}});
        assert!(StateMachine::parse(&orphan).unwrap_err().reason.contains("unreachable"));
    }

    #[test]
    fn parallel_branches_are_tagged_sub_machines() {
        let m = StateMachine::parse(&json!({"StartAt": "Par", "States": {"Par": {"Type": "Parallel", "End": true, "Branches": [
            {"StartAt": "X", "States": {"X": {"Type": "Task", "Resource": "arn:aws:lambda:us-east-1:1:function:inc", "End": true}}},
            {"StartAt": "Y", "States": {"Y": {"Type": "Pass", "End": true}}}]}}}))
        .unwrap();
        let subs = m.sub_machines("sm", "Par");
        assert_eq!(subs.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>(), ["sm/Par#0", "sm/Par#1"]);
        assert_eq!(subs[0].1.states["X"].kind, StateKind::Task { resource: "inc".into() });
        assert_eq!(m.state_count(), 3);
    }

    #[test]
    fn nested_errors_report_their_path() {
        let err = StateMachine::parse(&json!({"StartAt": "M", "States": {"M": {"Type": "Map", "End": true,
            "Iterator": {"StartAt": "I", "States": {"I": {"Type": "Pass", "Next": "nowhere"}}}}}}))
        .unwrap_err();
        assert!(err.path.starts_with("$.States.M.Iterator"), "{}", err.path);
    }
}

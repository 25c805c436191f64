//! Direct interpreter used as the reference for compiled machines. Branches
//! and iterations run one after another; Wait states do not sleep.

use serde_json::{json, Value};

use super::{compile::entry_subject, sub_tag, StateKind, StateMachine, Transition};

#[derive(Debug, Clone, PartialEq)]
pub enum TraceStatus {
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Entry subjects (`tag:state`) in visiting order.
    pub entries: Vec<String>,
    /// Final payload; `{"Error", "Cause"}` for failed runs.
    pub output: Value,
    pub status: TraceStatus,
}

enum Outcome {
    Done(Value),
    Failed(Value),
}

pub fn interpret(
    machine: &StateMachine,
    tag: &str,
    input: Value,
    run_task: &mut dyn FnMut(&str, &Value) -> Result<Value, String>,
) -> Result<Trace, String> {
    let mut entries = Vec::new();
    let (output, status) = match run(machine, tag, input, run_task, &mut entries)? {
        Outcome::Done(v) => (v, TraceStatus::Finished),
        Outcome::Failed(v) => (v, TraceStatus::Failed),
    };
    Ok(Trace { entries, output, status })
}

fn run(
    m: &StateMachine,
    tag: &str,
    mut payload: Value,
    run_task: &mut dyn FnMut(&str, &Value) -> Result<Value, String>,
    entries: &mut Vec<String>,
) -> Result<Outcome, String> {
    let mut current = m.start_at.clone();
    loop {
        let state = &m.states[&current];
        entries.push(entry_subject(tag, &current));
        let mut jump = None;
        match &state.kind {
            StateKind::Task { resource } => payload = run_task(resource, &payload)?,
            StateKind::Pass { result } => {
                if let Some(r) = result {
                    payload = r.clone();
                }
            }
            StateKind::Choice { choices, default } => {
                match choices.iter().find(|c| c.rule.eval(&payload)).map(|c| &c.next).or(default.as_ref()) {
                    Some(next) => jump = Some(next.clone()),
                    None => return Ok(Outcome::Failed(json!({"Error": "States.NoChoiceMatched", "Cause": null}))),
                }
            }
            StateKind::Parallel { branches } => {
                let mut outs = Vec::new();
                for (i, b) in branches.iter().enumerate() {
                    match run(b, &sub_tag(tag, &current, i), payload.clone(), run_task, entries)? {
                        Outcome::Done(v) => outs.push(v),
                        failed => return Ok(failed),
                    }
                }
                payload = Value::Array(outs);
            }
            StateKind::Map { iterator, items_path } => {
                let items =
                    items_path.select(&payload).and_then(Value::as_array).cloned().ok_or_else(|| format!("ItemsPath {items_path} is not an array"))?;
                let mut outs = Vec::new();
                for (j, item) in items.into_iter().enumerate() {
                    match run(iterator, &sub_tag(tag, &current, j), item, run_task, entries)? {
                        Outcome::Done(v) => outs.push(v),
                        failed => return Ok(failed),
                    }
                }
                payload = Value::Array(outs);
            }
            StateKind::Wait(_) => {}
            StateKind::Fail { error, cause } => return Ok(Outcome::Failed(json!({"Error": error, "Cause": cause}))),
            StateKind::Succeed => return Ok(Outcome::Done(payload)),
        }
        current = match (jump, &state.transition) {
            (Some(next), _) => next,
            (None, Transition::Next(next)) => next.clone(),
            (None, _) => return Ok(Outcome::Done(payload)),
        };
    }
}

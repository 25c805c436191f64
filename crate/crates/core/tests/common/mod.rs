//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tf_core::asl::{self, StateMachine, TraceStatus};
use tf_core::executor::{TaskBehavior, TaskDefinition, TaskOutcome};
use tf_core::service::LocalEngine;
use tf_core::WorkflowStatus;

/// Numeric view of a payload: objects give `x`, arrays sum their elements.
pub fn weight(v: &Value) -> i64 {
    match v {
        Value::Object(m) => m.get("x").and_then(Value::as_i64).unwrap_or(0),
        Value::Array(xs) => xs.iter().map(weight).sum(),
        other => other.as_i64().unwrap_or(0),
    }
}

/// Canonical payload `{"x", "items"}` with up to two map items, nested deep
/// enough for every Map level the generator produces.
pub fn payload(x: i64) -> Value {
    nested(x, 3)
}

fn nested(x: i64, depth: usize) -> Value {
    if depth == 0 {
        return json!({"x": x, "items": []});
    }
    let items: Vec<Value> = (0..x.rem_euclid(3)).map(|k| nested(k + x, depth - 1)).collect();
    json!({"x": x, "items": items})
}

pub fn apply_task(resource: &str, input: &Value) -> Value {
    let x = weight(input);
    payload(if resource == "twice" { (x * 2) % 1000 } else { x + 1 })
}

pub fn register_asl_tasks(engine: &LocalEngine) {
    for name in ["bump", "twice"] {
        let def = TaskDefinition::new(name, TaskBehavior::Scripted(Arc::new(move |input, _| TaskOutcome::Success(apply_task(name, input)))));
        engine.executor.register(def).unwrap();
    }
}

/// Builds random machines as JSON. Every machine is a chain of states; a
/// Choice may jump forward in its chain. Whatever follows a Parallel or Map
/// is a Task, which folds the array output back into the canonical shape.
pub struct MachineGen {
    rng: ChaCha8Rng,
    budget: usize,
    next_name: usize,
}

impl MachineGen {
    pub fn new(seed: u64, max_states: usize) -> Self {
        MachineGen { rng: ChaCha8Rng::seed_from_u64(seed), budget: max_states, next_name: 0 }
    }

    /// Draws until a machine fits the state budget.
    pub fn generate(&mut self) -> Value {
        let max = self.budget;
        loop {
            self.budget = max;
            let doc = self.chain(true, 0);
            if StateMachine::parse(&doc).map(|m| m.state_count() <= max).unwrap_or(false) {
                self.budget = max;
                return doc;
            }
        }
    }

    fn name(&mut self, prefix: &str) -> String {
        self.next_name += 1;
        format!("{prefix}{}", self.next_name)
    }

    fn chain(&mut self, root: bool, depth: usize) -> Value {
        let want = self.rng.gen_range(1..=4).min(self.budget.max(1));
        self.budget = self.budget.saturating_sub(want);
        let mut kinds: Vec<&str> = Vec::new();
        for i in 0..want {
            let last = i + 1 == want;
            let after_fold = i > 0 && matches!(kinds[i - 1], "Parallel" | "Map");
            let kind = if after_fold {
                "Task"
            } else {
                let mut options = vec!["Task", "Task", "Pass", "Wait"];
                if !last {
                    options.push("Choice");
                }
                if depth < 2 && self.budget >= 1 {
                    options.extend(["Parallel", "Map"]);
                }
                if last {
                    options.push("Succeed");
                    if root {
                        options.push("Fail");
                    }
                }
                options[self.rng.gen_range(0..options.len())]
            };
            kinds.push(kind);
        }
        let names: Vec<String> = kinds
            .iter()
            .map(|k| {
                let prefix = match *k {
                    "Task" => "T",
                    "Choice" => "C",
                    _ => "S",
                };
                self.name(prefix)
            })
            .collect();

        let mut states = serde_json::Map::new();
        for (i, kind) in kinds.iter().enumerate() {
            let next = names.get(i + 1);
            let mut s = json!({"Type": kind});
            match *kind {
                "Task" => s["Resource"] = json!(["bump", "twice"][self.rng.gen_range(0..2)]),
                "Pass" => {
                    if self.rng.gen_bool(0.5) {
                        s["Result"] = payload(self.rng.gen_range(0..6));
                    }
                }
                "Wait" => s["Seconds"] = json!(0),
                "Choice" => {
                    let later = &names[i + 1..];
                    // Only the root may fail for want of a Default.
                    let with_default = !root || self.rng.gen_bool(0.7);
                    let n_rules = self.rng.gen_range(1..=2);
                    let rules: Vec<Value> = (0..n_rules)
                        .map(|r| {
                            let target = if r == 0 && !with_default { &later[0] } else { &later[self.rng.gen_range(0..later.len())] };
                            let op = ["NumericGreaterThan", "NumericLessThan", "NumericEquals"][self.rng.gen_range(0..3)];
                            json!({"Variable": "$.x", op: self.rng.gen_range(0..8), "Next": target})
                        })
                        .collect();
                    s["Choices"] = json!(rules);
                    if with_default {
                        s["Default"] = json!(later[0]);
                    }
                }
                "Parallel" => {
                    let k = self.rng.gen_range(1..=3);
                    let branches: Vec<Value> = (0..k).map(|_| self.chain(false, depth + 1)).collect();
                    s["Branches"] = json!(branches);
                }
                "Map" => {
                    s["ItemsPath"] = json!("$.items");
                    s["Iterator"] = self.chain(false, depth + 1);
                }
                "Fail" => {
                    s["Error"] = json!("Generated");
                    s["Cause"] = json!(names[i]);
                }
                _ => {}
            }
            if !matches!(*kind, "Choice" | "Succeed" | "Fail") {
                match next {
                    Some(n) => s["Next"] = json!(n),
                    None => s["End"] = json!(true),
                }
            }
            states.insert(names[i].clone(), s);
        }
        json!({"StartAt": names[0], "States": states})
    }
}

/// Task entries grouped by tag path; two entries run concurrently when their
/// tags diverge at different indices of the same Parallel or Map state.
pub fn concurrent(a: &str, b: &str) -> bool {
    let tag = |e: &str| e.rsplit_once(':').map(|(t, _)| t.to_string()).unwrap_or_default();
    let (ta, tb) = (tag(a), tag(b));
    for (x, y) in ta.split('/').zip(tb.split('/')) {
        if x != y {
            let state = |s: &str| s.split_once('#').map(|(st, _)| st.to_string());
            return state(x).is_some() && state(x) == state(y);
        }
    }
    false
}

fn is_task_entry(e: &str) -> bool {
    e.rsplit_once(':').is_some_and(|(_, s)| s.starts_with('T'))
}

#[derive(Debug)]
pub struct Comparison {
    pub states: usize,
    pub mismatch: Option<String>,
}

/// Runs `doc` through the compiled triggers and through the interpreter and
/// reports the first difference in task sets, precedence or final payload.
pub fn compare_machine(doc: &Value, seed: u64) -> Comparison {
    let machine = StateMachine::parse(doc).unwrap_or_else(|e| panic!("generated machine invalid: {e}\n{doc:#}"));
    let states = machine.state_count();
    let input = payload(1);
    let tag = "sm";

    let trace = asl::interpret(&machine, tag, input.clone(), &mut |r, v| Ok(apply_task(r, v))).unwrap();
    let expected: Vec<String> = trace.entries.iter().filter(|e| is_task_entry(e)).cloned().collect();

    let engine = LocalEngine::new(seed);
    register_asl_tasks(&engine);
    let wf = format!("asl-{seed}");
    let k = engine.run(&wf, asl::compile(&machine, tag), &asl::start_event(&machine, tag, input), Duration::from_secs(10)).unwrap();
    let got: Vec<String> = engine
        .executor
        .executions()
        .into_iter()
        .map(|e| {
            let rest = e.invocation_id.strip_prefix(&format!("{wf}/")).unwrap_or(&e.invocation_id).to_string();
            rest.rsplit_once('/').map(|(t, _)| t.to_string()).unwrap_or(rest)
        })
        .collect();

    let fail = |msg: String| Comparison { states, mismatch: Some(msg) };
    let expected_status = match trace.status {
        TraceStatus::Finished => WorkflowStatus::Finished,
        TraceStatus::Failed => WorkflowStatus::Failed,
    };
    if k.status() != expected_status {
        return fail(format!("status {:?}, interpreter {:?}", k.status(), expected_status));
    }
    let (mut a, mut b) = (expected.clone(), got.clone());
    a.sort();
    b.sort();
    if a != b {
        return fail(format!("task sets differ: compiled {b:?}, interpreter {a:?}"));
    }
    let pos = |e: &String| got.iter().position(|g| g == e).unwrap();
    for (i, x) in expected.iter().enumerate() {
        for y in &expected[i + 1..] {
            if !concurrent(x, y) && pos(x) > pos(y) {
                return fail(format!("{x} must run before {y}"));
            }
        }
    }
    if k.result() != Some(&trace.output) {
        return fail(format!("payload {:?}, interpreter {}", k.result(), trace.output));
    }
    Comparison { states, mismatch: None }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use serde_json::{json, Value};
use tf_core::dag::{DagSpec, DagTask, ErrorPolicy, Operator};
use tf_core::executor::{TaskBehavior, TaskDefinition, TaskOutcome};
use tf_core::service::LocalEngine;
use tf_core::WorkflowStatus;

const TIMEOUT: Duration = Duration::from_secs(10);

fn run(engine: &LocalEngine, spec: &DagSpec, input: Value) -> tf_core::Kernel {
    let compiled = spec.compile().unwrap();
    engine.run(&spec.dag_id, compiled.all_triggers(), &spec.start_event(input), TIMEOUT).unwrap()
}

/// For runs expected to stall: stop once nothing more arrives.
fn run_until_stalled(engine: &LocalEngine, spec: &DagSpec, input: Value) -> tf_core::Kernel {
    let mut k = engine.open(&spec.dag_id, spec.compile().unwrap().all_triggers()).unwrap();
    engine.publish(&spec.dag_id, &spec.start_event(input)).unwrap();
    k.run_until_quiet(Duration::from_millis(50)).unwrap();
    k
}

#[test]
fn chain_computes_in_order() {
    let engine = LocalEngine::new(1);
    let spec = DagSpec::new(
        "chain",
        vec![DagTask::invoke("A", "add3").then(&["B"]), DagTask::invoke("B", "inc").then(&["C"]), DagTask::invoke("C", "double")],
    );
    let k = run(&engine, &spec, json!(2));
    assert_eq!(k.status(), WorkflowStatus::Finished);
    assert_eq!(k.result(), Some(&json!(((2 + 3) + 1) * 2)));
    let order: Vec<String> = engine.executor.executions().into_iter().map(|e| e.subject).collect();
    assert_eq!(order, ["A", "B", "C"]);
}

#[test]
fn diamond_joins_both_branches() {
    let engine = LocalEngine::new(1);
    let spec = DagSpec::new(
        "diamond",
        vec![
            DagTask::invoke("A", "inc").then(&["B", "C"]),
            DagTask::invoke("B", "inc").then(&["D"]),
            DagTask::invoke("C", "double").then(&["D"]),
            DagTask::invoke("D", "echo"),
        ],
    );
    let k = run(&engine, &spec, json!(1));
    // D receives both branch outputs: B = 3, C = 4.
    let mut out: Vec<i64> = k.result().unwrap().as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
    out.sort();
    assert_eq!(out, [3, 4]);
    assert_eq!(k.trigger("D").unwrap().context.get_u64("joined"), Some(2));
}

fn listing(n_items: Option<u64>) -> DagSpec {
    let mut map = DagTask::map("M", "add3").then(&["S"]);
    if let Some(n) = n_items {
        map = map.with_param("items", json!((0..n).collect::<Vec<_>>()));
    }
    DagSpec::new("listing", vec![DagTask::invoke("A", "add3").then(&["M"]), map, DagTask::invoke("S", "echo")])
}

#[test]
fn map_over_result_of_previous_task() {
    let engine = LocalEngine::new(1);
    let k = run(&engine, &listing(None), json!(2));
    // add3(2) = 5, then add3 over range(5).
    assert_eq!(k.result(), Some(&json!([3, 4, 5, 6, 7])));
    assert_eq!(k.trigger("S").unwrap().context.get_u64("expected"), Some(5));
}

#[test]
fn map_over_one_item_degenerates_to_sequence() {
    let engine = LocalEngine::new(1);
    let k = run(&engine, &listing(Some(1)), json!(2));
    assert_eq!(k.result(), Some(&json!([3])));
}

#[test]
fn empty_map_fires_join_with_empty_results() {
    let engine = LocalEngine::new(1);
    let k = run(&engine, &listing(Some(0)), json!(2));
    assert_eq!(k.status(), WorkflowStatus::Finished);
    assert_eq!(k.result(), Some(&json!([])));
    assert_eq!(engine.executor.execution_counts().get("add3"), Some(&1));
}

fn flaky(fail_first: u32) -> TaskDefinition {
    let calls = Arc::new(AtomicU32::new(0));
    TaskDefinition::new(
        "flaky",
        TaskBehavior::Scripted(Arc::new(move |input, _| {
            if calls.fetch_add(1, Ordering::SeqCst) < fail_first {
                TaskOutcome::Failure(json!("transient"))
            } else {
                TaskOutcome::Success(input.clone())
            }
        })),
    )
}

#[test]
fn retry_recovers_from_transient_failure() {
    let engine = LocalEngine::new(1);
    engine.executor.register(flaky(2)).unwrap();
    let spec = DagSpec::new(
        "retry",
        vec![DagTask::invoke("A", "flaky").then(&["B"]).on_error(ErrorPolicy::Retry { attempts: 3 }), DagTask::invoke("B", "inc")],
    );
    let k = run(&engine, &spec, json!(41));
    assert_eq!(k.status(), WorkflowStatus::Finished);
    assert_eq!(k.result(), Some(&json!(42)));
    assert_eq!(engine.executor.execution_counts()["flaky"], 3);
}

#[test]
fn exhausted_retries_halt_until_resumed() {
    let engine = LocalEngine::new(1);
    engine.executor.register(flaky(10)).unwrap();
    let spec = DagSpec::new(
        "halt",
        vec![DagTask::invoke("A", "flaky").then(&["B"]).on_error(ErrorPolicy::Retry { attempts: 1 }), DagTask::invoke("B", "inc")],
    );
    let mut k = run_until_stalled(&engine, &spec, json!(1));
    assert_eq!(k.status(), WorkflowStatus::Running);
    assert_eq!(k.trigger("A.on_error").unwrap().context.get("halted"), Some(&json!(["task"])));
    engine.publish("halt", &spec.resume_event("A", json!(9), None)).unwrap();
    k.run_until(TIMEOUT, |k| k.status().is_terminal()).unwrap();
    assert_eq!(k.result(), Some(&json!(10)));
}

#[test]
fn unhandled_failure_parks_and_resume_continues() {
    let engine = LocalEngine::new(1);
    engine.executor.register(flaky(10)).unwrap();
    let spec = DagSpec::new("park", vec![DagTask::invoke("A", "flaky").then(&["B"]), DagTask::invoke("B", "inc")]);
    let mut k = run_until_stalled(&engine, &spec, json!(1));
    assert_eq!(k.status(), WorkflowStatus::Running);
    assert_eq!(k.dlq().parked().len(), 1);
    assert_eq!(k.dlq().parked()[0].event.subject(), "A");
    engine.publish("park", &spec.resume_event("A", json!(1), None)).unwrap();
    k.run_until(TIMEOUT, |k| k.status().is_terminal()).unwrap();
    assert_eq!(k.result(), Some(&json!(2)));
}

#[test]
fn skip_substitutes_value_for_failed_map_instance() {
    let engine = LocalEngine::new(1);
    engine
        .executor
        .register(TaskDefinition::new(
            "odd-fails",
            TaskBehavior::Scripted(Arc::new(|input, _| match input.as_i64() {
                Some(x) if x % 2 == 1 => TaskOutcome::Failure(json!("odd")),
                _ => TaskOutcome::Success(input.clone()),
            })),
        ))
        .unwrap();
    let spec = DagSpec::new(
        "skip",
        vec![
            DagTask::map("M", "odd-fails")
                .with_param("items", json!([0, 1, 2, 3]))
                .then(&["S"])
                .on_error(ErrorPolicy::Skip { value: json!(-1) }),
            DagTask::invoke("S", "echo"),
        ],
    );
    let k = run(&engine, &spec, Value::Null);
    assert_eq!(k.result(), Some(&json!([0, -1, 2, -1])));
}

#[test]
fn noop_tasks_pass_input_through() {
    let engine = LocalEngine::new(1);
    let spec = DagSpec::new("noop", vec![DagTask::new("A", Operator::Noop).then(&["B"]), DagTask::invoke("B", "double")]);
    let k = run(&engine, &spec, json!(21));
    assert_eq!(k.result(), Some(&json!(42)));
}

/// `sum(inputs) + 1`; a join hands over an array of parent outputs.
fn sum_plus_one() -> TaskDefinition {
    TaskDefinition::new(
        "sum1",
        TaskBehavior::Scripted(Arc::new(|input, _| {
            let total: i64 = match input {
                Value::Array(xs) => xs.iter().filter_map(Value::as_i64).sum(),
                other => other.as_i64().unwrap_or(0),
            };
            TaskOutcome::Success(json!(total + 1))
        })),
    )
}

/// Edges only point from lower to higher index, so any edge set is acyclic.
fn random_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..=8).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let len = pairs.len();
        (Just(n), proptest::sample::subsequence(pairs, 0..=len))
    })
}

/// Reference: execute tasks in a topological order directly.
fn oracle(n: usize, edges: &[(usize, usize)], input: i64) -> (Vec<i64>, HashMap<usize, i64>) {
    let mut value = HashMap::new();
    for v in 0..n {
        let parents: Vec<usize> = edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        let x = if parents.is_empty() { input } else { parents.iter().map(|p| value[p]).sum() };
        value.insert(v, x + 1);
    }
    let mut sinks: Vec<i64> = (0..n).filter(|v| !edges.iter().any(|e| e.0 == *v)).map(|v| value[&v]).collect();
    sinks.sort();
    (sinks, value)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn compiled_dag_matches_topological_executor((n, edges) in random_dag(), input in 0i64..5) {
        let tasks: Vec<DagTask> = (0..n)
            .map(|i| {
                let down: Vec<String> = edges.iter().filter(|e| e.0 == i).map(|e| format!("t{}", e.1)).collect();
                let mut t = DagTask::invoke(&format!("t{i}"), "sum1");
                t.downstream = down;
                t
            })
            .collect();
        let spec = DagSpec::new("rand", tasks);
        let compiled = spec.compile().unwrap();
        prop_assert_eq!(compiled.triggers.len(), n);

        let engine = LocalEngine::new(7);
        engine.executor.register(sum_plus_one()).unwrap();
        let k = engine.run("rand", compiled.all_triggers(), &spec.start_event(json!(input)), TIMEOUT).unwrap();
        prop_assert_eq!(k.status(), WorkflowStatus::Finished);

        let (sinks, _) = oracle(n, &edges, input);
        let mut got: Vec<i64> = match k.result().unwrap() {
            Value::Array(xs) => xs.iter().map(|v| v.as_i64().unwrap()).collect(),
            v => vec![v.as_i64().unwrap()],
        };
        got.sort();
        prop_assert_eq!(got, sinks);

        // Every task ran exactly once, parents before children.
        let order: Vec<String> = engine.executor.executions().into_iter().map(|e| e.subject).collect();
        let mut sorted = order.clone();
        sorted.sort();
        let mut expected: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        expected.sort();
        prop_assert_eq!(sorted, expected);
        let pos = |t: usize| order.iter().position(|s| *s == format!("t{t}")).unwrap();
        for (a, b) in &edges {
            prop_assert!(pos(*a) < pos(*b), "t{} ran after t{}", a, b);
        }
    }
}

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tf_core::bench::bench_scale_to_zero;
use tf_core::event::CloudEvent;
use tf_core::kernel::trigger::{Matcher, Spec};
use tf_core::service::{Service, ServiceConfig, ServiceError, WorkerState};
use tf_core::{Trigger, WorkflowStatus};

const WAIT: Duration = Duration::from_secs(10);

fn config(grace_s: f64) -> ServiceConfig {
    ServiceConfig { idle_grace_s: grace_s, poll_interval_ms: 10, ..ServiceConfig::in_memory() }
}

fn counter(id: &str, subject: &str) -> Trigger {
    Trigger::new(id, vec![Matcher::any(subject)], Spec::new("true"), Spec::new("noop"))
}

fn tick(id: &str, subject: &str) -> CloudEvent {
    CloudEvent::success(id, "tf://test", subject, Value::Null)
}

fn fire_count(svc: &Service, wf: &str, trigger: &str) -> u64 {
    svc.get_state(wf, Some(trigger)).unwrap()["fire_count"].as_u64().unwrap()
}

fn wait_fires(svc: &Service, wf: &str, trigger: &str, n: u64) {
    let ok = svc.wait_state(wf, WAIT, |s| s["triggers"].as_array().unwrap().iter().any(|t| t["id"] == trigger && t["fire_count"] == n)).unwrap();
    assert!(ok, "{trigger} never reached {n} fires: {:#}", svc.get_state(wf, None).unwrap());
}

fn wait_deprovisioned(svc: &Service, wf: &str) {
    for _ in 0..1000 {
        if svc.worker(wf).state == WorkerState::Deprovisioned {
            return;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    panic!("{wf} never scaled to zero");
}

#[test]
fn registry_errors() {
    let svc = Service::open(config(1.0)).unwrap();
    svc.create_workflow("w", vec!["tf://a".into()]).unwrap();
    assert!(matches!(svc.create_workflow("w", vec![]), Err(ServiceError::DuplicateWorkflow(_))));
    assert!(matches!(svc.publish("missing", &tick("1", "x")), Err(ServiceError::NotFound(_))));
    assert!(matches!(svc.get_state("missing", None), Err(ServiceError::NotFound(_))));
    assert!(matches!(svc.add_trigger("missing", counter("t", "x")), Err(ServiceError::NotFound(_))));
    svc.add_trigger("w", counter("t", "x")).unwrap();
    assert!(matches!(svc.add_trigger("w", counter("t", "y")), Err(ServiceError::InvalidTrigger(_))));
    let bad = Trigger::new("b", vec![Matcher::any("x")], Spec::new("no-such-condition"), Spec::new("noop"));
    assert!(matches!(svc.add_trigger("w", bad), Err(ServiceError::InvalidTrigger(_))));
    svc.delete_workflow("w").unwrap();
    assert!(matches!(svc.get_state("w", None), Err(ServiceError::NotFound(_))));
}

#[test]
fn trigger_added_later_picks_up_parked_event() {
    let svc = Service::open(config(5.0)).unwrap();
    svc.start();
    svc.create_workflow("dyn", vec![]).unwrap();
    svc.add_trigger("dyn", counter("a", "a")).unwrap();
    svc.publish("dyn", &tick("1", "a")).unwrap();
    svc.publish("dyn", &tick("2", "b")).unwrap();
    wait_fires(&svc, "dyn", "a", 1);
    assert!(svc.wait_state("dyn", WAIT, |s| s["dlq_depth"] == 1).unwrap());

    svc.add_trigger("dyn", counter("b", "b")).unwrap();
    wait_fires(&svc, "dyn", "b", 1);
    assert!(svc.wait_state("dyn", WAIT, |s| s["dlq_depth"] == 0).unwrap());
}

#[test]
fn idle_worker_scales_to_zero_and_keeps_state() {
    let svc = Service::open(config(0.2)).unwrap();
    svc.start();
    svc.create_workflow("idle", vec![]).unwrap();
    svc.add_trigger("idle", Trigger::new("sum", vec![Matcher::any("n")], Spec::new("counter-join").with("expected", json!(4)), Spec::new("noop"))).unwrap();
    svc.publish("idle", &tick("1", "n")).unwrap();
    svc.publish("idle", &tick("2", "n")).unwrap();
    assert!(svc.wait_state("idle", WAIT, |s| s["triggers"][0]["context"]["joined"] == 2).unwrap());
    wait_deprovisioned(&svc, "idle");
    assert_eq!(svc.registry().status("idle"), Some(WorkflowStatus::Idle));

    // The next worker resumes the join from the checkpoint.
    svc.publish("idle", &tick("3", "n")).unwrap();
    svc.publish("idle", &tick("2", "n")).unwrap();
    svc.publish("idle", &tick("4", "n")).unwrap();
    wait_fires(&svc, "idle", "sum", 1);
    let stats = svc.stats();
    assert!(stats.provisions >= 2, "{stats:?}");
    let timeline = svc.timeline();
    assert_eq!(timeline[0].state, WorkerState::Provisioned);
    assert_eq!(timeline[1].state, WorkerState::Deprovisioned);
}

#[test]
fn one_worker_per_workflow() {
    let svc = Service::open(config(5.0)).unwrap();
    svc.create_workflow("single", vec![]).unwrap();
    svc.add_trigger("single", counter("c", "x")).unwrap();
    assert!(svc.provision("single"));
    assert!(!svc.provision("single"));
    for i in 0..50 {
        svc.publish("single", &tick(&i.to_string(), "x")).unwrap();
        svc.reconcile();
    }
    wait_fires(&svc, "single", "c", 50);
    assert_eq!(svc.stats().provisions, 1);
    assert_eq!(svc.stats().peak_workers, 1);
}

#[test]
fn file_backed_state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig { storage_root: Some(dir.path().to_path_buf()), ..config(0.1) };
    {
        let svc = Service::open(cfg.clone()).unwrap();
        svc.start();
        svc.create_workflow("durable", vec![]).unwrap();
        svc.add_trigger("durable", counter("c", "x")).unwrap();
        svc.set_global_context("durable", "owner", json!("ops")).unwrap();
        for i in 0..3 {
            svc.publish("durable", &tick(&i.to_string(), "x")).unwrap();
        }
        wait_fires(&svc, "durable", "c", 3);
        svc.shutdown();
    }
    let svc: Arc<Service> = Service::open(cfg).unwrap();
    assert_eq!(fire_count(&svc, "durable", "c"), 3);
    assert!(matches!(svc.create_workflow("durable", vec![]), Err(ServiceError::DuplicateWorkflow(_))));
    svc.start();
    // A redelivered event is recognised after the restart.
    svc.publish("durable", &tick("2", "x")).unwrap();
    svc.publish("durable", &tick("3", "x")).unwrap();
    wait_fires(&svc, "durable", "c", 4);
    let state = svc.get_state("durable", None).unwrap();
    assert_eq!(state["global_context"]["owner"], "ops");
    assert_eq!(state["counters"]["duplicates"], 1);
}

#[test]
fn terminated_workflow_rejects_new_triggers() {
    let svc = Service::open(config(5.0)).unwrap();
    svc.start();
    svc.create_workflow("end", vec![]).unwrap();
    svc.add_trigger("end", Trigger::new("stop", vec![Matcher::any("stop")], Spec::new("true"), Spec::new("terminate-workflow"))).unwrap();
    svc.publish("end", &CloudEvent::success("s", "tf://test", "stop", json!("bye"))).unwrap();
    assert_eq!(svc.wait_terminal("end", WAIT).unwrap(), WorkflowStatus::Finished);
    assert_eq!(svc.get_state("end", None).unwrap()["result"], "bye");
    assert!(matches!(svc.add_trigger("end", counter("late", "x")), Err(ServiceError::Terminated(_))));
}

#[test]
fn worker_sleeps_through_long_task() {
    let idled = bench_scale_to_zero(0.2, 0.8).unwrap();
    let awake = bench_scale_to_zero(5.0, 0.8).unwrap();
    assert_eq!(idled.notes["deprovisioned_during_task"], true, "{:?}", idled.provisions);
    assert_eq!(awake.notes["deprovisioned_during_task"], false, "{:?}", awake.provisions);
    assert_eq!(awake.notes["provision_count"], 1);
    assert_eq!(idled.notes["end_state"], awake.notes["end_state"]);
    assert_eq!(idled.notes["end_state"]["result"], json!({"payload": 42}));
}

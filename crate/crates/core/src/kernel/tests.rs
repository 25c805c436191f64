use super::*;
use crate::bus::MemoryBus;
use crate::event::TYPE_SUCCESS;

struct Rig {
    bus: Arc<MemoryBus>,
    store: Arc<MemoryCheckpointStore>,
    effects: Arc<RecordingEffects>,
}

impl Rig {
    fn new() -> Self {
        Rig { bus: Arc::new(MemoryBus::new()), store: Arc::new(MemoryCheckpointStore::new()), effects: Arc::default() }
    }

    fn deps(&self) -> KernelDeps {
        KernelDeps { bus: self.bus.clone(), store: self.store.clone(), effects: self.effects.clone(), ext: Arc::new(Extensions::default()) }
    }

    fn open(&self, triggers: Vec<Trigger>) -> Kernel {
        Kernel::open("wf", triggers, self.deps(), KernelConfig::default()).unwrap()
    }

    fn publish(&self, ev: &CloudEvent) {
        if !self.bus.has_topic("wf") {
            self.bus.create_topic("wf").unwrap();
        }
        self.bus.publish("wf", ev).unwrap();
    }
}

fn ev(id: &str, subject: &str) -> CloudEvent {
    CloudEvent::success(id, "tf://test", subject, json!(id))
}

fn noop_on(id: &str, subject: &str) -> Trigger {
    Trigger::new(id, vec![Matcher::any(subject)], Spec::new("true"), Spec::new("noop"))
}

fn join(id: &str, subject: &str, expected: u64) -> Trigger {
    Trigger::new(id, vec![Matcher::any(subject)], Spec::new("counter-join").with("expected", json!(expected)), Spec::new("noop"))
        .transient()
}

fn drain(k: &mut Kernel) {
    k.run_until_quiet(Duration::from_millis(5)).unwrap();
}

#[test]
fn direct_match_fires() {
    let rig = Rig::new();
    let mut k = rig.open(vec![Trigger::new(
        "t",
        vec![Matcher::success("task-A")],
        Spec::new("true"),
        Spec::new("emit-event").with("subject", json!("next")),
    )]);
    rig.publish(&ev("e1", "task-A"));
    drain(&mut k);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
    assert_eq!(k.counters().fires, 1);
    // The emitted "next" event matched nothing.
    assert_eq!(k.dlq().parked()[0].event.subject(), "next");
    assert_eq!(k.dlq().parked()[0].reason, ParkReason::NoMatchingTrigger);
}

#[test]
fn unmatched_and_disabled_events_are_parked_with_reasons() {
    let rig = Rig::new();
    let mut k = rig.open(vec![noop_on("b", "B").disabled()]);
    rig.publish(&ev("z", "task-Z"));
    rig.publish(&ev("b1", "B"));
    drain(&mut k);
    let reasons: Vec<_> = k.dlq().parked().iter().map(|p| (p.event.id.clone(), p.reason)).collect();
    assert_eq!(reasons, vec![("z".into(), ParkReason::NoMatchingTrigger), ("b1".into(), ParkReason::TriggerDisabled)]);
    k.set_enabled("b", true).unwrap();
    drain(&mut k);
    assert_eq!(k.trigger("b").unwrap().fired, 1);
    assert_eq!(k.dlq().len(), 1);
}

#[test]
fn join_of_2000_fires_once() {
    let rig = Rig::new();
    let mut k = rig.open(vec![join("j", "J", 2000)]);
    for i in 0..2000 {
        rig.publish(&ev(&format!("e{i}"), "J"));
    }
    drain(&mut k);
    let t = k.trigger("j").unwrap();
    assert_eq!(t.fired, 1);
    assert_eq!(t.context.get_u64("joined"), Some(2000));
    assert!(!t.enabled);
}

#[test]
fn transient_trigger_does_not_fire_twice() {
    let rig = Rig::new();
    let mut k = rig.open(vec![noop_on("t", "a").transient()]);
    rig.publish(&ev("1", "a"));
    rig.publish(&ev("2", "a"));
    drain(&mut k);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
    assert_eq!(k.dlq().parked()[0].reason, ParkReason::TriggerDisabled);
}

#[test]
fn duplicate_ids_are_dropped() {
    let rig = Rig::new();
    let mut k = rig.open(vec![noop_on("t", "a")]);
    rig.publish(&ev("1", "a"));
    rig.publish(&ev("1", "a"));
    drain(&mut k);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
    assert_eq!(k.counters().duplicates, 1);
}

#[test]
fn action_failure_becomes_failure_event_for_error_triggers() {
    let rig = Rig::new();
    let bad = Trigger::new("t", vec![Matcher::any("a")], Spec::new("true"), Spec::new("emit-event").with("subject", json!("x")).with("input", json!("results")))
        .with_context("unused", json!(0));
    // Invalid after registration: an unknown trigger in `enable` only fails at run time.
    let bad = Trigger { action: bad.action.with("enable", json!(["ghost"])), ..bad };
    let handler = Trigger::new("on-error", vec![Matcher::new("t", TYPE_FAILURE)], Spec::new("true"), Spec::new("noop"));
    let mut k = rig.open(vec![bad, handler]);
    rig.publish(&ev("1", "a"));
    drain(&mut k);
    assert_eq!(k.counters().action_failures, 1);
    assert_eq!(k.trigger("on-error").unwrap().fired, 1);
}

#[test]
fn invoke_task_dispatches_with_deterministic_id() {
    let rig = Rig::new();
    let mut k = rig.open(vec![Trigger::new("t", vec![Matcher::any("go")], Spec::new("true"), Spec::new("invoke-task").with("task", json!("add3")))]);
    rig.publish(&ev("1", "go"));
    drain(&mut k);
    let invs = rig.effects.invocations.lock();
    assert_eq!(invs.len(), 1);
    assert_eq!(invs[0].invocation_id, "wf/t/0");
    assert_eq!(invs[0].subject, "t");
    assert_eq!(invs[0].payload, json!("1"));
}

#[test]
fn sequence_gate_parks_early_events_until_position_moves() {
    let rig = Rig::new();
    let gate = Trigger::new(
        "g",
        vec![Matcher::any("a"), Matcher::any("b"), Matcher::any("c")],
        Spec::new("sequence-gate").with("sequence", json!(["a", "b", "c"])),
        Spec::new("noop"),
    )
    .transient();
    let mut k = rig.open(vec![gate]);
    for (id, s) in [("3", "c"), ("2", "b"), ("1", "a")] {
        rig.publish(&ev(id, s));
    }
    drain(&mut k);
    assert_eq!(k.trigger("g").unwrap().fired, 1);
    assert!(k.dlq().is_empty());
    assert!(k.dlq().replayed_total() >= 2);
}

fn aggregator() -> Trigger {
    Trigger::new(
        "agg",
        vec![Matcher::any("client")],
        Spec::new("threshold-join").with("pool", json!(10)).with("fraction", json!(0.5)),
        Spec::new("aggregate-results").with("subject", json!("round")),
    )
    .transient()
}

fn timeout_interceptor() -> Trigger {
    Trigger::new("timeout", vec![Matcher::any("tick")], Spec::new("true").with("subjects", json!(["tick"])), Spec::new("force-fire"))
        .transient()
}

#[test]
fn timeout_interceptor_forces_partial_join() {
    let rig = Rig::new();
    let mut k = rig.open(vec![aggregator(), noop_on("round", "round")]);
    assert_eq!(k.intercept(&Selector::TriggerId("agg".into()), timeout_interceptor()).unwrap(), vec!["agg".to_string()]);
    rig.publish(&ev("c1", "client"));
    rig.publish(&ev("c2", "client"));
    rig.publish(&ev("tick", "tick"));
    drain(&mut k);
    assert_eq!(k.trigger("agg").unwrap().fired, 1);
    assert_eq!(k.trigger("timeout").unwrap().fired, 1);
    assert_eq!(k.trigger("round").unwrap().fired, 1);
    // Three more clients would have met the threshold; the round is closed.
    for i in 3..=8 {
        rig.publish(&ev(&format!("c{i}"), "client"));
    }
    drain(&mut k);
    assert_eq!(k.trigger("agg").unwrap().fired, 1);
}

#[test]
fn interceptor_by_condition_id_attaches_to_every_join() {
    let rig = Rig::new();
    let mut k = rig.open(vec![join("j1", "a", 2), join("j2", "b", 2), noop_on("n", "c"), join("j3", "d", 2)]);
    let spy = Trigger::new("spy", vec![Matcher::any("spy")], Spec::new("true").with("subjects", json!(["spy"])), Spec::new("noop"));
    let targets = k.intercept(&Selector::ConditionId("counter-join".into()), spy).unwrap();
    assert_eq!(targets, ["j1", "j2", "j3"]);
    assert!(matches!(
        k.intercept(&Selector::ConditionId("threshold-join".into()), noop_on("x", "x")),
        Err(KernelError::SelectorNotFound(_))
    ));
}

#[test]
fn disabling_interceptor_parks_later_target_events() {
    let rig = Rig::new();
    let mut k = rig.open(vec![noop_on("target", "a")]);
    let off = Trigger::new("off", vec![Matcher::any("kill")], Spec::new("true").with("subjects", json!(["kill"])), Spec::new("disable-target"))
        .transient();
    k.intercept(&Selector::TriggerId("target".into()), off).unwrap();
    rig.publish(&ev("1", "a"));
    rig.publish(&ev("k", "kill"));
    rig.publish(&ev("2", "a"));
    drain(&mut k);
    assert_eq!(k.trigger("target").unwrap().fired, 1);
    assert_eq!(k.dlq().parked().iter().map(|p| p.event.id.as_str()).collect::<Vec<_>>(), ["2"]);
}

#[test]
fn unfired_interceptor_leaves_contexts_untouched() {
    let run = |with_interceptor: bool| {
        let rig = Rig::new();
        let mut k = rig.open(vec![aggregator(), noop_on("round", "round")]);
        if with_interceptor {
            k.intercept(&Selector::TriggerId("agg".into()), timeout_interceptor()).unwrap();
        }
        for i in 0..7 {
            rig.publish(&ev(&format!("c{i}"), "client"));
        }
        drain(&mut k);
        ["agg", "round"].map(|id| k.trigger(id).unwrap().context.clone())
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn crash_mid_join_recovers_and_fires_once() {
    let rig = Rig::new();
    for i in 0..2000 {
        rig.publish(&ev(&format!("e{i}"), "J"));
    }
    let mut k = rig.open(vec![join("j", "J", 2000)]);
    k.set_fault(Some(FaultPlan { point: FaultPoint::BeforeItem, at: 1201 }));
    assert!(matches!(k.run_until_quiet(Duration::from_millis(5)), Err(KernelError::Killed(FaultPoint::BeforeItem))));
    drop(k);
    let mut k = rig.open(vec![join("j", "J", 2000)]);
    assert!(k.recovery().from_checkpoint);
    drain(&mut k);
    assert_eq!(k.trigger("j").unwrap().fired, 1);
    assert_eq!(k.trigger("j").unwrap().context.get_u64("joined"), Some(2000));
    assert_eq!(rig.bus.committed("wf").unwrap(), 2000);
}

#[test]
fn crash_between_action_and_checkpoint_redispatches_same_invocation() {
    let rig = Rig::new();
    let t = || Trigger::new("t", vec![Matcher::any("go")], Spec::new("true"), Spec::new("invoke-task").with("task", json!("x"))).transient();
    rig.publish(&ev("1", "go"));
    let mut k = rig.open(vec![t()]);
    k.set_fault(Some(FaultPlan { point: FaultPoint::AfterAction, at: 1 }));
    assert!(k.run_until_quiet(Duration::from_millis(5)).is_err());
    drop(k);
    let mut k = rig.open(vec![t()]);
    drain(&mut k);
    let ids: Vec<_> = rig.effects.invocations.lock().iter().map(|i| i.invocation_id.clone()).collect();
    // Same idempotency key both times; the executor runs it once.
    assert_eq!(ids, ["wf/t/0", "wf/t/0"]);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
}

#[test]
fn recovery_after_clean_checkpoint_is_a_noop() {
    let rig = Rig::new();
    rig.publish(&ev("1", "a"));
    let mut k = rig.open(vec![noop_on("t", "a")]);
    drain(&mut k);
    drop(k);
    let mut k = rig.open(vec![noop_on("t", "a")]);
    assert_eq!(k.step(Duration::from_millis(5)).unwrap(), 0);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
}

#[test]
fn corrupt_checkpoint_falls_back_to_full_replay() {
    let dir = tempfile::tempdir().unwrap();
    let bus = Arc::new(crate::bus::FileBus::open(dir.path()).unwrap());
    let store = Arc::new(FileCheckpointStore::new(dir.path()));
    let deps = KernelDeps { bus: bus.clone(), store: store.clone(), effects: Arc::new(RecordingEffects::default()), ext: Arc::default() };
    let mut k = Kernel::open("wf", vec![join("j", "J", 3)], deps.clone(), KernelConfig::default()).unwrap();
    for i in 0..2 {
        bus.publish("wf", &ev(&format!("e{i}"), "J")).unwrap();
    }
    drain(&mut k);
    drop(k);
    std::fs::write(store.path("wf"), b"{not json").unwrap();
    bus.publish("wf", &ev("e2", "J")).unwrap();
    let mut k = Kernel::open("wf", vec![join("j", "J", 3)], deps, KernelConfig::default()).unwrap();
    assert!(k.recovery().corrupt_checkpoint);
    drain(&mut k);
    assert_eq!(k.trigger("j").unwrap().fired, 1);
    assert_eq!(k.trigger("j").unwrap().context.get_u64("joined"), Some(3));
}

#[test]
fn file_checkpoint_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let bus = Arc::new(crate::bus::FileBus::open(dir.path()).unwrap());
    let deps = KernelDeps {
        bus: bus.clone(),
        store: Arc::new(FileCheckpointStore::new(dir.path())),
        effects: Arc::new(RecordingEffects::default()),
        ext: Arc::default(),
    };
    let mut k = Kernel::open("wf", vec![join("j", "J", 2)], deps.clone(), KernelConfig::default()).unwrap();
    bus.publish("wf", &ev("e0", "J")).unwrap();
    drain(&mut k);
    drop(k);
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("wf/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(doc["next_offset"], json!(1));
    assert_eq!(doc["triggers"][0]["context"]["data"]["joined"], json!(1));

    let bus = Arc::new(crate::bus::FileBus::open(dir.path()).unwrap());
    let deps = KernelDeps { bus: bus.clone(), store: Arc::new(FileCheckpointStore::new(dir.path())), ..deps };
    let mut k = Kernel::open("wf", vec![join("j", "J", 2)], deps, KernelConfig::default()).unwrap();
    bus.publish("wf", &ev("e0", "J")).unwrap();
    bus.publish("wf", &ev("e1", "J")).unwrap();
    drain(&mut k);
    assert_eq!(k.trigger("j").unwrap().fired, 1);
    assert_eq!(k.counters().duplicates, 1);
}

#[test]
fn cascade_limit_parks_runaway_loops() {
    let rig = Rig::new();
    let looping = Trigger::new("loop", vec![Matcher::any("spin")], Spec::new("true"), Spec::new("emit-event").with("subject", json!("spin")));
    let mut k = rig.open(vec![looping]);
    rig.publish(&ev("0", "spin"));
    drain(&mut k);
    assert_eq!(k.trigger("loop").unwrap().fired, u64::from(DEFAULT_CASCADE_LIMIT) + 1);
    assert_eq!(k.dlq().poisoned()[0].reason, ParkReason::CascadeLimit);
}

#[test]
fn malformed_records_are_poisoned() {
    let rig = Rig::new();
    let mut k = rig.open(vec![noop_on("t", "a")]);
    rig.bus.publish_raw("wf", br#"{"source":"x","specversion":"1.0","type":"t"}"#).unwrap();
    rig.publish(&ev("1", "a"));
    drain(&mut k);
    assert_eq!(k.dlq().poisoned()[0].reason, ParkReason::Malformed);
    assert_eq!(k.trigger("t").unwrap().fired, 1);
    assert_eq!(rig.bus.committed("wf").unwrap(), 2);
}

#[test]
fn terminate_stops_processing() {
    let rig = Rig::new();
    let end = Trigger::new("end", vec![Matcher::any("done")], Spec::new("true"), Spec::new("terminate-workflow")).transient();
    let mut k = rig.open(vec![end, noop_on("t", "a")]);
    rig.publish(&CloudEvent::success("d", "s", "done", json!(42)));
    rig.publish(&ev("1", "a"));
    drain(&mut k);
    assert_eq!(k.status(), WorkflowStatus::Finished);
    assert_eq!(k.result(), Some(&json!(42)));
    assert_eq!(k.trigger("t").unwrap().fired, 0);
}

#[test]
fn invalid_triggers_are_rejected() {
    let rig = Rig::new();
    let mut k = rig.open(vec![]);
    let bad = Trigger::new("x", vec![Matcher::any("a")], Spec::new("xyz"), Spec::new("noop"));
    assert!(matches!(k.add_trigger(bad), Err(KernelError::InvalidTrigger { .. })));
    let empty = Trigger::new("y", vec![], Spec::new("true"), Spec::new("noop"));
    assert!(matches!(k.add_trigger(empty), Err(KernelError::InvalidTrigger { .. })));
    k.add_trigger(noop_on("z", "a")).unwrap();
    assert!(matches!(k.add_trigger(noop_on("z", "a")), Err(KernelError::DuplicateTrigger(_))));
}

#[test]
fn state_document_reports_triggers_and_dlq() {
    let rig = Rig::new();
    let mut k = rig.open(vec![join("j", "J", 1)]);
    rig.publish(&ev("1", "J"));
    rig.publish(&ev("2", "nowhere"));
    drain(&mut k);
    let doc = k.state(None).unwrap();
    assert_eq!(doc["dlq_depth"], json!(1));
    assert_eq!(doc["committed_offset"], json!(2));
    let t = k.state(Some("j")).unwrap();
    assert_eq!(t["fired"], json!(true));
    assert_eq!(t["context"]["joined"], t["context"]["expected"]);
    assert!(matches!(k.state(Some("nope")), Err(KernelError::UnknownTrigger(_))));
    let _ = TYPE_SUCCESS;
}

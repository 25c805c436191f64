use std::time::Duration;

use chrono::{DateTime, Utc};
use serde_json::{json, Value};

use super::{sub_tag, StateKind, StateMachine, Transition, WaitFor, MAX_PAYLOAD_BYTES};
use crate::event::{CloudEvent, EXT_EMPTY_JOIN, EXT_INDEX, TYPE_SUCCESS};
use crate::kernel::action::ActionCtx;
use crate::kernel::trigger::{Matcher, Spec};
use crate::kernel::{Extensions, Trigger};
use crate::predicate::{ChoiceRule, JsonPath};

/// Pseudo-state every ending state hands its output to.
pub const END_STATE: &str = "$end";

pub fn entry_subject(tag: &str, state: &str) -> String {
    format!("{tag}:{state}")
}

/// The event that enters the machine's first state.
pub fn start_event(machine: &StateMachine, tag: &str, input: Value) -> CloudEvent {
    CloudEvent::success(format!("{tag}/start"), "tf://client", entry_subject(tag, &machine.start_at), input)
}

/// Triggers for a top-level machine. Reaching its end finishes the workflow.
pub fn compile(machine: &StateMachine, tag: &str) -> Vec<Trigger> {
    compile_machine(machine, tag, None)
}

/// `index` is set for nested machines, whose end event is tagged with it so
/// the parent join can order outputs.
fn compile_machine(m: &StateMachine, tag: &str, index: Option<usize>) -> Vec<Trigger> {
    let mut out = Vec::new();
    let end = entry_subject(tag, END_STATE);
    for (name, state) in &m.states {
        let id = entry_subject(tag, name);
        let on = || vec![Matcher::success(&id)];
        let next = match &state.transition {
            Transition::Next(n) => entry_subject(tag, n),
            Transition::End | Transition::None => end.clone(),
        };
        let forward = |subject: &str| Spec::new("emit-event").with("subject", json!(subject));
        match &state.kind {
            StateKind::Task { resource } => {
                let action = Spec::new("invoke-task").with("task", json!(resource)).with("reply", json!(next));
                out.push(Trigger::new(&id, on(), Spec::new("true"), action));
            }
            StateKind::Pass { result } => {
                let mut action = forward(&next);
                if let Some(r) = result {
                    action = action.with("payload", r.clone());
                }
                out.push(Trigger::new(&id, on(), Spec::new("true"), action));
            }
            StateKind::Choice { choices, default } => {
                let rules: Vec<ChoiceRule> = choices.iter().map(|c| c.rule.clone()).collect();
                for (i, c) in choices.iter().enumerate() {
                    let rule = c.rule.clone().first_match(&rules[..i]);
                    let cond = Spec::new("predicate").with("rule", rule.to_json());
                    out.push(Trigger::new(format!("{id}#{i}"), on(), cond, forward(&entry_subject(tag, &c.next))));
                }
                let cond = Spec::new("predicate").with("rule", ChoiceRule::none_of(&rules).to_json());
                let action = match default {
                    Some(d) => forward(&entry_subject(tag, d)),
                    None => Spec::new("terminate-workflow")
                        .with("status", json!("failed"))
                        .with("payload", json!({"Error": "States.NoChoiceMatched", "Cause": null})),
                };
                out.push(Trigger::new(format!("{id}#default"), on(), cond, action));
            }
            StateKind::Parallel { branches } => {
                let tags: Vec<String> = (0..branches.len()).map(|i| sub_tag(tag, name, i)).collect();
                let starts: Vec<String> = branches.iter().zip(&tags).map(|(b, t)| entry_subject(t, &b.start_at)).collect();
                out.push(Trigger::new(&id, on(), Spec::new("true"), Spec::new("asl.fanout").with("targets", json!(starts))));
                for (i, (b, t)) in branches.iter().zip(&tags).enumerate() {
                    out.extend(compile_machine(b, t, Some(i)));
                }
                let join = Trigger::new(
                    format!("{id}:join"),
                    tags.iter().map(Matcher::success).collect(),
                    Spec::new("counter-join").with("expected", json!(branches.len())),
                    forward(&next).with("input", json!("results")),
                );
                out.push(join.transient());
            }
            StateKind::Map { iterator, items_path } => {
                let family = format!("{tag}/{name}");
                let join_id = format!("{id}:join");
                let action = Spec::new("asl.map")
                    .with("family", json!(family))
                    .with("join", json!(join_id))
                    .with("iterator", iterator.source.clone())
                    .with("items_path", json!(items_path.to_string()));
                out.push(Trigger::new(&id, on(), Spec::new("true"), action));
                // Iteration end events are added as activations at run time;
                // the family subject carries the empty-map marker.
                let join = Trigger::new(
                    &join_id,
                    vec![Matcher::success(&family)],
                    Spec::new("counter-join"),
                    forward(&next).with("input", json!("results")),
                );
                out.push(join.transient());
            }
            StateKind::Wait(wait) => {
                let action = match wait {
                    WaitFor::Seconds(s) => Spec::new("asl.wait").with("seconds", json!(s)),
                    WaitFor::Timestamp(t) => Spec::new("asl.wait").with("timestamp", json!(t.to_rfc3339())),
                };
                out.push(Trigger::new(&id, on(), Spec::new("true"), action.with("next", json!(next))));
            }
            StateKind::Fail { error, cause } => {
                let action =
                    Spec::new("terminate-workflow").with("status", json!("failed")).with("payload", json!({"Error": error, "Cause": cause}));
                out.push(Trigger::new(&id, on(), Spec::new("true"), action));
            }
            StateKind::Succeed => out.push(Trigger::new(&id, on(), Spec::new("true"), forward(&end))),
        }
    }
    let finish = match index {
        None => Spec::new("terminate-workflow"),
        Some(i) => Spec::new("asl.end").with("subject", json!(tag)).with("index", json!(i)),
    };
    out.push(Trigger::new(&end, vec![Matcher::success(&end)], Spec::new("true"), finish));
    out
}

fn check_size(v: &Value) -> Result<(), String> {
    let n = serde_json::to_vec(v).map(|b| b.len()).unwrap_or(0);
    if n > MAX_PAYLOAD_BYTES {
        return Err(format!("payload of {n} bytes exceeds {MAX_PAYLOAD_BYTES}; pass large data by reference"));
    }
    Ok(())
}

fn fanout(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let input = ctx.event_data();
    check_size(&input)?;
    let targets: Vec<String> = serde_json::from_value(ctx.param("targets").cloned().unwrap_or_default()).map_err(|e| e.to_string())?;
    for t in targets {
        ctx.emit(&t, TYPE_SUCCESS, input.clone());
    }
    Ok(())
}

fn map_entry(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let family = ctx.param_str("family")?.to_string();
    let join = ctx.param_str("join")?.to_string();
    let iterator = StateMachine::parse(ctx.param("iterator").ok_or("missing iterator")?).map_err(|e| e.to_string())?;
    let path = JsonPath::parse(ctx.param_str("items_path")?).map_err(|e| e.to_string())?;
    let input = ctx.event_data();
    let items = path.select(&input).and_then(Value::as_array).cloned().ok_or_else(|| format!("ItemsPath {path} does not select an array"))?;
    ctx.resolve_map_join(&join, None, items.len() as u64);
    if items.is_empty() {
        let marker = ctx.make_event(&family, TYPE_SUCCESS, json!([])).with_extension(EXT_EMPTY_JOIN, json!(true));
        ctx.emit_event(marker);
    }
    for (j, item) in items.into_iter().enumerate() {
        check_size(&item)?;
        let tag = format!("{family}#{j}");
        for t in compile_machine(&iterator, &tag, Some(j)) {
            ctx.add_trigger(t);
        }
        ctx.add_activation(&join, Matcher::success(&tag));
        ctx.emit(&entry_subject(&tag, &iterator.start_at), TYPE_SUCCESS, item);
    }
    Ok(())
}

fn machine_end(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let subject = ctx.param_str("subject")?.to_string();
    let index = ctx.param("index").and_then(Value::as_u64).ok_or("missing index")?;
    let data = ctx.event_data();
    check_size(&data)?;
    let ev = ctx.make_event(&subject, TYPE_SUCCESS, data).with_extension(EXT_INDEX, json!(index));
    ctx.emit_event(ev);
    Ok(())
}

fn wait(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let next = ctx.param_str("next")?.to_string();
    let delay = match (ctx.param("seconds").and_then(Value::as_f64), ctx.param("timestamp").and_then(Value::as_str)) {
        (Some(s), _) => Duration::from_secs_f64(s.max(0.0)),
        (None, Some(ts)) => {
            let at = DateTime::parse_from_rfc3339(ts).map_err(|e| e.to_string())?.with_timezone(&Utc);
            (at - Utc::now()).to_std().unwrap_or(Duration::ZERO)
        }
        _ => return Err("wait needs seconds or timestamp".into()),
    };
    let data = ctx.event_data();
    ctx.schedule(delay, &next, TYPE_SUCCESS, data);
    Ok(())
}

pub(super) fn register(ext: &mut Extensions) {
    ext.register_action("asl.fanout", fanout);
    ext.register_action("asl.map", map_entry);
    ext.register_action("asl.end", machine_end);
    ext.register_action("asl.wait", wait);
}

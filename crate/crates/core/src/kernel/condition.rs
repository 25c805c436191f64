use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::ext::{ConditionFn, Extensions};
use super::trigger::{ConditionSpec, TriggerContext};
use crate::event::CloudEvent;
use crate::predicate::ChoiceRule;

/// Outcome of evaluating a condition against one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Fire,
    Hold,
    /// Arrived too early; park it until the trigger's state moves.
    Defer,
}

#[derive(Clone)]
pub enum Condition {
    /// Fires on every event, or only on events whose subject is listed.
    True { subjects: Option<Vec<String>> },
    CounterJoin { base: Option<u64>, map_sources: Vec<String> },
    ThresholdJoin { threshold: u64 },
    SequenceGate { sequence: Vec<String> },
    Predicate(ChoiceRule),
    Extension(Arc<ConditionFn>),
}

impl std::fmt::Debug for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::True { subjects } => write!(f, "True({subjects:?})"),
            Condition::CounterJoin { base, map_sources } => write!(f, "CounterJoin({base:?}, {map_sources:?})"),
            Condition::ThresholdJoin { threshold } => write!(f, "ThresholdJoin({threshold})"),
            Condition::SequenceGate { sequence } => write!(f, "SequenceGate({sequence:?})"),
            Condition::Predicate(r) => write!(f, "Predicate({r:?})"),
            Condition::Extension(_) => f.write_str("Extension"),
        }
    }
}

/// `max(1, floor(fraction * pool))`; the epsilon absorbs binary rounding of
/// products such as `0.65 * 40`.
pub fn threshold_count(pool: u64, fraction: f64) -> u64 {
    ((fraction * pool as f64 + 1e-9).floor() as u64).max(1)
}

fn strings(v: &Value, what: &str) -> Result<Vec<String>, String> {
    v.as_array()
        .ok_or_else(|| format!("{what} must be an array of strings"))?
        .iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| format!("{what} must be an array of strings")))
        .collect()
}

impl Condition {
    pub fn compile(spec: &ConditionSpec, ext: &Extensions) -> Result<Condition, String> {
        let p = |k: &str| spec.param(k);
        Ok(match spec.kind.as_str() {
            "true" => Condition::True { subjects: p("subjects").map(|v| strings(v, "subjects")).transpose()? },
            "counter-join" => {
                let base = match p("expected") {
                    None => None,
                    Some(v) => Some(v.as_u64().ok_or("expected must be a non-negative integer or null")?),
                };
                let map_sources = p("map_sources").map(|v| strings(v, "map_sources")).transpose()?.unwrap_or_default();
                Condition::CounterJoin { base, map_sources }
            }
            "threshold-join" => {
                let pool = p("pool").and_then(Value::as_u64).ok_or("threshold-join needs integer pool")?;
                let fraction = p("fraction").and_then(Value::as_f64).ok_or("threshold-join needs fraction")?;
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(format!("fraction {fraction} outside (0, 1]"));
                }
                Condition::ThresholdJoin { threshold: threshold_count(pool, fraction) }
            }
            "sequence-gate" => {
                let sequence = strings(p("sequence").ok_or("sequence-gate needs sequence")?, "sequence")?;
                if sequence.is_empty() {
                    return Err("empty sequence".into());
                }
                Condition::SequenceGate { sequence }
            }
            "predicate" => {
                let rule = p("rule").ok_or("predicate needs rule")?;
                Condition::Predicate(ChoiceRule::from_json(rule).map_err(|e| e.to_string())?)
            }
            other => match ext.condition(other) {
                Some(f) => Condition::Extension(f),
                None => return Err(format!("unknown condition kind {other:?}")),
            },
        })
    }

    /// Seeds counters a fresh context needs. Existing values are kept.
    pub fn init_context(&self, ctx: &mut TriggerContext) {
        let mut seed = |k: &str, v: Value| {
            ctx.data.entry(k.to_string()).or_insert(v);
        };
        match self {
            Condition::CounterJoin { base, map_sources } => {
                seed("joined", json!(0));
                if !map_sources.is_empty() {
                    seed("map_counts", json!({}));
                }
                let expected = if map_sources.is_empty() { base.map(Value::from) } else { None };
                seed("expected", expected.unwrap_or(Value::Null));
            }
            Condition::ThresholdJoin { threshold } => {
                seed("joined", json!(0));
                seed("threshold", json!(threshold));
            }
            Condition::SequenceGate { .. } => seed("position", json!(0)),
            _ => {}
        }
    }

    pub fn evaluate(&self, spec: &ConditionSpec, ctx: &mut TriggerContext, event: &CloudEvent) -> Result<Verdict, String> {
        let verdict = |fire: bool| if fire { Verdict::Fire } else { Verdict::Hold };
        match self {
            Condition::True { subjects } => {
                Ok(verdict(subjects.as_ref().is_none_or(|s| s.iter().any(|s| s == event.subject()))))
            }
            Condition::CounterJoin { .. } => {
                if !event.is_empty_join() && !count(ctx, event) {
                    return Ok(Verdict::Hold);
                }
                let joined = ctx.get_u64("joined").unwrap_or(0);
                Ok(verdict(ctx.get_u64("expected").is_some_and(|e| joined >= e)))
            }
            Condition::ThresholdJoin { threshold } => {
                if !count(ctx, event) {
                    return Ok(Verdict::Hold);
                }
                Ok(verdict(ctx.get_u64("joined").unwrap_or(0) >= *threshold))
            }
            Condition::SequenceGate { sequence } => {
                let pos = ctx.get_u64("position").unwrap_or(0) as usize;
                match sequence.iter().position(|s| s == event.subject()) {
                    Some(i) if i == pos => {
                        if pos + 1 == sequence.len() {
                            ctx.set("position", json!(sequence.len()));
                            Ok(Verdict::Fire)
                        } else {
                            ctx.set("position", json!(pos + 1));
                            Ok(Verdict::Hold)
                        }
                    }
                    Some(i) if i > pos => Ok(Verdict::Defer),
                    _ => Ok(Verdict::Hold),
                }
            }
            Condition::Predicate(rule) => Ok(verdict(rule.eval(event.data.as_ref().unwrap_or(&Value::Null)))),
            Condition::Extension(f) => f(ctx, event, &spec.params),
        }
    }

    /// Resets per-activation state of persistent triggers.
    pub fn after_fire(&self, ctx: &mut TriggerContext, transient: bool) {
        if transient {
            return;
        }
        match self {
            Condition::CounterJoin { .. } | Condition::ThresholdJoin { .. } => {
                ctx.clear_join();
                ctx.set("joined", json!(0));
            }
            Condition::SequenceGate { .. } => ctx.set("position", json!(0)),
            _ => {}
        }
    }

    pub fn is_join(&self) -> bool {
        matches!(self, Condition::CounterJoin { .. } | Condition::ThresholdJoin { .. })
    }
}

fn count(ctx: &mut TriggerContext, event: &CloudEvent) -> bool {
    if !ctx.contribute(event) {
        return false;
    }
    ctx.set("joined", json!(ctx.contributors.len()));
    true
}

/// Sets the number of events a counter-join expects from `source`.
///
/// Joins fed by map tasks learn their count only when the map runs; the
/// value is rewritten idempotently if the map action re-executes.
pub fn resolve_map_join(cond: &Condition, ctx: &mut TriggerContext, source: Option<&str>, n: u64) -> Result<(), String> {
    let Condition::CounterJoin { base, map_sources } = cond else {
        return Err("only counter-join triggers take a map count".into());
    };
    if map_sources.is_empty() {
        ctx.set("expected", json!(base.unwrap_or(0) + n));
        return Ok(());
    }
    let source = source.ok_or("join has map sources; a source is required")?;
    if !map_sources.iter().any(|s| s == source) {
        return Err(format!("{source:?} is not a map source of this join"));
    }
    let counts = ctx.data.entry("map_counts").or_insert_with(|| json!({}));
    if let Value::Object(m) = counts {
        m.insert(source.to_string(), json!(n));
    }
    let counts: Map<String, Value> = ctx.get("map_counts").and_then(Value::as_object).cloned().unwrap_or_default();
    let expected = if map_sources.iter().all(|s| counts.contains_key(s)) {
        json!(base.unwrap_or(0) + map_sources.iter().filter_map(|s| counts[s].as_u64()).sum::<u64>())
    } else {
        Value::Null
    };
    ctx.set("expected", expected);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::trigger::Spec;

    fn compiled(spec: &ConditionSpec) -> (Condition, TriggerContext) {
        let c = Condition::compile(spec, &Extensions::default()).unwrap();
        let mut ctx = TriggerContext::default();
        c.init_context(&mut ctx);
        (c, ctx)
    }

    fn ev(id: &str, subject: &str) -> CloudEvent {
        CloudEvent::success(id, "src", subject, json!(null))
    }

    #[test]
    fn counter_join_fires_on_third() {
        let spec = Spec::new("counter-join").with("expected", json!(3));
        let (c, mut ctx) = compiled(&spec);
        let got: Vec<_> = ["e1", "e2", "e3"].iter().map(|id| c.evaluate(&spec, &mut ctx, &ev(id, "j")).unwrap()).collect();
        assert_eq!(got, [Verdict::Hold, Verdict::Hold, Verdict::Fire]);
    }

    #[test]
    fn redelivered_contribution_is_not_recounted() {
        let spec = Spec::new("counter-join").with("expected", json!(3));
        let (c, mut ctx) = compiled(&spec);
        c.evaluate(&spec, &mut ctx, &ev("e1", "j")).unwrap();
        c.evaluate(&spec, &mut ctx, &ev("e2", "j")).unwrap();
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("e2", "j")).unwrap(), Verdict::Hold);
        assert_eq!(ctx.get_u64("joined"), Some(2));
    }

    #[test]
    fn threshold_of_fifty_at_65_percent_is_32() {
        // floor(0.65 * 50) = floor(32.5)
        assert_eq!(threshold_count(50, 0.65), 32);
        assert_eq!(threshold_count(40, 0.65), 26);
        assert_eq!(threshold_count(3, 0.1), 1);
        let spec = Spec::new("threshold-join").with("pool", json!(50)).with("fraction", json!(0.65));
        let (c, mut ctx) = compiled(&spec);
        let first_fire = (1..=50)
            .find(|i| c.evaluate(&spec, &mut ctx, &ev(&format!("c{i}"), "r")).unwrap() == Verdict::Fire)
            .unwrap();
        assert_eq!(first_fire, 32);
    }

    #[test]
    fn map_join_expected_resolves_from_sources() {
        let spec = Spec::new("counter-join").with("expected", json!(1)).with("map_sources", json!(["M"]));
        let (c, mut ctx) = compiled(&spec);
        assert_eq!(ctx.get("expected"), Some(&Value::Null));
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("a", "A")).unwrap(), Verdict::Hold);
        resolve_map_join(&c, &mut ctx, Some("M"), 2).unwrap();
        resolve_map_join(&c, &mut ctx, Some("M"), 2).unwrap();
        assert_eq!(ctx.get_u64("expected"), Some(3));
        assert!(resolve_map_join(&c, &mut ctx, Some("X"), 1).is_err());
        c.evaluate(&spec, &mut ctx, &ev("m0", "M")).unwrap();
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("m1", "M")).unwrap(), Verdict::Fire);
    }

    #[test]
    fn empty_map_marker_fires_zero_join() {
        let spec = Spec::new("counter-join").with("map_sources", json!(["M"]));
        let (c, mut ctx) = compiled(&spec);
        resolve_map_join(&c, &mut ctx, Some("M"), 0).unwrap();
        let marker = ev("m-empty", "M").with_extension(crate::event::EXT_EMPTY_JOIN, json!(true));
        assert_eq!(c.evaluate(&spec, &mut ctx, &marker).unwrap(), Verdict::Fire);
        assert_eq!(ctx.results_value(), json!([]));
    }

    #[test]
    fn sequence_gate_defers_early_events() {
        let spec = Spec::new("sequence-gate").with("sequence", json!(["a", "b", "c"]));
        let (c, mut ctx) = compiled(&spec);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("3", "c")).unwrap(), Verdict::Defer);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("1", "a")).unwrap(), Verdict::Hold);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("2", "b")).unwrap(), Verdict::Hold);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("3", "c")).unwrap(), Verdict::Fire);
    }

    #[test]
    fn predicate_and_subject_filter() {
        let spec = Spec::new("predicate").with("rule", json!({"Variable": "$.x", "NumericGreaterThan": 3}));
        let (c, mut ctx) = compiled(&spec);
        let e = CloudEvent::success("e", "s", "p", json!({"x": 5}));
        assert_eq!(c.evaluate(&spec, &mut ctx, &e).unwrap(), Verdict::Fire);
        let spec = Spec::new("true").with("subjects", json!(["timeout"]));
        let (c, mut ctx) = compiled(&spec);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("1", "client")).unwrap(), Verdict::Hold);
        assert_eq!(c.evaluate(&spec, &mut ctx, &ev("2", "timeout")).unwrap(), Verdict::Fire);
    }

    #[test]
    fn unknown_kinds_and_bad_params_are_rejected() {
        let ext = Extensions::default();
        assert!(Condition::compile(&Spec::new("xyz"), &ext).is_err());
        assert!(Condition::compile(&Spec::new("counter-join").with("expected", json!("three")), &ext).is_err());
        assert!(Condition::compile(&Spec::new("threshold-join").with("pool", json!(5)).with("fraction", json!(0)), &ext).is_err());
    }
}

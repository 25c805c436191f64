//! Federated-learning round orchestration built from two triggers per round:
//! a threshold-join aggregator over the client pool and a timeout
//! interceptor that forces it to close with whatever has arrived.
//!
//! Clients are simulated. A "model" is a vector of numbers; aggregation is
//! the element-wise mean of the client updates.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::event::{CloudEvent, TYPE_SUCCESS};
use crate::executor::{TaskBehavior, TaskDefinition, TaskOutcome};
use crate::kernel::action::{ActionCtx, Termination};
use crate::kernel::condition::threshold_count;
use crate::kernel::trigger::{Matcher, Spec};
use crate::kernel::{Extensions, KernelError, Trigger};
use crate::service::LocalEngine;
use crate::WorkflowStatus;

pub const ROUND_TRIGGER: &str = "fed.round";
pub const START_SUBJECT: &str = "fed.start";
pub const AGGREGATED_SUBJECT: &str = "fed.aggregated";
pub const CLIENT_TASK: &str = "fed-client";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedSpec {
    pub pool_size: u64,
    pub threshold_fraction: f64,
    pub rounds: u32,
    pub timeout_s: f64,
    /// Client latency is drawn uniformly from `[0, client_jitter_ms)`.
    pub client_jitter_ms: u64,
    pub no_response_rate: f64,
    /// 1-based round in which most clients stay silent.
    pub mass_failure_round: Option<u32>,
    pub mass_failure_rate: f64,
    pub dims: usize,
}

impl Default for FederatedSpec {
    fn default() -> Self {
        FederatedSpec {
            pool_size: 50,
            threshold_fraction: 0.65,
            rounds: 3,
            timeout_s: 2.0,
            client_jitter_ms: 50,
            no_response_rate: 0.0,
            mass_failure_round: None,
            mass_failure_rate: 0.9,
            dims: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum FederatedError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("workflow ended {status:?} after {rounds} rounds")]
    Incomplete { status: WorkflowStatus, rounds: usize },
}

impl FederatedSpec {
    pub fn validate(&self) -> Result<(), FederatedError> {
        let bad = |m: &str| Err(FederatedError::InvalidSpec(m.to_string()));
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return bad("threshold_fraction must be in (0, 1]");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1");
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return bad("timeout_s must be positive");
        }
        for p in [self.no_response_rate, self.mass_failure_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("rates must be in [0, 1]");
            }
        }
        Ok(())
    }

    /// Responses needed to close a round without the timeout.
    pub fn threshold(&self) -> u64 {
        threshold_count(self.pool_size, self.threshold_fraction)
    }

    fn round_params(&self) -> Spec {
        Spec::new("fed.round")
            .with("pool", json!(self.pool_size))
            .with("fraction", json!(self.threshold_fraction))
            .with("rounds", json!(self.rounds))
            .with("timeout_s", json!(self.timeout_s))
    }
}

/// The persistent round trigger. Per-round triggers are added as rounds open.
pub fn triggers(spec: &FederatedSpec) -> Vec<Trigger> {
    vec![Trigger::new(
        ROUND_TRIGGER,
        vec![Matcher::success(START_SUBJECT), Matcher::success(AGGREGATED_SUBJECT)],
        Spec::new("true"),
        spec.round_params(),
    )]
}

pub fn start_event(run_id: &str, spec: &FederatedSpec) -> CloudEvent {
    CloudEvent::success(format!("{run_id}/start"), "tf://client", START_SUBJECT, json!({"weights": vec![0.0; spec.dims]}))
}

/// Simulated client: returns the model nudged by a seeded random step.
/// In the mass-failure round most clients never answer.
pub fn client_task(spec: &FederatedSpec) -> TaskDefinition {
    let (silent_round, silent_rate, base_rate) = (spec.mass_failure_round, spec.mass_failure_rate, spec.no_response_rate);
    let def = TaskDefinition::new(
        CLIENT_TASK,
        TaskBehavior::Scripted(Arc::new(move |input, rng| {
            let round = input.get("round").and_then(Value::as_u64).unwrap_or(0) as u32;
            let rate = if Some(round) == silent_round { silent_rate } else { base_rate };
            if rate > 0.0 && rng.gen_bool(rate) {
                return TaskOutcome::NoResponse;
            }
            let weights: Vec<f64> = input
                .get("weights")
                .and_then(Value::as_array)
                .map(|w| w.iter().map(|x| x.as_f64().unwrap_or(0.0) + rng.gen_range(-0.1..0.1)).collect())
                .unwrap_or_default();
            TaskOutcome::Success(json!({"client": input.get("client"), "weights": weights}))
        })),
    );
    def.with_jitter(Duration::from_millis(spec.client_jitter_ms))
}

fn client_subject(round: u64) -> String {
    format!("client/{round}")
}

fn agg_id(round: u64) -> String {
    format!("agg/{round}")
}

fn timeout_subject(round: u64) -> String {
    format!("timeout/{round}")
}

fn weights_of(v: &Value) -> Vec<f64> {
    v.get("weights").and_then(Value::as_array).map(|w| w.iter().filter_map(Value::as_f64).collect()).unwrap_or_default()
}

/// Opens the next round, or finishes after the last one.
fn round_action(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let num = |k: &str| ctx.param(k).and_then(Value::as_f64).ok_or(format!("fed.round needs {k}"));
    let (pool, fraction, rounds, timeout_s) = (num("pool")? as u64, num("fraction")?, num("rounds")? as u64, num("timeout_s")?);
    let data = ctx.event_data();
    let weights = weights_of(&data);

    let round = if ctx.event.subject() == START_SUBJECT {
        1
    } else {
        let closed = data.get("round").and_then(Value::as_u64).ok_or("aggregate without round")?;
        let mut summaries = ctx.context.get("summaries").cloned().unwrap_or(json!([]));
        summaries.as_array_mut().ok_or("summaries is not a list")?.push(data.clone());
        ctx.context.set("summaries", summaries.clone());
        if closed >= rounds {
            ctx.terminate(Termination::Finished, json!({"rounds": summaries, "weights": weights}));
            return Ok(());
        }
        closed + 1
    };
    ctx.context.set("round", json!(round));

    let agg = agg_id(round);
    let aggregator = Trigger::new(
        &agg,
        vec![Matcher::success(client_subject(round))],
        Spec::new("threshold-join").with("pool", json!(pool)).with("fraction", json!(fraction)),
        Spec::new("fed.aggregate").with("round", json!(round)).with("weights", json!(weights)),
    )
    .transient();
    let mut timeout = Trigger::new(
        format!("timeout/{round}"),
        vec![Matcher::success(timeout_subject(round))],
        Spec::new("true").with("subjects", json!([timeout_subject(round)])),
        Spec::new("force-fire"),
    )
    .transient();
    timeout.intercepts = vec![agg.clone()];
    ctx.add_trigger(aggregator);
    ctx.add_trigger(timeout);

    let items: Vec<Value> = (0..pool).map(|c| json!({"round": round, "client": c, "weights": weights})).collect();
    ctx.invoke_map(CLIENT_TASK, &client_subject(round), items);
    ctx.schedule(Duration::from_secs_f64(timeout_s), &timeout_subject(round), TYPE_SUCCESS, json!({"round": round}));
    Ok(())
}

/// Averages the updates received so far and reports how the round closed.
fn aggregate_action(ctx: &mut ActionCtx<'_>) -> Result<(), String> {
    let round = ctx.param("round").and_then(Value::as_u64).ok_or("fed.aggregate needs round")?;
    let previous: Vec<f64> = ctx.param("weights").map(|w| weights_of(&json!({"weights": w}))).unwrap_or_default();
    let updates: Vec<Vec<f64>> = ctx.context.ordered_results().into_iter().filter(|r| r.ok).map(|r| weights_of(&r.data)).collect();
    let weights = if updates.is_empty() {
        previous
    } else {
        let dims = updates[0].len();
        (0..dims).map(|d| updates.iter().map(|u| u.get(d).copied().unwrap_or(0.0)).sum::<f64>() / updates.len() as f64).collect()
    };
    let closed_by = if ctx.event.subject() == timeout_subject(round) { "timeout" } else { "threshold" };
    let summary = json!({"round": round, "responses": updates.len(), "closed_by": closed_by, "weights": weights});
    ctx.emit(AGGREGATED_SUBJECT, TYPE_SUCCESS, summary);
    Ok(())
}

pub(crate) fn register(ext: &mut Extensions) {
    ext.register_action("fed.round", round_action);
    ext.register_action("fed.aggregate", aggregate_action);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub responses: u64,
    pub closed_by: String,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FederatedReport {
    pub rounds: Vec<RoundSummary>,
    /// Fire count per aggregator trigger.
    pub aggregations: BTreeMap<String, u64>,
    pub threshold: u64,
    pub elapsed_s: f64,
}

/// Runs all rounds on a local engine.
pub fn run_federated(spec: &FederatedSpec, seed: u64) -> Result<FederatedReport, FederatedError> {
    spec.validate()?;
    let engine = LocalEngine::new(seed);
    engine.executor.register(client_task(spec)).map_err(|e| FederatedError::InvalidSpec(e.to_string()))?;
    let started = std::time::Instant::now();
    let limit = Duration::from_secs_f64(spec.timeout_s * (spec.rounds as f64 + 1.0) + 10.0);
    let wf = format!("fed-{seed}");
    let k = engine.run(&wf, triggers(spec), &start_event(&wf, spec), limit)?;
    let summaries: Vec<RoundSummary> = k
        .result()
        .and_then(|r| r.get("rounds"))
        .map(|r| serde_json::from_value(r.clone()).unwrap_or_default())
        .unwrap_or_default();
    if k.status() != WorkflowStatus::Finished {
        return Err(FederatedError::Incomplete { status: k.status(), rounds: summaries.len() });
    }
    let aggregations = (1..=spec.rounds as u64).filter_map(|r| k.trigger(&agg_id(r)).map(|t| (agg_id(r), t.fired))).collect();
    Ok(FederatedReport { rounds: summaries, aggregations, threshold: spec.threshold(), elapsed_s: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_of_fifty_at_065_is_32() {
        assert_eq!(FederatedSpec::default().threshold(), 32);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            FederatedSpec { threshold_fraction: 0.0, ..Default::default() },
            FederatedSpec { threshold_fraction: 1.5, ..Default::default() },
            FederatedSpec { rounds: 0, ..Default::default() },
            FederatedSpec { timeout_s: 0.0, ..Default::default() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }
}

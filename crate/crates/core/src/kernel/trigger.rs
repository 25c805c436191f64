use imbl::{OrdMap, OrdSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::event::{CloudEvent, DedupKey, EventKind, TYPE_SUCCESS};

/// Activation matcher: exact subject plus a type pattern that is either
/// exact or ends in `*` (prefix match). `"*"` alone matches any type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    pub subject: String,
    #[serde(rename = "type", default = "any_type")]
    pub type_pattern: String,
}

fn any_type() -> String {
    "*".to_string()
}

impl Matcher {
    pub fn new(subject: impl Into<String>, type_pattern: impl Into<String>) -> Self {
        Matcher { subject: subject.into(), type_pattern: type_pattern.into() }
    }

    pub fn any(subject: impl Into<String>) -> Self {
        Matcher::new(subject, "*")
    }

    pub fn success(subject: impl Into<String>) -> Self {
        Matcher::new(subject, TYPE_SUCCESS)
    }

    pub fn matches(&self, event: &CloudEvent) -> bool {
        self.subject == event.subject() && type_matches(&self.type_pattern, &event.event_type)
    }
}

pub fn type_matches(pattern: &str, event_type: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => event_type.starts_with(prefix),
        None => pattern == event_type,
    }
}

/// Named kind plus parameters; used for both conditions and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

pub type ConditionSpec = Spec;
pub type ActionSpec = Spec;

impl Spec {
    pub fn new(kind: impl Into<String>) -> Self {
        Spec { kind: kind.into(), params: Map::new() }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn param(&self, key: &str) -> Option<&Value> {
        self.params.get(key).filter(|v| !v.is_null())
    }
}

/// One contribution to a join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    pub ok: bool,
    #[serde(default)]
    pub data: Value,
}

/// Fault-tolerant state of a trigger, checkpointed with every fire.
///
/// `contributors` holds the `(source, id)` keys counted by a join so that a
/// redelivered event never counts twice. `results` keeps their payloads for
/// aggregation. Both are persistent collections, so the per-batch
/// checkpoint copy of a large join is cheap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerContext {
    #[serde(default)]
    pub data: Map<String, Value>,
    #[serde(default, skip_serializing_if = "OrdSet::is_empty")]
    pub contributors: OrdSet<DedupKey>,
    #[serde(default, skip_serializing_if = "OrdMap::is_empty")]
    pub results: OrdMap<String, JoinResult>,
}

impl TriggerContext {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.data.get(key)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.data.insert(key.to_string(), value);
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.data.get(key).and_then(Value::as_u64)
    }

    /// Records `event` as a join contribution. False when already counted.
    pub fn contribute(&mut self, event: &CloudEvent) -> bool {
        let key = event.dedup_key();
        if self.contributors.insert(key.clone()).is_some() {
            return false;
        }
        let ok = event.kind() != EventKind::Failure;
        self.results.insert(key.as_str().to_string(), JoinResult { index: event.index(), ok, data: event.data.clone().unwrap_or(Value::Null) });
        true
    }

    /// Join results ordered by instance index, then by event identity.
    pub fn ordered_results(&self) -> Vec<&JoinResult> {
        let mut out: Vec<(&String, &JoinResult)> = self.results.iter().collect();
        out.sort_by(|(ka, a), (kb, b)| a.index.unwrap_or(u64::MAX).cmp(&b.index.unwrap_or(u64::MAX)).then(ka.cmp(kb)));
        out.into_iter().map(|(_, r)| r).collect()
    }

    /// Result payloads in order, as one JSON array.
    pub fn results_value(&self) -> Value {
        Value::Array(self.ordered_results().into_iter().map(|r| r.data.clone()).collect())
    }

    pub fn any_failed(&self) -> bool {
        self.results.values().any(|r| !r.ok)
    }

    pub fn clear_join(&mut self) {
        self.contributors.clear();
        self.results.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub id: String,
    /// Interception selector; defaults to the condition kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_id: Option<String>,
    pub activation: Vec<Matcher>,
    pub condition: ConditionSpec,
    pub action: ActionSpec,
    #[serde(default)]
    pub context: TriggerContext,
    #[serde(default)]
    pub transient: bool,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
    #[serde(default)]
    pub fired: u64,
    /// Triggers this one intercepts; it also activates on their events.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intercepts: Vec<String>,
}

fn enabled_default() -> bool {
    true
}

impl Trigger {
    pub fn new(id: impl Into<String>, activation: Vec<Matcher>, condition: ConditionSpec, action: ActionSpec) -> Self {
        Trigger {
            id: id.into(),
            condition_id: None,
            activation,
            condition,
            action,
            context: TriggerContext::default(),
            transient: false,
            enabled: true,
            fired: 0,
            intercepts: Vec::new(),
        }
    }

    pub fn transient(mut self) -> Self {
        self.transient = true;
        self
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn with_condition_id(mut self, id: impl Into<String>) -> Self {
        self.condition_id = Some(id.into());
        self
    }

    pub fn with_context(mut self, key: &str, value: Value) -> Self {
        self.context.set(key, value);
        self
    }

    pub fn condition_id(&self) -> &str {
        self.condition_id.as_deref().unwrap_or(&self.condition.kind)
    }

    /// Compact state summary used by state documents.
    pub fn summary(&self) -> Value {
        json!({
            "id": self.id,
            "condition": self.condition.kind,
            "action": self.action.kind,
            "enabled": self.enabled,
            "transient": self.transient,
            "fired": self.fired > 0,
            "fire_count": self.fired,
            "context": self.context.data,
        })
    }
}

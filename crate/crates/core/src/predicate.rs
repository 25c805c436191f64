//! Boolean rules over JSON payloads, written in the Choice-rule syntax of the
//! States Language (`{"Variable": "$.x", "NumericGreaterThan": 3}`,
//! `{"And": [...]}`, `{"Not": {...}}`).

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid rule: {0}")]
pub struct RuleError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub enum Comparison {
    NumericEquals(f64),
    NumericGreaterThan(f64),
    NumericLessThan(f64),
    StringEquals(String),
    TimestampGreaterThan(DateTime<Utc>),
    BooleanEquals(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChoiceRule {
    Compare { variable: JsonPath, cmp: Comparison },
    And(Vec<ChoiceRule>),
    Or(Vec<ChoiceRule>),
    Not(Box<ChoiceRule>),
    Const(bool),
}

impl ChoiceRule {
    pub fn eval(&self, input: &Value) -> bool {
        match self {
            ChoiceRule::Const(b) => *b,
            ChoiceRule::And(rules) => rules.iter().all(|r| r.eval(input)),
            ChoiceRule::Or(rules) => rules.iter().any(|r| r.eval(input)),
            ChoiceRule::Not(rule) => !rule.eval(input),
            ChoiceRule::Compare { variable, cmp } => {
                let Some(v) = variable.select(input) else { return false };
                match cmp {
                    Comparison::NumericEquals(x) => v.as_f64().is_some_and(|n| n == *x),
                    Comparison::NumericGreaterThan(x) => v.as_f64().is_some_and(|n| n > *x),
                    Comparison::NumericLessThan(x) => v.as_f64().is_some_and(|n| n < *x),
                    Comparison::StringEquals(s) => v.as_str() == Some(s.as_str()),
                    Comparison::BooleanEquals(b) => v.as_bool() == Some(*b),
                    Comparison::TimestampGreaterThan(t) => v
                        .as_str()
                        .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                        .is_some_and(|ts| ts.with_timezone(&Utc) > *t),
                }
            }
        }
    }

    /// `self` holds and none of `prior` does: first-match-wins ordering.
    pub fn first_match(self, prior: &[ChoiceRule]) -> ChoiceRule {
        if prior.is_empty() {
            return self;
        }
        ChoiceRule::And(vec![self, ChoiceRule::Not(Box::new(ChoiceRule::Or(prior.to_vec())))])
    }

    /// None of `rules` holds.
    pub fn none_of(rules: &[ChoiceRule]) -> ChoiceRule {
        ChoiceRule::Not(Box::new(ChoiceRule::Or(rules.to_vec())))
    }

    pub fn from_json(value: &Value) -> Result<ChoiceRule, RuleError> {
        let obj = value.as_object().ok_or_else(|| RuleError("rule must be an object".into()))?;
        if let Some(b) = obj.get("Const") {
            return b.as_bool().map(ChoiceRule::Const).ok_or_else(|| RuleError("Const must be boolean".into()));
        }
        for (key, ctor) in [("And", ChoiceRule::And as fn(_) -> _), ("Or", ChoiceRule::Or)] {
            if let Some(list) = obj.get(key) {
                let list = list.as_array().ok_or_else(|| RuleError(format!("{key} must be an array")))?;
                if list.is_empty() {
                    return Err(RuleError(format!("{key} must not be empty")));
                }
                return Ok(ctor(list.iter().map(ChoiceRule::from_json).collect::<Result<_, _>>()?));
            }
        }
        if let Some(inner) = obj.get("Not") {
            return Ok(ChoiceRule::Not(Box::new(ChoiceRule::from_json(inner)?)));
        }
        let variable = obj
            .get("Variable")
            .and_then(Value::as_str)
            .ok_or_else(|| RuleError("comparison needs a Variable".into()))?;
        let variable = JsonPath::parse(variable)?;
        let num = |v: &Value, k: &str| v.as_f64().ok_or_else(|| RuleError(format!("{k} expects a number")));
        let mut found = None;
        for (k, v) in obj {
            let cmp = match k.as_str() {
                "NumericEquals" => Comparison::NumericEquals(num(v, k)?),
                "NumericGreaterThan" => Comparison::NumericGreaterThan(num(v, k)?),
                "NumericLessThan" => Comparison::NumericLessThan(num(v, k)?),
                "StringEquals" => Comparison::StringEquals(
                    v.as_str().ok_or_else(|| RuleError("StringEquals expects a string".into()))?.to_string(),
                ),
                "BooleanEquals" => {
                    Comparison::BooleanEquals(v.as_bool().ok_or_else(|| RuleError("BooleanEquals expects a bool".into()))?)
                }
                "TimestampGreaterThan" => {
                    let s = v.as_str().ok_or_else(|| RuleError("TimestampGreaterThan expects a string".into()))?;
                    let t = DateTime::parse_from_rfc3339(s).map_err(|e| RuleError(format!("bad timestamp {s:?}: {e}")))?;
                    Comparison::TimestampGreaterThan(t.with_timezone(&Utc))
                }
                _ => continue,
            };
            if found.replace(cmp).is_some() {
                return Err(RuleError("more than one comparison operator".into()));
            }
        }
        let cmp = found.ok_or_else(|| RuleError("no supported comparison operator".into()))?;
        Ok(ChoiceRule::Compare { variable, cmp })
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        match self {
            ChoiceRule::Const(b) => {
                m.insert("Const".into(), Value::Bool(*b));
            }
            ChoiceRule::And(rules) => {
                m.insert("And".into(), rules.iter().map(ChoiceRule::to_json).collect());
            }
            ChoiceRule::Or(rules) => {
                m.insert("Or".into(), rules.iter().map(ChoiceRule::to_json).collect());
            }
            ChoiceRule::Not(rule) => {
                m.insert("Not".into(), rule.to_json());
            }
            ChoiceRule::Compare { variable, cmp } => {
                m.insert("Variable".into(), Value::String(variable.to_string()));
                let (k, v) = match cmp {
                    Comparison::NumericEquals(x) => ("NumericEquals", Value::from(*x)),
                    Comparison::NumericGreaterThan(x) => ("NumericGreaterThan", Value::from(*x)),
                    Comparison::NumericLessThan(x) => ("NumericLessThan", Value::from(*x)),
                    Comparison::StringEquals(s) => ("StringEquals", Value::String(s.clone())),
                    Comparison::BooleanEquals(b) => ("BooleanEquals", Value::Bool(*b)),
                    Comparison::TimestampGreaterThan(t) => ("TimestampGreaterThan", Value::String(t.to_rfc3339())),
                };
                m.insert(k.into(), v);
            }
        }
        Value::Object(m)
    }
}

impl Serialize for ChoiceRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChoiceRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        ChoiceRule::from_json(&Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Minimal JSONPath: `$`, `$.a.b`, `$.items[2]`, `$[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JsonPath(Vec<PathStep>);

#[derive(Debug, Clone, PartialEq, Eq)]
enum PathStep {
    Field(String),
    Index(usize),
}

impl JsonPath {
    pub fn root() -> Self {
        JsonPath(Vec::new())
    }

    pub fn parse(path: &str) -> Result<JsonPath, RuleError> {
        let rest = path.strip_prefix('$').ok_or_else(|| RuleError(format!("path {path:?} must start with '$'")))?;
        let mut steps = Vec::new();
        let mut chars = rest.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '.' => {
                    let mut name = String::new();
                    while let Some(&n) = chars.peek() {
                        if n == '.' || n == '[' {
                            break;
                        }
                        name.push(n);
                        chars.next();
                    }
                    if name.is_empty() {
                        return Err(RuleError(format!("empty field in path {path:?}")));
                    }
                    steps.push(PathStep::Field(name));
                }
                '[' => {
                    let mut digits = String::new();
                    for n in chars.by_ref() {
                        if n == ']' {
                            break;
                        }
                        digits.push(n);
                    }
                    let idx = digits.parse().map_err(|_| RuleError(format!("bad index in path {path:?}")))?;
                    steps.push(PathStep::Index(idx));
                }
                _ => return Err(RuleError(format!("unexpected {c:?} in path {path:?}"))),
            }
        }
        Ok(JsonPath(steps))
    }

    pub fn select<'a>(&self, value: &'a Value) -> Option<&'a Value> {
        self.0.iter().try_fold(value, |v, step| match step {
            PathStep::Field(name) => v.get(name),
            PathStep::Index(i) => v.get(*i),
        })
    }
}

impl std::fmt::Display for JsonPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("$")?;
        for step in &self.0 {
            match step {
                PathStep::Field(name) => write!(f, ".{name}")?,
                PathStep::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

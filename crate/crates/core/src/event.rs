//! CloudEvents 1.0 representation, structured-mode JSON encoding and
//! duplicate suppression.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

pub const SPEC_VERSION: &str = "1.0";
pub const DEFAULT_CONTENT_TYPE: &str = "application/json";

pub const TYPE_SUCCESS: &str = "event.triggerflow.termination.success";
pub const TYPE_FAILURE: &str = "event.triggerflow.termination.failure";
pub const TYPE_TIMEOUT: &str = "event.triggerflow.termination.timeout";
/// Type pattern matching every termination event.
pub const TYPE_ANY_TERMINATION: &str = "event.triggerflow.termination.*";

/// Extension attribute carrying the owning workflow identifier.
pub const EXT_WORKFLOW: &str = "workflow";
/// Extension attribute carrying the item index of a map instance.
pub const EXT_INDEX: &str = "index";
/// Extension attribute marking the synthetic event that closes an empty join.
pub const EXT_EMPTY_JOIN: &str = "emptyjoin";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EventError {
    #[error("malformed event: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudEvent {
    pub id: String,
    pub source: String,
    pub specversion: String,
    pub subject: Option<String>,
    pub event_type: String,
    pub time: Option<DateTime<Utc>>,
    pub datacontenttype: Option<String>,
    pub data: Option<Value>,
    pub extensions: BTreeMap<String, Value>,
}

impl CloudEvent {
    /// New event stamped with the current time.
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        subject: impl Into<String>,
        event_type: impl Into<String>,
    ) -> Self {
        CloudEvent {
            id: id.into(),
            source: source.into(),
            specversion: SPEC_VERSION.to_string(),
            subject: Some(subject.into()),
            event_type: event_type.into(),
            time: Some(Utc::now()),
            datacontenttype: None,
            data: None,
            extensions: BTreeMap::new(),
        }
    }

    pub fn success(id: impl Into<String>, source: impl Into<String>, subject: impl Into<String>, data: Value) -> Self {
        CloudEvent::new(id, source, subject, TYPE_SUCCESS).with_data(data)
    }

    pub fn failure(id: impl Into<String>, source: impl Into<String>, subject: impl Into<String>, data: Value) -> Self {
        CloudEvent::new(id, source, subject, TYPE_FAILURE).with_data(data)
    }

    pub fn with_data(mut self, data: Value) -> Self {
        self.data = Some(data);
        self
    }

    pub fn with_extension(mut self, key: impl Into<String>, value: Value) -> Self {
        self.extensions.insert(key.into(), value);
        self
    }

    pub fn without_time(mut self) -> Self {
        self.time = None;
        self
    }

    pub fn subject(&self) -> &str {
        self.subject.as_deref().unwrap_or("")
    }

    pub fn content_type(&self) -> &str {
        self.datacontenttype.as_deref().unwrap_or(DEFAULT_CONTENT_TYPE)
    }

    pub fn kind(&self) -> EventKind {
        EventKind::classify(&self.event_type)
    }

    pub fn workflow(&self) -> Option<&str> {
        self.extensions.get(EXT_WORKFLOW).and_then(Value::as_str)
    }

    pub fn index(&self) -> Option<u64> {
        self.extensions.get(EXT_INDEX).and_then(Value::as_u64)
    }

    pub fn is_empty_join(&self) -> bool {
        matches!(self.extensions.get(EXT_EMPTY_JOIN), Some(Value::Bool(true)))
    }

    pub fn dedup_key(&self) -> DedupKey {
        DedupKey::new(&self.source, &self.id)
    }

    /// Checks the attribute invariants required for a trigger-activating event.
    pub fn validate(&self) -> Result<(), EventError> {
        if self.id.is_empty() {
            return Err(EventError::Malformed("empty id".into()));
        }
        if self.source.is_empty() {
            return Err(EventError::Malformed("empty source".into()));
        }
        if self.event_type.is_empty() {
            return Err(EventError::Malformed("empty type".into()));
        }
        if self.subject.as_deref() == Some("") {
            return Err(EventError::Malformed("empty subject".into()));
        }
        Ok(())
    }
}

impl Serialize for CloudEvent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("source", &self.source)?;
        map.serialize_entry("specversion", &self.specversion)?;
        if let Some(subject) = &self.subject {
            map.serialize_entry("subject", subject)?;
        }
        map.serialize_entry("type", &self.event_type)?;
        if let Some(time) = &self.time {
            map.serialize_entry("time", &time.to_rfc3339_opts(SecondsFormat::AutoSi, true))?;
        }
        if let Some(ct) = &self.datacontenttype {
            map.serialize_entry("datacontenttype", ct)?;
        }
        if let Some(data) = &self.data {
            map.serialize_entry("data", data)?;
        }
        for (k, v) in &self.extensions {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for CloudEvent {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = Map::deserialize(deserializer)?;
        CloudEvent::from_map(map).map_err(serde::de::Error::custom)
    }
}

const RESERVED: [&str; 9] = [
    "id",
    "source",
    "specversion",
    "subject",
    "type",
    "time",
    "datacontenttype",
    "data",
    "data_base64",
];

impl CloudEvent {
    pub fn from_value(value: Value) -> Result<Self, EventError> {
        match value {
            Value::Object(map) => CloudEvent::from_map(map),
            _ => Err(EventError::Malformed("event is not a JSON object".into())),
        }
    }

    fn from_map(mut map: Map<String, Value>) -> Result<Self, EventError> {
        fn required(map: &mut Map<String, Value>, key: &str) -> Result<String, EventError> {
            match map.remove(key) {
                Some(Value::String(s)) if !s.is_empty() => Ok(s),
                Some(Value::String(_)) => Err(EventError::Malformed(format!("empty attribute {key:?}"))),
                Some(_) => Err(EventError::Malformed(format!("attribute {key:?} is not a string"))),
                None => Err(EventError::Malformed(format!("missing attribute {key:?}"))),
            }
        }
        fn optional(map: &mut Map<String, Value>, key: &str) -> Result<Option<String>, EventError> {
            match map.remove(key) {
                Some(Value::String(s)) => Ok(Some(s)),
                Some(Value::Null) | None => Ok(None),
                Some(_) => Err(EventError::Malformed(format!("attribute {key:?} is not a string"))),
            }
        }

        let id = required(&mut map, "id")?;
        let source = required(&mut map, "source")?;
        let specversion = required(&mut map, "specversion")?;
        if specversion != SPEC_VERSION {
            return Err(EventError::Malformed(format!("unsupported specversion {specversion:?}")));
        }
        let event_type = required(&mut map, "type")?;
        let subject = optional(&mut map, "subject")?;
        let time = match optional(&mut map, "time")? {
            Some(t) => Some(
                DateTime::parse_from_rfc3339(&t)
                    .map_err(|e| EventError::Malformed(format!("bad time {t:?}: {e}")))?
                    .with_timezone(&Utc),
            ),
            None => None,
        };
        let datacontenttype = optional(&mut map, "datacontenttype")?;
        let data = map.remove("data");
        if map.contains_key("data_base64") {
            return Err(EventError::Malformed("binary data is not supported".into()));
        }
        let extensions = map.into_iter().filter(|(k, _)| !RESERVED.contains(&k.as_str())).collect();
        Ok(CloudEvent { id, source, specversion, subject, event_type, time, datacontenttype, data, extensions })
    }
}

/// Canonical structured-mode JSON encoding.
pub fn encode_event(event: &CloudEvent) -> Vec<u8> {
    serde_json::to_vec(event).expect("cloud event serialization is infallible")
}

pub fn decode_event(raw: &[u8]) -> Result<CloudEvent, EventError> {
    let value: Value = serde_json::from_slice(raw).map_err(|e| EventError::Malformed(e.to_string()))?;
    CloudEvent::from_value(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Success,
    Failure,
    Other,
}

impl EventKind {
    pub fn classify(event_type: &str) -> EventKind {
        match event_type.rsplit('.').next() {
            Some("success") => EventKind::Success,
            Some("failure") => EventKind::Failure,
            _ => EventKind::Other,
        }
    }
}

/// `(source, id)` identity of an event.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey(Box<str>);

const KEY_SEP: char = '\u{1f}';

impl DedupKey {
    pub fn new(source: &str, id: &str) -> Self {
        let mut s = String::with_capacity(source.len() + id.len() + 1);
        s.push_str(source);
        s.push(KEY_SEP);
        s.push_str(id);
        DedupKey(s.into_boxed_str())
    }

    pub fn source(&self) -> &str {
        self.0.split(KEY_SEP).next().unwrap_or("")
    }

    pub fn id(&self) -> &str {
        self.0.split_once(KEY_SEP).map(|(_, id)| id).unwrap_or("")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.source(), self.id())
    }
}

impl Serialize for DedupKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (self.source(), self.id()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DedupKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (source, id) = <(String, String)>::deserialize(deserializer)?;
        Ok(DedupKey::new(&source, &id))
    }
}

pub const DEFAULT_DEDUP_CAPACITY: usize = 100_000;

/// Bounded set of seen `(source, id)` pairs with insertion-order eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupIndex {
    capacity: usize,
    seen: HashSet<DedupKey>,
    order: VecDeque<DedupKey>,
}

impl Default for DedupIndex {
    fn default() -> Self {
        DedupIndex::new(DEFAULT_DEDUP_CAPACITY)
    }
}

impl DedupIndex {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        DedupIndex { capacity, seen: HashSet::new(), order: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, key: &DedupKey) -> bool {
        self.seen.contains(key)
    }

    /// Returns `true` and records the pair when it has not been seen.
    pub fn check_and_record(&mut self, event: &CloudEvent) -> bool {
        self.record(event.dedup_key())
    }

    pub fn record(&mut self, key: DedupKey) -> bool {
        if self.seen.contains(&key) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(evicted) = self.order.pop_front() {
                self.seen.remove(&evicted);
            }
        }
        self.seen.insert(key.clone());
        self.order.push_back(key);
        true
    }

    /// Keys in insertion order.
    pub fn keys(&self) -> impl Iterator<Item = &DedupKey> {
        self.order.iter()
    }

    pub fn from_keys(capacity: usize, keys: impl IntoIterator<Item = DedupKey>) -> Self {
        let mut index = DedupIndex::new(capacity);
        for key in keys {
            index.record(key);
        }
        index
    }
}

impl Serialize for DedupIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            capacity: usize,
            keys: Vec<&'a DedupKey>,
        }
        Snapshot { capacity: self.capacity, keys: self.order.iter().collect() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DedupIndex {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Snapshot {
            capacity: usize,
            keys: Vec<DedupKey>,
        }
        let snap = Snapshot::deserialize(deserializer)?;
        Ok(DedupIndex::from_keys(snap.capacity, snap.keys))
    }
}

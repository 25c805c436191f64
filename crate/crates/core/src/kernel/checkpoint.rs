//! Fire checkpoints. The kernel hands the store a delta after every fire;
//! stores merge deltas into one document per workflow.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::trigger::Trigger;
use super::WorkflowStatus;
use crate::bus::{DeadLetterQueue, ParkedEvent};
use crate::event::{CloudEvent, DedupIndex, DedupKey, DEFAULT_DEDUP_CAPACITY};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint for {workflow}: {reason}")]
    Corrupt { workflow: String, reason: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Internal work that was queued but not yet processed when the checkpoint
/// was taken. Bus records are not listed: they are redelivered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PendingItem {
    Sink { event: CloudEvent, depth: u32 },
    Replay { entry: ParkedEvent },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelCounters {
    pub events: u64,
    pub duplicates: u64,
    pub fires: u64,
    pub parked: u64,
    pub dispatched: u64,
    pub action_failures: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub workflow: String,
    pub triggers: Vec<Trigger>,
    pub dedup: DedupIndex,
    pub dlq: DeadLetterQueue,
    /// Every bus offset below this one has been processed.
    pub next_offset: u64,
    /// Processed offsets at or above `next_offset` (shuffled delivery).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub processed_above: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<PendingItem>,
    pub status: WorkflowStatus,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub global_context: Map<String, Value>,
    #[serde(default)]
    pub counters: KernelCounters,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn empty(workflow: &str, dedup_capacity: usize) -> Self {
        Checkpoint {
            workflow: workflow.to_string(),
            triggers: Vec::new(),
            dedup: DedupIndex::new(dedup_capacity),
            dlq: DeadLetterQueue::default(),
            next_offset: 0,
            processed_above: Vec::new(),
            pending: Vec::new(),
            status: WorkflowStatus::Running,
            result: None,
            global_context: Map::new(),
            counters: KernelCounters::default(),
            positions: HashMap::new(),
        }
    }

    pub fn trigger(&self, id: &str) -> Option<&Trigger> {
        self.triggers.iter().find(|t| t.id == id)
    }

    pub fn apply(&mut self, delta: CheckpointDelta) {
        if self.positions.len() != self.triggers.len() {
            self.positions = self.triggers.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        }
        for t in delta.triggers {
            match self.positions.get(&t.id) {
                Some(&i) => self.triggers[i] = t,
                None => {
                    self.positions.insert(t.id.clone(), self.triggers.len());
                    self.triggers.push(t);
                }
            }
        }
        for key in delta.dedup_added {
            self.dedup.record(key);
        }
        if let Some(dlq) = delta.dlq {
            self.dlq = dlq;
        }
        if let Some(global) = delta.global_context {
            self.global_context = global;
        }
        self.next_offset = delta.next_offset;
        self.processed_above = delta.processed_above;
        self.pending = delta.pending;
        self.status = delta.status;
        self.result = delta.result;
        self.counters = delta.counters;
    }
}

/// Everything that changed since the previous checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointDelta {
    pub workflow: String,
    pub dedup_capacity: usize,
    /// Changed or new triggers, in registration order.
    pub triggers: Vec<Trigger>,
    pub dedup_added: Vec<DedupKey>,
    pub dlq: Option<DeadLetterQueue>,
    pub global_context: Option<Map<String, Value>>,
    pub next_offset: u64,
    pub processed_above: Vec<u64>,
    pub pending: Vec<PendingItem>,
    pub status: WorkflowStatus,
    pub result: Option<Value>,
    pub counters: KernelCounters,
}

pub trait CheckpointStore: Send + Sync {
    fn load(&self, workflow: &str) -> Result<Option<Checkpoint>, CheckpointError>;
    fn commit(&self, delta: CheckpointDelta) -> Result<(), CheckpointError>;
    fn delete(&self, workflow: &str) -> Result<(), CheckpointError>;
}

#[derive(Default)]
pub struct MemoryCheckpointStore {
    docs: Mutex<HashMap<String, Checkpoint>>,
}

impl MemoryCheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces a stored document, e.g. to plant a corrupt one in tests.
    pub fn put(&self, checkpoint: Checkpoint) {
        self.docs.lock().insert(checkpoint.workflow.clone(), checkpoint);
    }
}

impl CheckpointStore for MemoryCheckpointStore {
    fn load(&self, workflow: &str) -> Result<Option<Checkpoint>, CheckpointError> {
        Ok(self.docs.lock().get(workflow).cloned())
    }

    fn commit(&self, delta: CheckpointDelta) -> Result<(), CheckpointError> {
        let mut docs = self.docs.lock();
        let doc = docs
            .entry(delta.workflow.clone())
            .or_insert_with(|| Checkpoint::empty(&delta.workflow, delta.dedup_capacity));
        doc.apply(delta);
        Ok(())
    }

    fn delete(&self, workflow: &str) -> Result<(), CheckpointError> {
        self.docs.lock().remove(workflow);
        Ok(())
    }
}

/// `<root>/<workflow>/checkpoint.json`, rewritten atomically on each commit.
pub struct FileCheckpointStore {
    root: PathBuf,
    cache: Mutex<HashMap<String, Checkpoint>>,
}

impl FileCheckpointStore {
    pub fn new(root: impl AsRef<Path>) -> Self {
        FileCheckpointStore { root: root.as_ref().to_path_buf(), cache: Mutex::new(HashMap::new()) }
    }

    pub fn path(&self, workflow: &str) -> PathBuf {
        self.root.join(workflow).join("checkpoint.json")
    }

    fn read(&self, workflow: &str) -> Result<Option<Checkpoint>, CheckpointError> {
        let path = self.path(workflow);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CheckpointError::Corrupt { workflow: workflow.to_string(), reason: e.to_string() })
    }
}

impl CheckpointStore for FileCheckpointStore {
    fn load(&self, workflow: &str) -> Result<Option<Checkpoint>, CheckpointError> {
        // Always from disk: another process may have written it. The lock
        // keeps a concurrent commit from being overwritten by this read.
        let mut cache = self.cache.lock();
        let doc = self.read(workflow).inspect_err(|_| {
            cache.remove(workflow);
        })?;
        match &doc {
            Some(d) => {
                cache.insert(workflow.to_string(), d.clone());
            }
            None => {
                cache.remove(workflow);
            }
        }
        Ok(doc)
    }

    fn commit(&self, delta: CheckpointDelta) -> Result<(), CheckpointError> {
        let mut cache = self.cache.lock();
        let workflow = delta.workflow.clone();
        if !cache.contains_key(&workflow) {
            let doc = match self.read(&workflow) {
                Ok(Some(doc)) => doc,
                Ok(None) | Err(CheckpointError::Corrupt { .. }) => Checkpoint::empty(&workflow, delta.dedup_capacity),
                Err(e) => return Err(e),
            };
            cache.insert(workflow.clone(), doc);
        }
        let doc = cache.get_mut(&workflow).expect("inserted above");
        doc.apply(delta);
        let bytes = serde_json::to_vec(doc).expect("checkpoint serializes");
        std::fs::create_dir_all(self.root.join(&workflow))?;
        crate::bus::write_atomic(&self.path(&workflow), &bytes)?;
        Ok(())
    }

    fn delete(&self, workflow: &str) -> Result<(), CheckpointError> {
        self.cache.lock().remove(workflow);
        match std::fs::remove_file(self.path(workflow)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::empty("", DEFAULT_DEDUP_CAPACITY)
    }
}

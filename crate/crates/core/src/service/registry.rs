//! Workflow definitions: trigger sets, interceptors and lifecycle status.
//! With a root directory every change is written to
//! `<root>/<workflow>/workflow.json` before it is acknowledged.

use std::collections::BTreeMap;
use std::path::PathBuf;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ServiceError;
use crate::kernel::{Selector, Trigger, WorkflowStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interception {
    pub selector: Selector,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub workflow_id: String,
    #[serde(default)]
    pub event_sources: Vec<String>,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
    #[serde(default)]
    pub interceptors: Vec<Interception>,
    #[serde(default)]
    pub global_context: Map<String, Value>,
    pub status: WorkflowStatus,
    /// Bumped on every change so workers can refresh their trigger cache.
    #[serde(default)]
    pub version: u64,
}

impl WorkflowSpec {
    pub fn new(workflow_id: &str, event_sources: Vec<String>) -> Self {
        WorkflowSpec {
            workflow_id: workflow_id.to_string(),
            event_sources,
            triggers: Vec::new(),
            interceptors: Vec::new(),
            global_context: Map::new(),
            status: WorkflowStatus::Created,
            version: 0,
        }
    }

    pub fn has_trigger(&self, id: &str) -> bool {
        self.triggers.iter().any(|t| t.id == id) || self.interceptors.iter().any(|i| i.trigger.id == id)
    }
}

pub struct Registry {
    root: Option<PathBuf>,
    specs: RwLock<BTreeMap<String, WorkflowSpec>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry { root: None, specs: RwLock::new(BTreeMap::new()) }
    }

    pub fn open(root: PathBuf) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&root)?;
        let mut specs = BTreeMap::new();
        for entry in std::fs::read_dir(&root)? {
            let path = entry?.path().join("workflow.json");
            if !path.is_file() {
                continue;
            }
            let spec: WorkflowSpec = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
            specs.insert(spec.workflow_id.clone(), spec);
        }
        Ok(Registry { root: Some(root), specs: RwLock::new(specs) })
    }

    fn persist(&self, spec: &WorkflowSpec) -> Result<(), ServiceError> {
        let Some(root) = &self.root else { return Ok(()) };
        let dir = root.join(&spec.workflow_id);
        std::fs::create_dir_all(&dir)?;
        let bytes = serde_json::to_vec_pretty(spec).expect("spec serializes");
        crate::bus::write_atomic(&dir.join("workflow.json"), &bytes)?;
        Ok(())
    }

    pub fn create(&self, spec: WorkflowSpec) -> Result<WorkflowSpec, ServiceError> {
        let mut specs = self.specs.write();
        if specs.contains_key(&spec.workflow_id) {
            return Err(ServiceError::DuplicateWorkflow(spec.workflow_id));
        }
        self.persist(&spec)?;
        specs.insert(spec.workflow_id.clone(), spec.clone());
        Ok(spec)
    }

    pub fn get(&self, workflow: &str) -> Result<WorkflowSpec, ServiceError> {
        self.specs.read().get(workflow).cloned().ok_or_else(|| ServiceError::NotFound(workflow.to_string()))
    }

    pub fn version(&self, workflow: &str) -> Option<u64> {
        self.specs.read().get(workflow).map(|s| s.version)
    }

    pub fn status(&self, workflow: &str) -> Option<WorkflowStatus> {
        self.specs.read().get(workflow).map(|s| s.status)
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.read().keys().cloned().collect()
    }

    /// Applies `f` and persists the result; nothing changes if either fails.
    pub fn update<T>(&self, workflow: &str, f: impl FnOnce(&mut WorkflowSpec) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let mut specs = self.specs.write();
        let current = specs.get(workflow).ok_or_else(|| ServiceError::NotFound(workflow.to_string()))?;
        let mut next = current.clone();
        let out = f(&mut next)?;
        if next != *current {
            next.version += 1;
            self.persist(&next)?;
            specs.insert(workflow.to_string(), next);
        }
        Ok(out)
    }

    pub fn set_status(&self, workflow: &str, status: WorkflowStatus) -> Result<(), ServiceError> {
        self.update(workflow, |s| {
            s.status = status;
            Ok(())
        })
    }

    pub fn remove(&self, workflow: &str) -> Result<WorkflowSpec, ServiceError> {
        let mut specs = self.specs.write();
        let spec = specs.remove(workflow).ok_or_else(|| ServiceError::NotFound(workflow.to_string()))?;
        if let Some(root) = &self.root {
            match std::fs::remove_dir_all(root.join(workflow)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(spec)
    }
}

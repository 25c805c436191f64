//! Registration hook for condition, action and program kinds beyond the
//! built-ins. Triggers name extensions by kind string, so trigger documents
//! stay plain JSON.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::{Map, Value};

use super::action::ActionCtx;
use super::condition::Verdict;
use super::trigger::TriggerContext;
use crate::code::ProgramFn;
use crate::event::CloudEvent;

pub type ConditionFn = dyn Fn(&mut TriggerContext, &CloudEvent, &Map<String, Value>) -> Result<Verdict, String> + Send + Sync;
pub type ActionFn = dyn Fn(&mut ActionCtx<'_>) -> Result<(), String> + Send + Sync;

#[derive(Clone, Default)]
pub struct Extensions {
    conditions: HashMap<String, Arc<ConditionFn>>,
    actions: HashMap<String, Arc<ActionFn>>,
    programs: HashMap<String, Arc<ProgramFn>>,
}

impl Extensions {
    /// Built-in front-end actions plus the example programs.
    pub fn standard() -> Self {
        let mut ext = Extensions::default();
        crate::dag::register(&mut ext);
        crate::asl::register(&mut ext);
        crate::code::register_examples(&mut ext);
        crate::federated::register(&mut ext);
        ext
    }

    pub fn register_condition(
        &mut self,
        kind: &str,
        f: impl Fn(&mut TriggerContext, &CloudEvent, &Map<String, Value>) -> Result<Verdict, String> + Send + Sync + 'static,
    ) {
        self.conditions.insert(kind.to_string(), Arc::new(f));
    }

    pub fn register_action(&mut self, kind: &str, f: impl Fn(&mut ActionCtx<'_>) -> Result<(), String> + Send + Sync + 'static) {
        self.actions.insert(kind.to_string(), Arc::new(f));
    }

    pub fn register_program(
        &mut self,
        name: &str,
        f: impl Fn(&mut crate::code::Orchestration, Value) -> Result<Value, crate::code::StepError> + Send + Sync + 'static,
    ) {
        self.programs.insert(name.to_string(), Arc::new(f));
    }

    pub fn condition(&self, kind: &str) -> Option<Arc<ConditionFn>> {
        self.conditions.get(kind).cloned()
    }

    pub fn action(&self, kind: &str) -> Option<Arc<ActionFn>> {
        self.actions.get(kind).cloned()
    }

    pub fn program(&self, name: &str) -> Option<Arc<ProgramFn>> {
        self.programs.get(name).cloned()
    }

    pub fn program_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.programs.keys().cloned().collect();
        names.sort();
        names
    }
}

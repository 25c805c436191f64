//! Deploys DAGs, state machines and programs as workflows and starts runs.
//!
//! Each deployment records its entry subject in the workflow's global
//! context, so a run can be started later from the workflow id alone.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tf_core::dag::DagSpec;
use tf_core::service::{Service, ServiceError};
use tf_core::{asl, code, CloudEvent};

pub const FRONTEND_KEY: &str = "frontend";
pub const START_SUBJECT_KEY: &str = "start_subject";

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Invalid(String),
    #[error("workflow {0:?} was not deployed by a front-end")]
    NotStartable(String),
}

fn install(svc: &Arc<Service>, id: &str, frontend: &str, start_subject: &str, triggers: Vec<tf_core::Trigger>) -> Result<(), DeployError> {
    svc.create_workflow(id, vec!["tf://client".into()])?;
    let installed = svc
        .set_global_context(id, FRONTEND_KEY, json!(frontend))
        .and_then(|_| svc.set_global_context(id, START_SUBJECT_KEY, json!(start_subject)))
        .and_then(|_| svc.add_triggers(id, triggers));
    if let Err(e) = installed {
        let _ = svc.delete_workflow(id);
        return Err(e.into());
    }
    Ok(())
}

pub fn deploy_dag(svc: &Arc<Service>, spec: &DagSpec) -> Result<String, DeployError> {
    let compiled = spec.compile().map_err(|e| DeployError::Invalid(e.to_string()))?;
    install(svc, &spec.dag_id, "dag", &compiled.start_subject, compiled.all_triggers())?;
    Ok(spec.dag_id.clone())
}

/// `doc` is an Amazon States Language document.
pub fn deploy_state_machine(svc: &Arc<Service>, id: &str, doc: &Value) -> Result<String, DeployError> {
    let machine = asl::StateMachine::parse(doc).map_err(|e| DeployError::Invalid(e.to_string()))?;
    install(svc, id, "asl", &asl::entry_subject(id, &machine.start_at), asl::compile(&machine, id))?;
    Ok(id.to_string())
}

pub fn deploy_program(svc: &Arc<Service>, id: &str, program: &str) -> Result<String, DeployError> {
    if svc.extensions().program(program).is_none() {
        return Err(DeployError::Invalid(format!("unknown program {program:?}; known: {}", svc.extensions().program_names().join(", "))));
    }
    install(svc, id, "code", code::START_SUBJECT, vec![code::orchestrator(program)])?;
    Ok(id.to_string())
}

/// Publishes the start event of a deployed workflow.
pub fn start(svc: &Service, id: &str, input: Value) -> Result<u64, DeployError> {
    let spec = svc.registry().get(id)?;
    let subject = spec.global_context.get(START_SUBJECT_KEY).and_then(Value::as_str).ok_or_else(|| DeployError::NotStartable(id.into()))?;
    Ok(svc.publish(id, &CloudEvent::success(format!("{id}/start"), "tf://client", subject, input))?)
}

/// Completes a halted DAG task by hand.
pub fn resume_dag(svc: &Service, id: &str, task_id: &str, output: Value, index: Option<u64>) -> Result<u64, DeployError> {
    Ok(svc.publish(id, &DagSpec::new(id, vec![]).resume_event(task_id, output, index))?)
}

/// Waits for the workflow to end and returns `{status, result}`. A
/// timeout returns the current status instead of failing.
pub fn outcome(svc: &Service, id: &str, timeout: Duration) -> Result<Value, DeployError> {
    let status = svc.wait_terminal(id, timeout)?;
    let state = svc.get_state(id, None)?;
    Ok(json!({"workflow": id, "status": status, "result": state["result"]}))
}

//! Python bindings. Documents, inputs and results cross the boundary as JSON
//! text; `json.loads` on the Python side recovers the structures.

use std::sync::Arc;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};
use tf_core::asl::{self, StateMachine};
use tf_core::bench::{self, LoadKind, Shape};
use tf_core::code;
use tf_core::dag::DagSpec;
use tf_core::federated::{self, FederatedSpec};
use tf_core::kernel::Extensions;
use tf_core::service::{LocalEngine, Service, ServiceConfig, ServiceError};
use tf_core::{CloudEvent, Kernel, Trigger};

fn parse(what: &str, text: &str) -> PyResult<Value> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn service_err(e: ServiceError) -> PyErr {
    match e {
        ServiceError::NotFound(_)
        | ServiceError::DuplicateWorkflow(_)
        | ServiceError::InvalidTrigger(_)
        | ServiceError::InvalidEvent(_)
        | ServiceError::Terminated(_) => PyValueError::new_err(e.to_string()),
        other => runtime_err(other),
    }
}

fn outcome(k: &Kernel) -> String {
    json!({"workflow": k.workflow(), "status": k.status(), "result": k.result()}).to_string()
}

fn run_local(py: Python<'_>, wf: String, triggers: Vec<Trigger>, start: CloudEvent, seed: u64, timeout_s: f64) -> PyResult<String> {
    py.detach(move || {
        let engine = LocalEngine::new(seed);
        let k = engine.run(&wf, triggers, &start, Duration::from_secs_f64(timeout_s)).map_err(runtime_err)?;
        Ok(outcome(&k))
    })
}

/// Runs a DAG document to completion on an in-process engine.
#[pyfunction]
#[pyo3(signature = (dag, input = "null", seed = 0, timeout_s = 60.0))]
fn run_dag(py: Python<'_>, dag: &str, input: &str, seed: u64, timeout_s: f64) -> PyResult<String> {
    let spec = DagSpec::from_json(dag).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let compiled = spec.compile().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let start = spec.start_event(parse("input", input)?);
    run_local(py, spec.dag_id.clone(), compiled.all_triggers(), start, seed, timeout_s)
}

#[pyfunction]
#[pyo3(signature = (machine, input = "null", seed = 0, timeout_s = 60.0))]
fn run_state_machine(py: Python<'_>, machine: &str, input: &str, seed: u64, timeout_s: f64) -> PyResult<String> {
    let m = StateMachine::from_json(machine).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let start = asl::start_event(&m, "sm", parse("input", input)?);
    run_local(py, "sm".into(), asl::compile(&m, "sm"), start, seed, timeout_s)
}

/// Runs a registered workflow-as-code program.
#[pyfunction]
#[pyo3(signature = (program, input = "null", seed = 0, timeout_s = 60.0))]
fn run_code(py: Python<'_>, program: &str, input: &str, seed: u64, timeout_s: f64) -> PyResult<String> {
    if Extensions::standard().program(program).is_none() {
        return Err(PyValueError::new_err(format!("unknown program {program:?}")));
    }
    let start = code::start_event(program, parse("input", input)?);
    run_local(py, program.to_string(), vec![code::orchestrator(program)], start, seed, timeout_s)
}

#[pyfunction]
fn programs() -> Vec<String> {
    Extensions::standard().program_names()
}

/// `kind` is "noop" or "join". Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (events, kind = "noop"))]
fn bench_load(py: Python<'_>, events: u64, kind: &str) -> PyResult<String> {
    let kind = match kind {
        "noop" => LoadKind::Noop,
        "join" => LoadKind::Join,
        other => return Err(PyValueError::new_err(format!("unknown load kind {other:?}"))),
    };
    py.detach(move || bench::bench_load(events, kind).map(|r| r.to_json().to_string()).map_err(runtime_err))
}

/// `shape` is "sequence" or "parallel".
#[pyfunction]
#[pyo3(signature = (shape, n, task_ms = 0))]
fn bench_overhead(py: Python<'_>, shape: &str, n: usize, task_ms: u64) -> PyResult<String> {
    let shape = match shape {
        "sequence" => Shape::Sequence(n),
        "parallel" => Shape::Parallel(n),
        other => return Err(PyValueError::new_err(format!("unknown shape {other:?}"))),
    };
    py.detach(move || bench::bench_overhead(shape, Duration::from_millis(task_ms)).map(|r| r.to_json().to_string()).map_err(runtime_err))
}

/// `spec` holds any subset of the round parameters.
#[pyfunction]
#[pyo3(signature = (spec = "{}", seed = 0))]
fn run_federated(py: Python<'_>, spec: &str, seed: u64) -> PyResult<String> {
    let spec: FederatedSpec = serde_json::from_value(parse("spec", spec)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.detach(move || {
        let report = federated::run_federated(&spec, seed).map_err(runtime_err)?;
        serde_json::to_string(&report).map_err(runtime_err)
    })
}

/// A running in-memory service.
#[pyclass(name = "Service")]
struct PyService {
    inner: Arc<Service>,
}

#[pymethods]
impl PyService {
    #[new]
    #[pyo3(signature = (config = "{}"))]
    fn new(config: &str) -> PyResult<Self> {
        let config = ServiceConfig::from_json(config).map_err(PyValueError::new_err)?;
        let inner = Service::open(config).map_err(service_err)?;
        inner.start();
        Ok(PyService { inner })
    }

    #[pyo3(signature = (workflow_id, event_sources = Vec::new()))]
    fn create_workflow(&self, workflow_id: &str, event_sources: Vec<String>) -> PyResult<()> {
        self.inner.create_workflow(workflow_id, event_sources).map(|_| ()).map_err(service_err)
    }

    /// `trigger` is a trigger document as JSON.
    fn add_trigger(&self, workflow_id: &str, trigger: &str) -> PyResult<String> {
        let t: Trigger = serde_json::from_value(parse("trigger", trigger)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.add_trigger(workflow_id, t).map_err(service_err)
    }

    /// `event` is a CloudEvent as JSON. Returns its log offset.
    fn publish(&self, workflow_id: &str, event: &str) -> PyResult<u64> {
        let ev = CloudEvent::from_value(parse("event", event)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.publish(workflow_id, &ev).map_err(service_err)
    }

    #[pyo3(signature = (workflow_id, trigger = None))]
    fn get_state(&self, workflow_id: &str, trigger: Option<&str>) -> PyResult<String> {
        self.inner.get_state(workflow_id, trigger).map(|v| v.to_string()).map_err(service_err)
    }

    /// Blocks until the workflow ends or `timeout_s` passes; returns the status.
    #[pyo3(signature = (workflow_id, timeout_s = 60.0))]
    fn wait_terminal(&self, py: Python<'_>, workflow_id: &str, timeout_s: f64) -> PyResult<String> {
        let svc = self.inner.clone();
        let wf = workflow_id.to_string();
        let status = py.detach(move || svc.wait_terminal(&wf, Duration::from_secs_f64(timeout_s))).map_err(service_err)?;
        Ok(json!(status).as_str().unwrap_or_default().to_string())
    }

    fn delete_workflow(&self, workflow_id: &str) -> PyResult<()> {
        self.inner.delete_workflow(workflow_id).map_err(service_err)
    }

    fn shutdown(&self) {
        self.inner.shutdown();
    }
}

#[pymodule]
fn tfpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_dag, m)?)?;
    m.add_function(wrap_pyfunction!(run_state_machine, m)?)?;
    m.add_function(wrap_pyfunction!(run_code, m)?)?;
    m.add_function(wrap_pyfunction!(programs, m)?)?;
    m.add_function(wrap_pyfunction!(bench_load, m)?)?;
    m.add_function(wrap_pyfunction!(bench_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(run_federated, m)?)?;
    m.add_class::<PyService>()?;
    Ok(())
}

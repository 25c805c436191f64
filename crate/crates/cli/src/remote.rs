//! Invoking tasks on a separate executor process over HTTP.
//!
//! The service side posts [`Invocation`]s to `{executor}/invoke`; the
//! executor runs them and posts termination events to
//! `{callback}/workflows/{workflow}/events`.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tf_core::executor::{ExecutorError, Invocation, Invoker, LocalExecutor, Publisher};
use tf_core::CloudEvent;
use tokio::runtime::Handle;

const ATTEMPTS: u32 = 5;

/// POSTs `body` to `url`, retrying with doubling backoff on transport
/// errors and 5xx replies.
async fn post_with_retry(client: &reqwest::Client, url: &str, body: &Value) -> Result<(), String> {
    let mut delay = Duration::from_millis(50);
    let mut last = String::new();
    for attempt in 1..=ATTEMPTS {
        match client.post(url).json(body).send().await {
            Ok(resp) if resp.status().is_success() => return Ok(()),
            Ok(resp) if resp.status().is_client_error() => return Err(format!("{url}: {}", resp.status())),
            Ok(resp) => last = format!("{url}: {}", resp.status()),
            Err(e) => last = format!("{url}: {e}"),
        }
        if attempt < ATTEMPTS {
            tokio::time::sleep(delay).await;
            delay *= 2;
        }
    }
    Err(last)
}

/// Sends invocations to a remote executor. An invocation that cannot be
/// delivered is reported back to the workflow as a failed termination.
pub struct RemoteInvoker {
    client: reqwest::Client,
    url: String,
    runtime: Handle,
    publisher: Arc<dyn Publisher>,
}

impl RemoteInvoker {
    pub fn new(executor_url: &str, runtime: Handle, publisher: Arc<dyn Publisher>) -> Self {
        RemoteInvoker {
            client: reqwest::Client::new(),
            url: format!("{}/invoke", executor_url.trim_end_matches('/')),
            runtime,
            publisher,
        }
    }
}

impl Invoker for RemoteInvoker {
    fn invoke(&self, invocation: Invocation) -> Result<(), ExecutorError> {
        let body = serde_json::to_value(&invocation).map_err(|e| ExecutorError::Remote(e.to_string()))?;
        let (client, url, publisher) = (self.client.clone(), self.url.clone(), self.publisher.clone());
        self.runtime.spawn(async move {
            if let Err(reason) = post_with_retry(&client, &url, &body).await {
                tracing::warn!(invocation = %invocation.invocation_id, %reason, "invocation undeliverable");
                let failed = invocation.termination(false, json!({"error": format!("undeliverable: {reason}")}));
                if let Err(e) = publisher.publish(invocation.workflow.as_deref(), failed) {
                    tracing::error!(invocation = %invocation.invocation_id, error = %e, "could not report undeliverable invocation");
                }
            }
        });
        Ok(())
    }
}

/// Publishes termination events to a service's REST API.
pub struct HttpPublisher {
    client: reqwest::Client,
    base: String,
    runtime: Handle,
}

impl HttpPublisher {
    pub fn new(service_url: &str, runtime: Handle) -> Self {
        HttpPublisher { client: reqwest::Client::new(), base: service_url.trim_end_matches('/').to_string(), runtime }
    }
}

impl Publisher for HttpPublisher {
    fn publish(&self, workflow: Option<&str>, event: CloudEvent) -> Result<(), String> {
        let workflow = workflow.map(str::to_string).or_else(|| event.workflow().map(str::to_string)).ok_or("event carries no workflow")?;
        let url = format!("{}/workflows/{workflow}/events", self.base);
        let body = serde_json::to_value(&event).map_err(|e| e.to_string())?;
        let client = self.client.clone();
        self.runtime.spawn(async move {
            if let Err(reason) = post_with_retry(&client, &url, &body).await {
                tracing::error!(%reason, "termination event lost");
            }
        });
        Ok(())
    }
}

/// Routes of an executor process: `POST /invoke`, `GET /tasks`, `GET /stats`.
pub fn executor_router(executor: Arc<LocalExecutor>) -> Router {
    Router::new()
        .route("/invoke", post(invoke))
        .route("/tasks", get(|State(ex): State<Arc<LocalExecutor>>| async move { Json(json!(ex.task_names())) }))
        .route("/stats", get(|State(ex): State<Arc<LocalExecutor>>| async move { Json(json!(ex.stats())) }))
        .with_state(executor)
}

async fn invoke(State(executor): State<Arc<LocalExecutor>>, Json(invocation): Json<Invocation>) -> (StatusCode, Json<Value>) {
    // Zero-latency tasks run inline, so keep them off the async workers.
    let result = tokio::task::spawn_blocking(move || executor.invoke(invocation)).await;
    match result {
        Ok(Ok(())) => (StatusCode::ACCEPTED, Json(json!({"accepted": true}))),
        Ok(Err(e @ ExecutorError::UnknownTask(_))) => (StatusCode::NOT_FOUND, Json(json!({"error": e.to_string()}))),
        Ok(Err(e)) => (StatusCode::BAD_REQUEST, Json(json!({"error": e.to_string()}))),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))),
    }
}

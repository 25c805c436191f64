//! REST API over a [`Service`].

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tf_core::dag::DagSpec;
use tf_core::kernel::Selector;
use tf_core::service::{Service, ServiceError};
use tf_core::{CloudEvent, Trigger};

use crate::deploy::{self, DeployError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::DuplicateWorkflow(_) | ServiceError::Terminated(_) => StatusCode::CONFLICT,
            ServiceError::InvalidTrigger(_) | ServiceError::InvalidEvent(_) | ServiceError::Storage(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, message: e.to_string() }
    }
}

impl From<DeployError> for ApiError {
    fn from(e: DeployError) -> Self {
        match e {
            DeployError::Service(e) => e.into(),
            DeployError::Invalid(m) => ApiError::bad_request(m),
            e @ DeployError::NotStartable(_) => ApiError { status: StatusCode::CONFLICT, message: e.to_string() },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Service calls touch disk and take locks, so they leave the async workers.
async fn blocking<T, E>(f: impl FnOnce() -> Result<T, E> + Send + 'static) -> ApiResult<T>
where
    T: Send + 'static,
    E: Into<ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(Into::into),
        Err(e) => Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() }),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, v: Value) -> ApiResult<T> {
    serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("invalid {what}: {e}")))
}

#[derive(Deserialize)]
struct CreateWorkflow {
    workflow_id: String,
    #[serde(default)]
    event_sources: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TriggerBody {
    Many(Vec<Value>),
    One(Value),
}

#[derive(Deserialize)]
struct InterceptBody {
    selector: Selector,
    trigger: Value,
}

#[derive(Deserialize)]
struct StateQuery {
    trigger: Option<String>,
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: u64,
    #[serde(default = "default_max")]
    max: usize,
}

fn default_max() -> usize {
    1000
}

#[derive(Deserialize)]
struct Resume {
    task: String,
    #[serde(default)]
    output: Value,
    index: Option<u64>,
}

#[derive(Deserialize)]
struct CodeDeploy {
    program: String,
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/workflows", post(create_workflow).get(list_workflows))
        .route("/workflows/{id}", axum::routing::delete(delete_workflow))
        .route("/workflows/{id}/triggers", post(add_triggers))
        .route("/workflows/{id}/interceptors", post(add_interceptor))
        .route("/workflows/{id}/events", post(publish).get(read_events))
        .route("/workflows/{id}/state", get(get_state))
        .route("/workflows/{id}/context/{key}", put(set_context))
        .route("/workflows/{id}/start", post(start))
        .route("/dags", post(deploy_dag))
        .route("/dags/{id}/resume", post(resume_dag))
        .route("/state-machines/{id}", post(deploy_state_machine))
        .route("/code/{id}", post(deploy_program))
        .route("/programs", get(programs))
        .route("/stats", get(stats))
        .with_state(svc)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(svc: Arc<Service>, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

async fn create_workflow(State(svc): State<Arc<Service>>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateWorkflow = parse("workflow", body)?;
    let spec = blocking(move || svc.create_workflow(&req.workflow_id, req.event_sources)).await?;
    Ok((StatusCode::CREATED, Json(json!(spec))))
}

async fn list_workflows(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(json!(svc.registry().ids()))
}

async fn delete_workflow(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || svc.delete_workflow(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_triggers(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(body): Json<TriggerBody>) -> ApiResult<(StatusCode, Json<Value>)> {
    let raw = match body {
        TriggerBody::Many(v) => v,
        TriggerBody::One(v) => vec![v],
    };
    let triggers = raw.into_iter().map(|v| parse::<Trigger>("trigger", v)).collect::<ApiResult<Vec<_>>>()?;
    let ids = blocking(move || svc.add_triggers(&id, triggers)).await?;
    Ok((StatusCode::CREATED, Json(json!({"added": ids}))))
}

async fn add_interceptor(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult<StatusCode> {
    let req: InterceptBody = parse("interceptor", body)?;
    let trigger: Trigger = parse("trigger", req.trigger)?;
    blocking(move || svc.intercept(&id, req.selector, trigger)).await?;
    Ok(StatusCode::CREATED)
}

async fn publish(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let event = CloudEvent::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let offset = blocking(move || svc.publish(&id, &event)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"offset": offset}))))
}

async fn read_events(State(svc): State<Arc<Service>>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult<Json<Value>> {
    let events = blocking(move || svc.read_events(&id, q.from, q.max)).await?;
    Ok(Json(Value::Array(events)))
}

async fn get_state(State(svc): State<Arc<Service>>, Path(id): Path<String>, Query(q): Query<StateQuery>) -> ApiResult<Json<Value>> {
    Ok(Json(blocking(move || svc.get_state(&id, q.trigger.as_deref())).await?))
}

async fn set_context(State(svc): State<Arc<Service>>, Path((id, key)): Path<(String, String)>, Json(value): Json<Value>) -> ApiResult<StatusCode> {
    blocking(move || svc.set_global_context(&id, &key, value)).await?;
    Ok(StatusCode::NO_CONTENT)
}

/// Body is the run input.
async fn start(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Option<Json<Value>>) -> ApiResult<(StatusCode, Json<Value>)> {
    let input = body.map(|Json(v)| v).unwrap_or(Value::Null);
    let offset = blocking(move || deploy::start(&svc, &id, input)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"offset": offset}))))
}

async fn deploy_dag(State(svc): State<Arc<Service>>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let spec: DagSpec = parse("dag", body)?;
    let id = blocking(move || deploy::deploy_dag(&svc, &spec)).await?;
    Ok((StatusCode::CREATED, Json(json!({"workflow_id": id}))))
}

async fn resume_dag(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: Resume = parse("resume", body)?;
    let offset = blocking(move || deploy::resume_dag(&svc, &id, &req.task, req.output, req.index)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"offset": offset}))))
}

async fn deploy_state_machine(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(doc): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let id = blocking(move || deploy::deploy_state_machine(&svc, &id, &doc)).await?;
    Ok((StatusCode::CREATED, Json(json!({"workflow_id": id}))))
}

async fn deploy_program(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CodeDeploy = parse("program deployment", body)?;
    let id = blocking(move || deploy::deploy_program(&svc, &id, &req.program)).await?;
    Ok((StatusCode::CREATED, Json(json!({"workflow_id": id}))))
}

async fn programs(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(json!(svc.extensions().program_names()))
}

async fn stats(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(json!({"service": svc.stats(), "timeline": svc.timeline()}))
}

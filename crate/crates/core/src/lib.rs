//! Trigger-based workflow orchestration.
//!
//! Workflows from any front-end (DAGs, States Language machines, or
//! orchestration programs) compile to sets of event-condition-action
//! triggers. A per-workflow [`kernel::Kernel`] consumes CloudEvents from an
//! [`bus::EventBus`], fires triggers whose conditions hold, and checkpoints
//! trigger state so a worker can crash or scale to zero and resume.

pub mod asl;
pub mod bench;
pub mod bus;
pub mod code;
pub mod dag;
pub mod event;
pub mod executor;
pub mod federated;
pub mod kernel;
pub mod predicate;
pub mod sched;
pub mod service;
pub mod timer;

pub use event::CloudEvent;
pub use kernel::{Kernel, Trigger, WorkflowStatus};

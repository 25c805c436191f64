//! Timer event source: publishes a CloudEvent into a workflow topic once a
//! delay elapses. Backs ASL `Wait` states and join timeouts.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::event::CloudEvent;
use crate::executor::Publisher;
use crate::sched::DelayQueue;

pub struct TimerService {
    queue: DelayQueue,
    publisher: Arc<dyn Publisher>,
}

impl TimerService {
    pub fn new(publisher: Arc<dyn Publisher>) -> Self {
        TimerService { queue: DelayQueue::new("tf-timer"), publisher }
    }

    pub fn schedule(&self, workflow: &str, delay: Duration, event: CloudEvent) {
        let publisher = self.publisher.clone();
        let workflow = workflow.to_string();
        self.queue.schedule(Instant::now() + delay, move || {
            if let Err(e) = publisher.publish(Some(&workflow), event) {
                tracing::warn!(%workflow, error = %e, "timer event dropped");
            }
        });
    }

    pub fn pending(&self) -> usize {
        self.queue.pending()
    }
}

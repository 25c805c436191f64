use std::sync::Arc;
use std::time::Duration;

use crate::bus::{EventBus, MemoryBus};
use crate::event::CloudEvent;
use crate::executor::{BusPublisher, LocalExecutor, Publisher};
use crate::kernel::action::Runtime;
use crate::kernel::checkpoint::MemoryCheckpointStore;
use crate::kernel::{Extensions, Kernel, KernelConfig, KernelDeps, KernelError, Trigger};
use crate::timer::TimerService;

/// In-memory bus, store and executor driven from the calling thread.
/// Used for one-shot runs and tests.
pub struct LocalEngine {
    pub bus: Arc<MemoryBus>,
    pub store: Arc<MemoryCheckpointStore>,
    pub executor: Arc<LocalExecutor>,
    pub timers: Arc<TimerService>,
    pub ext: Arc<Extensions>,
    pub config: KernelConfig,
}

impl LocalEngine {
    pub fn new(seed: u64) -> Self {
        Self::with_extensions(seed, Extensions::standard())
    }

    pub fn with_extensions(seed: u64, ext: Extensions) -> Self {
        let bus = Arc::new(MemoryBus::new());
        let publisher: Arc<dyn Publisher> = Arc::new(BusPublisher(bus.clone()));
        LocalEngine {
            bus,
            store: Arc::new(MemoryCheckpointStore::new()),
            executor: LocalExecutor::new(publisher.clone(), seed).with_standard_tasks(),
            timers: Arc::new(TimerService::new(publisher)),
            ext: Arc::new(ext),
            config: KernelConfig::default(),
        }
    }

    pub fn deps(&self) -> KernelDeps {
        KernelDeps {
            bus: self.bus.clone(),
            store: self.store.clone(),
            effects: Arc::new(Runtime { invoker: self.executor.clone(), timers: self.timers.clone() }),
            ext: self.ext.clone(),
        }
    }

    pub fn open(&self, workflow: &str, triggers: Vec<Trigger>) -> Result<Kernel, KernelError> {
        Kernel::open(workflow, triggers, self.deps(), self.config.clone())
    }

    pub fn publish(&self, workflow: &str, event: &CloudEvent) -> Result<u64, KernelError> {
        if !self.bus.has_topic(workflow) {
            self.bus.create_topic(workflow)?;
        }
        Ok(self.bus.publish(workflow, event)?)
    }

    /// Opens the workflow, publishes `start` and runs until it terminates
    /// or `timeout` passes.
    pub fn run(&self, workflow: &str, triggers: Vec<Trigger>, start: &CloudEvent, timeout: Duration) -> Result<Kernel, KernelError> {
        let mut kernel = self.open(workflow, triggers)?;
        self.publish(workflow, start)?;
        kernel.run_until(timeout, |k| k.status().is_terminal())?;
        Ok(kernel)
    }
}

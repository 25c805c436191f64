//! At-least-once event transport with commit offsets.
//!
//! Each workflow owns one topic with a single consumer cursor. Records are
//! delivered from the first uncommitted offset; a consumer restart rewinds
//! the delivery cursor to the committed offset so anything not committed is
//! seen again.

mod dlq;
mod file;
mod memory;

use std::sync::Arc;
use std::time::Duration;

pub use dlq::{DeadLetterQueue, ParkReason, ParkedEvent, MAX_REPLAY_GENERATIONS};
pub use file::FileBus;
pub(crate) use file::write_atomic;
pub use memory::MemoryBus;

use crate::event::{decode_event, encode_event, CloudEvent, EventError};

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("topic {0:?} not found")]
    TopicNotFound(String),
    #[error("topic {0:?} already exists")]
    TopicExists(String),
    #[error("invalid commit offset {offset} on topic {topic:?} (delivered up to {delivered})")]
    InvalidOffset { topic: String, offset: u64, delivered: u64 },
    #[error("bus io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log {path}: {reason}")]
    Corrupt { path: String, reason: String },
}

/// One log entry as delivered to the consumer.
#[derive(Debug, Clone)]
pub struct Record {
    pub offset: u64,
    pub bytes: Arc<[u8]>,
}

impl Record {
    pub fn decode(&self) -> Result<CloudEvent, EventError> {
        decode_event(&self.bytes)
    }
}

pub trait EventBus: Send + Sync {
    fn create_topic(&self, topic: &str) -> Result<(), BusError>;

    fn delete_topic(&self, topic: &str) -> Result<(), BusError>;

    fn has_topic(&self, topic: &str) -> bool;

    /// Appends raw bytes; the file implementation flushes before returning.
    fn publish_raw(&self, topic: &str, bytes: &[u8]) -> Result<u64, BusError>;

    fn publish(&self, topic: &str, event: &CloudEvent) -> Result<u64, BusError> {
        self.publish_raw(topic, &encode_event(event))
    }

    /// Up to `max_batch` records from the delivery cursor, blocking up to
    /// `wait` when none are available.
    fn poll(&self, topic: &str, max_batch: usize, wait: Duration) -> Result<Vec<Record>, BusError>;

    /// Marks every record up to and including `through` as processed.
    fn commit(&self, topic: &str, through: u64) -> Result<(), BusError>;

    /// First offset that has not been committed.
    fn committed(&self, topic: &str) -> Result<u64, BusError>;

    /// Offset the next published record will receive.
    fn head(&self, topic: &str) -> Result<u64, BusError>;

    /// Simulated consumer restart: undelivered-but-uncommitted records are
    /// handed out again.
    fn reset_consumer(&self, topic: &str) -> Result<(), BusError>;

    /// Moves the delivery cursor to `offset` (at or after the committed one,
    /// or to 0 for a full replay).
    fn seek(&self, topic: &str, offset: u64) -> Result<(), BusError>;

    /// Random access read used for event-log inspection and replay.
    fn read(&self, topic: &str, from: u64, max: usize) -> Result<Vec<Record>, BusError>;

    /// Persists a mirror of the workflow's dead letter queue.
    fn store_dlq(&self, _topic: &str, _dlq: &DeadLetterQueue) -> Result<(), BusError> {
        Ok(())
    }

    fn load_dlq(&self, _topic: &str) -> Result<Option<DeadLetterQueue>, BusError> {
        Ok(None)
    }

    /// Uncommitted backlog, used by the controller to decide provisioning.
    fn pending(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.head(topic)?.saturating_sub(self.committed(topic)?))
    }
}

#[cfg(test)]
mod contract_tests {
    //! Shared contract checks run against both implementations.
    use super::*;
    use crate::event::CloudEvent;
    use serde_json::json;
    use std::time::Instant;

    fn ev(id: &str) -> CloudEvent {
        CloudEvent::success(id, "tf://test", "s", json!(id))
    }

    pub(super) fn run_contract(bus: &dyn EventBus) {
        bus.create_topic("t").unwrap();
        assert!(matches!(bus.create_topic("t"), Err(BusError::TopicExists(_))));
        assert!(matches!(bus.publish("nope", &ev("x")), Err(BusError::TopicNotFound(_))));

        assert_eq!(bus.publish("t", &ev("a")).unwrap(), 0);
        assert_eq!(bus.publish("t", &ev("b")).unwrap(), 1);
        assert_eq!(bus.publish("t", &ev("c")).unwrap(), 2);

        let batch = bus.poll("t", 2, Duration::ZERO).unwrap();
        assert_eq!(batch.iter().map(|r| r.offset).collect::<Vec<_>>(), [0, 1]);
        let batch = bus.poll("t", 2, Duration::ZERO).unwrap();
        assert_eq!(batch.iter().map(|r| r.offset).collect::<Vec<_>>(), [2]);

        // No commit: a restart redelivers from 0.
        bus.reset_consumer("t").unwrap();
        let batch = bus.poll("t", 2, Duration::ZERO).unwrap();
        assert_eq!(batch.iter().map(|r| r.offset).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(batch[1].decode().unwrap().id, "b");

        let _ = bus.poll("t", 10, Duration::ZERO).unwrap();
        bus.commit("t", 1).unwrap();
        bus.reset_consumer("t").unwrap();
        let batch = bus.poll("t", 10, Duration::ZERO).unwrap();
        assert_eq!(batch.iter().map(|r| r.offset).collect::<Vec<_>>(), [2]);

        assert!(matches!(bus.commit("t", 9), Err(BusError::InvalidOffset { .. })));
        bus.commit("t", 2).unwrap();
        assert!(bus.poll("t", 10, Duration::ZERO).unwrap().is_empty());
        assert_eq!(bus.committed("t").unwrap(), 3);
        assert_eq!(bus.pending("t").unwrap(), 0);

        let started = Instant::now();
        assert!(bus.poll("t", 10, Duration::from_millis(50)).unwrap().is_empty());
        assert!(started.elapsed() >= Duration::from_millis(50));

        let log = bus.read("t", 1, 10).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].decode().unwrap().id, "b");

        bus.seek("t", 0).unwrap();
        assert_eq!(bus.poll("t", 10, Duration::ZERO).unwrap().len(), 3);

        bus.delete_topic("t").unwrap();
        assert!(!bus.has_topic("t"));
    }

    #[test]
    fn memory_bus_contract() {
        run_contract(&MemoryBus::new());
    }

    #[test]
    fn file_bus_contract() {
        let dir = tempfile::tempdir().unwrap();
        run_contract(&FileBus::open(dir.path()).unwrap());
    }

    #[test]
    fn poll_wakes_on_publish() {
        let bus = Arc::new(MemoryBus::new());
        bus.create_topic("t").unwrap();
        let producer = {
            let bus = bus.clone();
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(20));
                bus.publish("t", &ev("late")).unwrap();
            })
        };
        let started = Instant::now();
        let batch = bus.poll("t", 10, Duration::from_secs(5)).unwrap();
        producer.join().unwrap();
        assert_eq!(batch.len(), 1);
        assert!(started.elapsed() < Duration::from_secs(2));
    }
}

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BusError, DeadLetterQueue, EventBus, Record};

#[derive(Default)]
pub(super) struct TopicLog {
    pub records: Vec<Arc<[u8]>>,
    pub committed: u64,
    pub cursor: u64,
}

impl TopicLog {
    pub fn take_batch(&mut self, max_batch: usize) -> Vec<Record> {
        let start = self.cursor as usize;
        let end = (start + max_batch).min(self.records.len());
        let batch = (start..end)
            .map(|i| Record { offset: i as u64, bytes: self.records[i].clone() })
            .collect();
        self.cursor = end as u64;
        batch
    }

    pub fn check_commit(&self, topic: &str, through: u64) -> Result<(), BusError> {
        if through >= self.cursor {
            return Err(BusError::InvalidOffset { topic: topic.to_string(), offset: through, delivered: self.cursor });
        }
        Ok(())
    }
}

/// Volatile bus. Optionally shuffles each delivered batch to exercise
/// unordered delivery.
pub struct MemoryBus {
    topics: Mutex<HashMap<String, Arc<Topic>>>,
    shuffle: Option<Mutex<ChaCha8Rng>>,
    dlqs: Mutex<HashMap<String, DeadLetterQueue>>,
}

struct Topic {
    log: Mutex<TopicLog>,
    ready: Condvar,
}

impl Default for MemoryBus {
    fn default() -> Self {
        MemoryBus::new()
    }
}

impl MemoryBus {
    pub fn new() -> Self {
        MemoryBus { topics: Mutex::new(HashMap::new()), shuffle: None, dlqs: Mutex::new(HashMap::new()) }
    }

    pub fn with_shuffle(seed: u64) -> Self {
        MemoryBus { shuffle: Some(Mutex::new(ChaCha8Rng::seed_from_u64(seed))), ..MemoryBus::new() }
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        self.topics.lock().get(name).cloned().ok_or_else(|| BusError::TopicNotFound(name.to_string()))
    }
}

impl EventBus for MemoryBus {
    fn create_topic(&self, topic: &str) -> Result<(), BusError> {
        let mut topics = self.topics.lock();
        if topics.contains_key(topic) {
            return Err(BusError::TopicExists(topic.to_string()));
        }
        topics.insert(topic.to_string(), Arc::new(Topic { log: Mutex::new(TopicLog::default()), ready: Condvar::new() }));
        Ok(())
    }

    fn delete_topic(&self, topic: &str) -> Result<(), BusError> {
        self.dlqs.lock().remove(topic);
        self.topics.lock().remove(topic).map(|_| ()).ok_or_else(|| BusError::TopicNotFound(topic.to_string()))
    }

    fn has_topic(&self, topic: &str) -> bool {
        self.topics.lock().contains_key(topic)
    }

    fn publish_raw(&self, topic: &str, bytes: &[u8]) -> Result<u64, BusError> {
        let t = self.topic(topic)?;
        let mut log = t.log.lock();
        let offset = log.records.len() as u64;
        log.records.push(Arc::from(bytes));
        drop(log);
        t.ready.notify_all();
        Ok(offset)
    }

    fn poll(&self, topic: &str, max_batch: usize, wait: Duration) -> Result<Vec<Record>, BusError> {
        let t = self.topic(topic)?;
        let deadline = Instant::now() + wait;
        let mut log = t.log.lock();
        while log.cursor as usize >= log.records.len() {
            if t.ready.wait_until(&mut log, deadline).timed_out() {
                break;
            }
        }
        let mut batch = log.take_batch(max_batch);
        drop(log);
        if let Some(rng) = &self.shuffle {
            batch.shuffle(&mut *rng.lock());
        }
        Ok(batch)
    }

    fn commit(&self, topic: &str, through: u64) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut log = t.log.lock();
        log.check_commit(topic, through)?;
        log.committed = log.committed.max(through + 1);
        Ok(())
    }

    fn committed(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.log.lock().committed)
    }

    fn head(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.log.lock().records.len() as u64)
    }

    fn reset_consumer(&self, topic: &str) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut log = t.log.lock();
        log.cursor = log.committed;
        Ok(())
    }

    fn seek(&self, topic: &str, offset: u64) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut log = t.log.lock();
        let head = log.records.len() as u64;
        log.cursor = offset.min(head);
        if offset < log.committed {
            log.committed = offset;
        }
        Ok(())
    }

    fn read(&self, topic: &str, from: u64, max: usize) -> Result<Vec<Record>, BusError> {
        let t = self.topic(topic)?;
        let log = t.log.lock();
        let start = (from as usize).min(log.records.len());
        let end = start.saturating_add(max).min(log.records.len());
        Ok((start..end).map(|i| Record { offset: i as u64, bytes: log.records[i].clone() }).collect())
    }

    fn store_dlq(&self, topic: &str, dlq: &DeadLetterQueue) -> Result<(), BusError> {
        self.dlqs.lock().insert(topic.to_string(), dlq.clone());
        Ok(())
    }

    fn load_dlq(&self, topic: &str) -> Result<Option<DeadLetterQueue>, BusError> {
        Ok(self.dlqs.lock().get(topic).cloned())
    }
}

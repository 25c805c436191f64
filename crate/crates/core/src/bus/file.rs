use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::memory::TopicLog;
use super::{BusError, DeadLetterQueue, EventBus, Record};

const EVENTS_FILE: &str = "events.log";
const COMMIT_FILE: &str = "commit.offset";
const DLQ_FILE: &str = "dlq.log";

/// Durable bus: one directory per topic holding a length-prefixed record log
/// and a commit-offset sidecar replaced atomically on every commit.
pub struct FileBus {
    root: PathBuf,
    topics: Mutex<HashMap<String, Arc<FileTopic>>>,
    sync: bool,
}

struct FileTopic {
    dir: PathBuf,
    state: Mutex<FileTopicState>,
    ready: Condvar,
}

struct FileTopicState {
    log: TopicLog,
    writer: File,
}

impl FileBus {
    /// Opens (or creates) the bus rooted at `root`, recovering every topic
    /// directory found there.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, BusError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut topics = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            let dir = entry.path();
            if dir.join(EVENTS_FILE).is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                topics.insert(name, Arc::new(FileTopic::recover(dir)?));
            }
        }
        Ok(FileBus { root, topics: Mutex::new(topics), sync: false })
    }

    /// Also fsync every append (off by default; flush alone survives a process kill).
    pub fn with_fsync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn topic(&self, name: &str) -> Result<Arc<FileTopic>, BusError> {
        self.topics.lock().get(name).cloned().ok_or_else(|| BusError::TopicNotFound(name.to_string()))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)
}

pub(crate) fn encode_record(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
}

/// Splits a length-prefixed stream. Returns the records and the byte length
/// of the valid prefix (a torn trailing record is excluded).
pub(crate) fn decode_records(buf: &[u8]) -> (Vec<Arc<[u8]>>, usize) {
    let mut records = Vec::new();
    let mut pos = 0;
    while pos + 4 <= buf.len() {
        let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        if pos + 4 + len > buf.len() {
            break;
        }
        records.push(Arc::from(&buf[pos + 4..pos + 4 + len]));
        pos += 4 + len;
    }
    (records, pos)
}

impl FileTopic {
    fn create(dir: PathBuf) -> Result<Self, BusError> {
        fs::create_dir_all(&dir)?;
        File::create(dir.join(EVENTS_FILE))?;
        write_atomic(&dir.join(COMMIT_FILE), b"0")?;
        FileTopic::recover(dir)
    }

    fn recover(dir: PathBuf) -> Result<Self, BusError> {
        let path = dir.join(EVENTS_FILE);
        let mut buf = Vec::new();
        File::open(&path)?.read_to_end(&mut buf)?;
        let (records, valid) = decode_records(&buf);
        let mut writer = OpenOptions::new().write(true).open(&path)?;
        if valid < buf.len() {
            tracing::warn!(path = %path.display(), torn = buf.len() - valid, "truncating torn record");
            writer.set_len(valid as u64)?;
        }
        writer.seek(SeekFrom::Start(valid as u64))?;

        let committed = match fs::read_to_string(dir.join(COMMIT_FILE)) {
            Ok(text) => text.trim().parse::<u64>().map_err(|e| BusError::Corrupt {
                path: dir.join(COMMIT_FILE).display().to_string(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let committed = committed.min(records.len() as u64);
        let log = TopicLog { records, committed, cursor: committed };
        Ok(FileTopic { dir, state: Mutex::new(FileTopicState { log, writer }), ready: Condvar::new() })
    }

    fn write_commit(&self, committed: u64) -> Result<(), BusError> {
        write_atomic(&self.dir.join(COMMIT_FILE), committed.to_string().as_bytes())?;
        Ok(())
    }
}

impl EventBus for FileBus {
    fn create_topic(&self, topic: &str) -> Result<(), BusError> {
        let mut topics = self.topics.lock();
        if topics.contains_key(topic) {
            return Err(BusError::TopicExists(topic.to_string()));
        }
        let t = FileTopic::create(self.root.join(topic))?;
        topics.insert(topic.to_string(), Arc::new(t));
        Ok(())
    }

    fn delete_topic(&self, topic: &str) -> Result<(), BusError> {
        let t = self.topics.lock().remove(topic).ok_or_else(|| BusError::TopicNotFound(topic.to_string()))?;
        for name in [EVENTS_FILE, COMMIT_FILE, DLQ_FILE] {
            match fs::remove_file(t.dir.join(name)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }

    fn has_topic(&self, topic: &str) -> bool {
        self.topics.lock().contains_key(topic)
    }

    fn publish_raw(&self, topic: &str, bytes: &[u8]) -> Result<u64, BusError> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        let mut frame = Vec::with_capacity(bytes.len() + 4);
        encode_record(&mut frame, bytes);
        st.writer.write_all(&frame)?;
        st.writer.flush()?;
        if self.sync {
            st.writer.sync_data()?;
        }
        let offset = st.log.records.len() as u64;
        st.log.records.push(Arc::from(bytes));
        drop(st);
        t.ready.notify_all();
        Ok(offset)
    }

    fn poll(&self, topic: &str, max_batch: usize, wait: Duration) -> Result<Vec<Record>, BusError> {
        let t = self.topic(topic)?;
        let deadline = Instant::now() + wait;
        let mut st = t.state.lock();
        while st.log.cursor as usize >= st.log.records.len() {
            if t.ready.wait_until(&mut st, deadline).timed_out() {
                break;
            }
        }
        Ok(st.log.take_batch(max_batch))
    }

    fn commit(&self, topic: &str, through: u64) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        st.log.check_commit(topic, through)?;
        if through + 1 > st.log.committed {
            t.write_commit(through + 1)?;
            st.log.committed = through + 1;
        }
        Ok(())
    }

    fn committed(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.state.lock().log.committed)
    }

    fn head(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.state.lock().log.records.len() as u64)
    }

    fn reset_consumer(&self, topic: &str) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        st.log.cursor = st.log.committed;
        Ok(())
    }

    fn seek(&self, topic: &str, offset: u64) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        let head = st.log.records.len() as u64;
        st.log.cursor = offset.min(head);
        if offset < st.log.committed {
            t.write_commit(offset)?;
            st.log.committed = offset;
        }
        Ok(())
    }

    fn read(&self, topic: &str, from: u64, max: usize) -> Result<Vec<Record>, BusError> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        let len = st.log.records.len();
        let start = (from as usize).min(len);
        let end = start.saturating_add(max).min(len);
        Ok((start..end).map(|i| Record { offset: i as u64, bytes: st.log.records[i].clone() }).collect())
    }

    fn store_dlq(&self, topic: &str, dlq: &DeadLetterQueue) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        write_atomic(&t.dir.join(DLQ_FILE), &dlq.to_log_bytes())?;
        Ok(())
    }

    fn load_dlq(&self, topic: &str) -> Result<Option<DeadLetterQueue>, BusError> {
        let t = self.topic(topic)?;
        let path = t.dir.join(DLQ_FILE);
        match fs::read(&path) {
            Ok(bytes) => DeadLetterQueue::from_log_bytes(&bytes)
                .map(Some)
                .map_err(|reason| BusError::Corrupt { path: path.display().to_string(), reason }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

//! Monotonic delay queue backed by one thread.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

type Job = Box<dyn FnOnce() + Send>;

struct State {
    heap: BinaryHeap<Reverse<(Instant, u64)>>,
    jobs: HashMap<u64, Job>,
    seq: u64,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
}

pub struct DelayQueue {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl DelayQueue {
    pub fn new(name: &str) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State { heap: BinaryHeap::new(), jobs: HashMap::new(), seq: 0, shutdown: false }),
            wake: Condvar::new(),
        });
        let worker = shared.clone();
        let thread = std::thread::Builder::new()
            .name(name.to_string())
            .spawn(move || run(worker))
            .expect("spawn delay queue thread");
        DelayQueue { shared, thread: Some(thread) }
    }

    pub fn schedule(&self, at: Instant, job: impl FnOnce() + Send + 'static) {
        let mut st = self.shared.state.lock();
        let seq = st.seq;
        st.seq += 1;
        st.heap.push(Reverse((at, seq)));
        st.jobs.insert(seq, Box::new(job));
        drop(st);
        self.shared.wake.notify_one();
    }

    pub fn pending(&self) -> usize {
        self.shared.state.lock().jobs.len()
    }
}

fn run(shared: Arc<Shared>) {
    let mut st = shared.state.lock();
    loop {
        if st.shutdown {
            return;
        }
        let now = Instant::now();
        match st.heap.peek().copied() {
            Some(Reverse((at, seq))) if at <= now => {
                st.heap.pop();
                if let Some(job) = st.jobs.remove(&seq) {
                    drop(st);
                    job();
                    st = shared.state.lock();
                }
            }
            Some(Reverse((at, _))) => {
                shared.wake.wait_until(&mut st, at);
            }
            None => shared.wake.wait(&mut st),
        }
    }
}

impl Drop for DelayQueue {
    fn drop(&mut self) {
        self.shared.state.lock().shutdown = true;
        self.shared.wake.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::{self, Thread};
use std::time::Duration;

use crossbeam_queue::ArrayQueue;
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::metrics::Counters;

pub const DEFAULT_QUEUE_DEPTH: usize = 16;

/// Registered topic: name plus the dense numeric id assigned by its domain.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TopicId {
    id: u16,
    name: Arc<str>,
}

impl TopicId {
    pub(crate) fn new(id: u16, name: &str) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.name, self.id)
    }
}

/// A delivered message. Intra-process subscribers share one allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: u16,
    pub seq: u64,
    pub publish_timestamp_ns: u64,
    pub payload: Vec<u8>,
}

/// Wake-up primitive for a wait-set shared by several waitables.
#[derive(Debug, Default)]
pub struct Doorbell {
    rings: Mutex<u64>,
    cv: Condvar,
}

impl Doorbell {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ring(&self) {
        let mut g = self.rings.lock().unwrap();
        *g += 1;
        self.cv.notify_all();
    }

    pub fn rings(&self) -> u64 {
        *self.rings.lock().unwrap()
    }

    /// Blocks until the ring count moves past `seen` or `deadline_ns` passes.
    /// Does one blocking wait at most; callers loop and recheck readiness.
    pub fn wait(&self, seen: u64, deadline_ns: Option<u64>, counters: &Counters) {
        let g = self.rings.lock().unwrap();
        if *g != seen {
            return;
        }
        match deadline_ns {
            None => {
                counters.thread_park();
                drop(self.cv.wait(g).unwrap());
            }
            Some(deadline) => {
                let now = monotonic_ns();
                if now >= deadline {
                    return;
                }
                counters.timer_park();
                drop(
                    self.cv
                        .wait_timeout(g, Duration::from_nanos(deadline - now))
                        .unwrap(),
                );
            }
        }
    }
}

/// Who gets woken when a queue receives a message.
#[derive(Debug, Clone)]
pub enum Listener {
    /// A dedicated consumer thread, woken with `unpark`.
    Thread(Thread),
    Doorbell(Arc<Doorbell>),
}

impl Listener {
    pub fn notify(&self) {
        match self {
            Listener::Thread(t) => t.unpark(),
            Listener::Doorbell(d) => d.ring(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("subscription queue is closed")]
pub struct Closed;

/// Bounded FIFO of delivered messages for one subscription.
///
/// Any number of threads may push. At most one thread takes at a time; a
/// second concurrent taker panics. When full, the oldest message is dropped.
pub struct SubscriptionQueue {
    topic: TopicId,
    buf: ArrayQueue<Arc<Message>>,
    drops: AtomicU64,
    delivered: AtomicU64,
    listener: OnceLock<Listener>,
    closed: AtomicBool,
    taking: AtomicBool,
    counters: Arc<Counters>,
}

impl fmt::Debug for SubscriptionQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubscriptionQueue")
            .field("topic", &self.topic)
            .field("len", &self.buf.len())
            .field("capacity", &self.buf.capacity())
            .field("drops", &self.drops())
            .finish()
    }
}

struct TakeGuard<'a>(&'a AtomicBool);

impl Drop for TakeGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl SubscriptionQueue {
    pub(crate) fn new(topic: TopicId, capacity: usize, counters: Arc<Counters>) -> Self {
        Self {
            topic,
            buf: ArrayQueue::new(capacity.max(1)),
            drops: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            listener: OnceLock::new(),
            closed: AtomicBool::new(false),
            taking: AtomicBool::new(false),
            counters,
        }
    }

    pub fn topic(&self) -> &TopicId {
        &self.topic
    }

    pub fn capacity(&self) -> usize {
        self.buf.capacity()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    /// Total messages ever pushed, including ones later dropped.
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Acquire)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    /// Installs the consumer's wake-up target. Fails if one is already set.
    pub fn attach(&self, listener: Listener) -> Result<(), Listener> {
        self.listener.set(listener)
    }

    pub fn listener(&self) -> Option<&Listener> {
        self.listener.get()
    }

    /// Enqueues a message; returns `true` if the oldest message was dropped.
    pub(crate) fn push(&self, msg: Arc<Message>) -> bool {
        let dropped = self.buf.force_push(msg).is_some();
        if dropped {
            self.drops.fetch_add(1, Ordering::Relaxed);
        }
        self.delivered.fetch_add(1, Ordering::Release);
        if let Some(l) = self.listener.get() {
            l.notify();
        }
        dropped
    }

    /// Removes the oldest message without blocking.
    pub fn take(&self) -> Option<Arc<Message>> {
        let was_taking = self.taking.swap(true, Ordering::Acquire);
        assert!(
            !was_taking,
            "subscription queue {:?} has two concurrent consumers",
            self.topic
        );
        let _guard = TakeGuard(&self.taking);
        self.buf.pop()
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        if let Some(l) = self.listener.get() {
            l.notify();
        }
    }

    /// Takes the next message, parking the calling thread while the queue is
    /// empty when `blocking` is set. The first blocking caller becomes the
    /// queue's listener; any other thread blocking on it panics.
    pub fn await_message(&self, blocking: bool) -> Result<Option<Arc<Message>>, Closed> {
        if let Some(m) = self.take() {
            return Ok(Some(m));
        }
        if self.is_closed() {
            return Err(Closed);
        }
        if !blocking {
            return Ok(None);
        }
        let me = thread::current();
        let _ = self.listener.set(Listener::Thread(me.clone()));
        match self.listener.get() {
            Some(Listener::Thread(t)) if t.id() == me.id() => {}
            other => panic!(
                "blocking await on {:?} from a thread that is not its consumer ({other:?})",
                self.topic
            ),
        }
        loop {
            if let Some(m) = self.take() {
                return Ok(Some(m));
            }
            if self.is_closed() {
                return Err(Closed);
            }
            self.counters.thread_park();
            thread::park();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(seq: u64) -> Arc<Message> {
        Arc::new(Message {
            topic: 0,
            seq,
            publish_timestamp_ns: 0,
            payload: vec![],
        })
    }

    fn queue(cap: usize) -> (SubscriptionQueue, Arc<Counters>) {
        let c = Arc::new(Counters::new());
        (
            SubscriptionQueue::new(TopicId::new(0, "/t"), cap, c.clone()),
            c,
        )
    }

    #[test]
    fn overflow_drops_oldest() {
        let (q, _) = queue(16);
        let drops: usize = (1..=17).map(|s| q.push(msg(s)) as usize).sum();
        assert_eq!(drops, 1);
        assert_eq!(q.drops(), 1);
        assert_eq!(q.len(), 16);
        let seqs: Vec<u64> = std::iter::from_fn(|| q.take()).map(|m| m.seq).collect();
        assert_eq!(seqs, (2..=17).collect::<Vec<_>>());
    }

    #[test]
    fn non_blocking_on_empty_returns_none() {
        let (q, c) = queue(4);
        assert_eq!(q.await_message(false), Ok(None));
        assert_eq!(c.snapshot().thread_parks, 0);
    }

    #[test]
    fn blocking_with_message_present_does_not_park() {
        let (q, c) = queue(4);
        q.push(msg(1));
        assert_eq!(q.await_message(true).unwrap().unwrap().seq, 1);
        assert_eq!(c.snapshot().thread_parks, 0);
    }

    #[test]
    fn closed_queue_reports_closed_once_drained() {
        let (q, _) = queue(4);
        q.push(msg(1));
        q.close();
        assert!(q.await_message(true).unwrap().is_some());
        assert_eq!(q.await_message(true), Err(Closed));
        assert_eq!(q.await_message(false), Err(Closed));
    }

    #[test]
    fn doorbell_wait_returns_after_ring_or_deadline() {
        let c = Counters::new();
        let d = Arc::new(Doorbell::new());
        let seen = d.rings();
        d.ring();
        d.wait(seen, None, &c);
        assert_eq!(c.snapshot().thread_parks, 0);

        let t0 = monotonic_ns();
        d.wait(d.rings(), Some(t0 + 2_000_000), &c);
        assert_eq!(c.snapshot().timer_parks, 1);
    }
}

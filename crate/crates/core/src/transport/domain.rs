use std::io::{self, BufReader, Read, Write};
use std::net::Shutdown;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::frame::{encode_frame_into, read_frame, FrameError, MessageFrame, CONTROL_TOPIC};
use super::queue::{Message, SubscriptionQueue, TopicId, DEFAULT_QUEUE_DEPTH};
use crate::clock::monotonic_ns;
use crate::metrics::Counters;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic id space exhausted")]
    TooManyTopics,
    #[error("domain is shut down")]
    Closed,
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Outcome of one publish.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliverySummary {
    pub intra_deliveries: usize,
    pub inter_deliveries: usize,
    /// Messages evicted from full subscriber queues by this publish.
    pub drops: usize,
    /// Remote endpoints found gone during this publish.
    pub disconnected: usize,
}

/// One peer process reached over a local stream socket.
struct RemoteEndpoint {
    stream: Mutex<UnixStream>,
    alive: AtomicBool,
}

impl RemoteEndpoint {
    /// Writes one encoded frame, counting every write call.
    fn send(&self, bytes: &[u8], counters: &Counters) -> io::Result<()> {
        let mut stream = self.stream.lock().unwrap();
        let mut off = 0;
        while off < bytes.len() {
            counters.transport_write();
            match stream.write(&bytes[off..]) {
                Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
                Ok(n) => off += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Route {
    local: Vec<Arc<SubscriptionQueue>>,
    /// Endpoint plus the topic id the peer assigned.
    remote: Vec<(Arc<RemoteEndpoint>, u16)>,
}

struct TopicEntry {
    id: TopicId,
    version: AtomicU64,
    route: Mutex<Arc<Route>>,
    anonymous_seq: AtomicU64,
}

impl TopicEntry {
    fn update(&self, f: impl FnOnce(&mut Route)) {
        let mut g = self.route.lock().unwrap();
        let mut next = Route {
            local: g.local.clone(),
            remote: g.remote.clone(),
        };
        f(&mut next);
        *g = Arc::new(next);
        self.version.fetch_add(1, Ordering::Release);
    }

    fn current(&self) -> (u64, Arc<Route>) {
        let g = self.route.lock().unwrap();
        (self.version.load(Ordering::Acquire), g.clone())
    }
}

/// Hello sent by a subscriber process when it connects.
#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    topics: Vec<HelloTopic>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HelloTopic {
    name: String,
    id: u16,
}

struct Link {
    stream: UnixStream,
    receiver: Option<JoinHandle<()>>,
}

/// Topic registry and message router for one process.
///
/// Intra-process subscribers receive a shared reference to each message and
/// cost no system calls. Remote subscribers are reached through one stream
/// connection per peer process, multiplexing all topics.
pub struct Domain {
    counters: Arc<Counters>,
    topics: Mutex<Vec<Arc<TopicEntry>>>,
    endpoints: Mutex<Vec<Arc<RemoteEndpoint>>>,
    links: Mutex<Vec<Link>>,
    closed: AtomicBool,
    disconnects: Arc<AtomicU64>,
}

impl Default for Domain {
    fn default() -> Self {
        Self::new()
    }
}

impl Domain {
    pub fn new() -> Self {
        Self::with_counters(Arc::new(Counters::new()))
    }

    pub fn with_counters(counters: Arc<Counters>) -> Self {
        Self {
            counters,
            topics: Mutex::new(Vec::new()),
            endpoints: Mutex::new(Vec::new()),
            links: Mutex::new(Vec::new()),
            closed: AtomicBool::new(false),
            disconnects: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    /// Remote endpoints lost so far.
    pub fn disconnects(&self) -> u64 {
        self.disconnects.load(Ordering::Relaxed)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    /// Registers `name`, or returns the existing id. Ids are dense from 0.
    pub fn register_topic(&self, name: &str) -> Result<TopicId, TransportError> {
        Ok(self.entry_or_insert(name)?.id.clone())
    }

    fn entry_or_insert(&self, name: &str) -> Result<Arc<TopicEntry>, TransportError> {
        let mut topics = self.topics.lock().unwrap();
        if let Some(e) = topics.iter().find(|e| e.id.name() == name) {
            return Ok(e.clone());
        }
        let id = u16::try_from(topics.len()).map_err(|_| TransportError::TooManyTopics)?;
        if id == CONTROL_TOPIC {
            return Err(TransportError::TooManyTopics);
        }
        let entry = Arc::new(TopicEntry {
            id: TopicId::new(id, name),
            version: AtomicU64::new(0),
            route: Mutex::new(Arc::new(Route::default())),
            anonymous_seq: AtomicU64::new(0),
        });
        topics.push(entry.clone());
        Ok(entry)
    }

    pub fn topic(&self, name: &str) -> Option<TopicId> {
        self.topics
            .lock()
            .unwrap()
            .iter()
            .find(|e| e.id.name() == name)
            .map(|e| e.id.clone())
    }

    fn entry(&self, topic: &TopicId) -> Result<Arc<TopicEntry>, TransportError> {
        self.topics
            .lock()
            .unwrap()
            .get(topic.id() as usize)
            .filter(|e| e.id == *topic)
            .cloned()
            .ok_or_else(|| TransportError::UnknownTopic(topic.name().to_string()))
    }

    /// Creates a subscription queue on `topic` with the given capacity
    /// (default 16).
    pub fn subscribe(
        &self,
        topic: &TopicId,
        depth: Option<usize>,
    ) -> Result<Arc<SubscriptionQueue>, TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let entry = self.entry(topic)?;
        let q = Arc::new(SubscriptionQueue::new(
            topic.clone(),
            depth.unwrap_or(DEFAULT_QUEUE_DEPTH),
            self.counters.clone(),
        ));
        entry.update(|r| r.local.push(q.clone()));
        Ok(q)
    }

    pub fn publisher(&self, topic: &TopicId) -> Result<Publisher, TransportError> {
        let entry = self.entry(topic)?;
        let (version, route) = entry.current();
        Ok(Publisher {
            entry,
            seq: 0,
            version,
            route,
            counters: self.counters.clone(),
            disconnects: self.disconnects.clone(),
            scratch: Vec::new(),
        })
    }

    /// Publishes without a dedicated publisher handle; sequence numbers come
    /// from a per-topic counter shared by all such calls.
    pub fn publish(
        &self,
        topic: &TopicId,
        payload: &[u8],
    ) -> Result<DeliverySummary, TransportError> {
        let entry = self.entry(topic)?;
        let seq = entry.anonymous_seq.fetch_add(1, Ordering::Relaxed) + 1;
        let (_, route) = entry.current();
        let mut scratch = Vec::new();
        Ok(self.note_disconnects(deliver(
            &route,
            topic.id(),
            seq,
            payload,
            &self.counters,
            &mut scratch,
        )))
    }

    fn note_disconnects(&self, s: DeliverySummary) -> DeliverySummary {
        if s.disconnected > 0 {
            self.disconnects
                .fetch_add(s.disconnected as u64, Ordering::Relaxed);
        }
        s
    }

    /// Publisher side of a connection: reads the peer's hello and routes
    /// the topics it names to it.
    pub fn attach_subscriber(&self, stream: UnixStream) -> Result<usize, TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let hello = {
            let mut reader = CountingReader {
                inner: &stream,
                counters: &self.counters,
            };
            match read_frame(&mut reader)? {
                Some(f) if f.topic == CONTROL_TOPIC => serde_json::from_slice::<Hello>(&f.payload)
                    .map_err(|e| TransportError::Handshake(e.to_string()))?,
                Some(f) => {
                    return Err(TransportError::Handshake(format!(
                        "expected hello, got topic {}",
                        f.topic
                    )))
                }
                None => return Err(TransportError::Handshake("peer closed before hello".into())),
            }
        };
        let endpoint = Arc::new(RemoteEndpoint {
            stream: Mutex::new(stream),
            alive: AtomicBool::new(true),
        });
        for t in &hello.topics {
            let entry = self.entry_or_insert(&t.name)?;
            entry.update(|r| r.remote.push((endpoint.clone(), t.id)));
        }
        self.endpoints.lock().unwrap().push(endpoint);
        Ok(hello.topics.len())
    }

    /// Accepts one subscriber connection on `listener`, giving up after `timeout`.
    pub fn accept_subscriber(
        &self,
        listener: &UnixListener,
        timeout: Duration,
    ) -> Result<usize, TransportError> {
        listener.set_nonblocking(true)?;
        let deadline = monotonic_ns() + timeout.as_nanos() as u64;
        let stream = loop {
            match listener.accept() {
                Ok((s, _)) => break s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if monotonic_ns() >= deadline {
                        return Err(TransportError::Handshake(
                            "no subscriber connected in time".into(),
                        ));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nonblocking(false)?;
        self.attach_subscriber(stream)
    }

    /// Subscriber side: connects to a publisher process, announces every
    /// topic with a local subscription, and starts a receiver thread that
    /// feeds incoming frames to the local queues.
    pub fn connect_publisher(
        self: &Arc<Self>,
        path: impl AsRef<Path>,
    ) -> Result<(), TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let stream = UnixStream::connect(path)?;
        let topics: Vec<HelloTopic> = self
            .topics
            .lock()
            .unwrap()
            .iter()
            .filter(|e| !e.current().1.local.is_empty())
            .map(|e| HelloTopic {
                name: e.id.name().to_string(),
                id: e.id.id(),
            })
            .collect();
        let hello = serde_json::to_vec(&Hello { topics }).expect("hello serializes");
        let mut bytes = Vec::new();
        encode_frame_into(CONTROL_TOPIC, 0, monotonic_ns(), &hello, &mut bytes)?;
        let ep = RemoteEndpoint {
            stream: Mutex::new(stream.try_clone()?),
            alive: AtomicBool::new(true),
        };
        ep.send(&bytes, &self.counters)?;

        let domain = Arc::clone(self);
        let read_half = stream.try_clone()?;
        let receiver = thread::Builder::new()
            .name("isolexec-rx".into())
            .spawn(move || domain.receive_loop(read_half))?;
        self.links.lock().unwrap().push(Link {
            stream,
            receiver: Some(receiver),
        });
        Ok(())
    }

    fn receive_loop(&self, stream: UnixStream) {
        let mut reader = BufReader::with_capacity(
            64 * 1024,
            CountingReader {
                inner: &stream,
                counters: &self.counters,
            },
        );
        let mut summary = DeliverySummary::default();
        loop {
            let frame = match read_frame(&mut reader) {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    if !self.is_closed() {
                        log::warn!("receiver stopping: {e}");
                    }
                    break;
                }
            };
            if frame.topic == CONTROL_TOPIC {
                continue;
            }
            let entry = self
                .topics
                .lock()
                .unwrap()
                .get(frame.topic as usize)
                .cloned();
            let Some(entry) = entry else {
                log::warn!("frame for unknown topic id {}", frame.topic);
                continue;
            };
            let (_, route) = entry.current();
            deliver_local(&route, frame_into_message(frame), &mut summary);
        }
    }

    /// Closes every queue, wakes their consumers, and tears down connections.
    pub fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        for e in self.topics.lock().unwrap().iter() {
            for q in &e.current().1.local {
                q.close();
            }
        }
        for ep in self.endpoints.lock().unwrap().drain(..) {
            ep.alive.store(false, Ordering::Release);
            let _ = ep.stream.lock().unwrap().shutdown(Shutdown::Both);
        }
        let links: Vec<Link> = self.links.lock().unwrap().drain(..).collect();
        for mut link in links {
            let _ = link.stream.shutdown(Shutdown::Both);
            if let Some(h) = link.receiver.take() {
                let _ = h.join();
            }
        }
    }

    /// Waits until every remote link's receiver has seen end of stream.
    pub fn wait_remote_closed(&self, timeout: Duration) -> bool {
        let deadline = monotonic_ns() + timeout.as_nanos() as u64;
        loop {
            let done = self
                .links
                .lock()
                .unwrap()
                .iter()
                .all(|l| l.receiver.as_ref().is_none_or(|h| h.is_finished()));
            if done {
                return true;
            }
            if monotonic_ns() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for Domain {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn frame_into_message(f: MessageFrame) -> Message {
    Message {
        topic: f.topic,
        seq: f.seq,
        publish_timestamp_ns: f.publish_timestamp_ns,
        payload: f.payload,
    }
}

fn deliver_local(route: &Route, msg: Message, summary: &mut DeliverySummary) -> Arc<Message> {
    let msg = Arc::new(msg);
    for q in &route.local {
        if q.push(msg.clone()) {
            summary.drops += 1;
        }
        summary.intra_deliveries += 1;
    }
    msg
}

fn deliver(
    route: &Route,
    topic: u16,
    seq: u64,
    payload: &[u8],
    counters: &Counters,
    scratch: &mut Vec<u8>,
) -> DeliverySummary {
    let ts = monotonic_ns();
    let mut summary = DeliverySummary::default();
    if !route.local.is_empty() {
        let msg = Message {
            topic,
            seq,
            publish_timestamp_ns: ts,
            payload: payload.to_vec(),
        };
        deliver_local(route, msg, &mut summary);
    }
    for (ep, remote_id) in &route.remote {
        if !ep.alive.load(Ordering::Acquire) {
            continue;
        }
        scratch.clear();
        if encode_frame_into(*remote_id, seq, ts, payload, scratch).is_err() {
            continue;
        }
        match ep.send(scratch, counters) {
            Ok(()) => summary.inter_deliveries += 1,
            Err(_) => {
                if ep.alive.swap(false, Ordering::AcqRel) {
                    summary.disconnected += 1;
                }
            }
        }
    }
    summary
}

/// Per-(publisher, topic) handle. Sequence numbers start at 1 and increase
/// by one per publish.
pub struct Publisher {
    entry: Arc<TopicEntry>,
    seq: u64,
    version: u64,
    route: Arc<Route>,
    counters: Arc<Counters>,
    disconnects: Arc<AtomicU64>,
    scratch: Vec<u8>,
}

impl Publisher {
    pub fn topic(&self) -> &TopicId {
        &self.entry.id
    }

    pub fn publish(&mut self, payload: &[u8]) -> DeliverySummary {
        if self.entry.version.load(Ordering::Acquire) != self.version {
            let (v, r) = self.entry.current();
            self.version = v;
            self.route = r;
        }
        self.seq += 1;
        let s = deliver(
            &self.route,
            self.entry.id.id(),
            self.seq,
            payload,
            &self.counters,
            &mut self.scratch,
        );
        if s.disconnected > 0 {
            self.disconnects
                .fetch_add(s.disconnected as u64, Ordering::Relaxed);
        }
        s
    }
}

struct CountingReader<'a, R> {
    inner: R,
    counters: &'a Counters,
}

impl<R: Read> Read for CountingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.counters.transport_read();
        self.inner.read(buf)
    }
}

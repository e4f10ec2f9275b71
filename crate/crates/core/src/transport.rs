//! Simulated one-sided-write fabric.
//!
//! Every node registers one [`MemoryRegion`]. Peers write into it with
//! [`Fabric::post_write`]; the owner reads it directly. The fabric provides
//! the guarantees the protocol relies on:
//!
//! - writes on one `(src, dst)` channel become visible in post order, so
//!   seeing the bytes of write `k` implies seeing every earlier write;
//! - a single write is applied in ascending address order, one 64-byte line
//!   at a time, and each line is applied atomically with respect to
//!   [`MemoryRegion::read_line`] / [`MemoryRegion::read_bytes`];
//! - applying a write to a node wakes that node's registered [`Wake`] hook.
//!
//! Writes wait in a single due-time queue. With a real [`TimeSource`] a
//! background applier thread drains it ([`Fabric::start_applier`]); with a
//! virtual one the event driver pops writes itself ([`Fabric::apply_next`]).

use std::cell::Cell;
use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::TimeSource;

/// Atomicity granule of the fabric.
pub const LINE_BYTES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("{0} is outside the fabric")]
    UnknownNode(NodeId),
    #[error("{0} already registered a region")]
    DuplicateRegistration(NodeId),
    #[error("regions must be at least one byte")]
    EmptyRegion,
    #[error("{0} has no registered region")]
    UnknownDestination(NodeId),
    #[error("write of {len} bytes at offset {offset} exceeds region of {size} bytes")]
    OutOfBounds { offset: usize, len: usize, size: usize },
    #[error("write payload is empty")]
    EmptyPayload,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("unknown channel parameter `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("line {0} is not `key = value`")]
    Malformed(usize),
}

/// Write latency as a function of payload size.
///
/// Linear through two calibration points, extended with the same slope
/// beyond the second one. The defaults are 1.73 µs at 1 B and 2.46 µs at
/// 4 KiB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub at_1b_ns: f64,
    pub at_4k_ns: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            at_1b_ns: 1730.0,
            at_4k_ns: 2460.0,
        }
    }
}

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel {
        at_1b_ns: 0.0,
        at_4k_ns: 0.0,
    };

    pub fn latency_ns(&self, size: usize) -> u64 {
        let size = size.max(1) as f64;
        let slope = (self.at_4k_ns - self.at_1b_ns).max(0.0) / 4095.0;
        (self.at_1b_ns + slope * (size - 1.0)).max(0.0).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Time the poster is occupied per request.
    pub post_cost_ns: u64,
    pub latency: LatencyModel,
    /// Upper bound of a uniformly drawn extra delay per write.
    pub jitter_ns: u64,
    /// Per-source egress rate. Zero means unlimited.
    pub egress_bytes_per_ns: f64,
    pub seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            post_cost_ns: 1000,
            latency: LatencyModel::default(),
            jitter_ns: 0,
            egress_bytes_per_ns: 12.5,
            seed: 0,
        }
    }
}

impl ChannelParams {
    /// Free, instantaneous writes. Used by pure correctness tests.
    pub fn zero_cost() -> Self {
        Self {
            post_cost_ns: 0,
            latency: LatencyModel::ZERO,
            jitter_ns: 0,
            egress_bytes_per_ns: 0.0,
            seed: 0,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, ParamError> {
        let mut params = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ParamError::Malformed(no + 1))?;
            params.set(k.trim(), v.trim())?;
        }
        Ok(params)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ParamError> {
        let bad = || ParamError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let int = || value.parse::<u64>().map_err(|_| bad());
        let float = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(bad)
        };
        match key {
            "post_cost_ns" => self.post_cost_ns = int()?,
            "latency_1b_ns" => self.latency.at_1b_ns = float()?,
            "latency_4k_ns" => self.latency.at_4k_ns = float()?,
            "jitter_ns" => self.jitter_ns = int()?,
            "egress_bytes_per_ns" => self.egress_bytes_per_ns = float()?,
            "seed" => self.seed = int()?,
            _ => return Err(ParamError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

thread_local! {
    static CRITICAL_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Marks the current thread as inside a protocol critical section while the
/// guard lives. Posts issued meanwhile are counted by the fabric.
pub struct CriticalSection(());

impl CriticalSection {
    pub fn enter() -> Self {
        CRITICAL_DEPTH.with(|d| d.set(d.get() + 1));
        CriticalSection(())
    }

    pub fn active() -> bool {
        CRITICAL_DEPTH.with(|d| d.get() > 0)
    }
}

impl Drop for CriticalSection {
    fn drop(&mut self) {
        CRITICAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Registered memory of one node.
///
/// Storage is a sequence of atomic words grouped into 64-byte lines, each
/// guarded by a sequence counter. Any number of threads may read; writes to
/// a given line must come from one thread at a time, which the protocol
/// guarantees by giving every line a single writer (the owner under its
/// subgroup lock, or the fabric's applier).
pub struct MemoryRegion {
    owner: NodeId,
    size: usize,
    words: Box<[AtomicU64]>,
    seqs: Box<[AtomicU64]>,
}

impl fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("owner", &self.owner)
            .field("size", &self.size)
            .finish()
    }
}

impl MemoryRegion {
    fn new(owner: NodeId, size: usize) -> Self {
        let lines = size.div_ceil(LINE_BYTES);
        let words = (0..lines * LINE_BYTES / 8).map(|_| AtomicU64::new(0)).collect();
        let seqs = (0..lines).map(|_| AtomicU64::new(0)).collect();
        Self {
            owner,
            size,
            words,
            seqs,
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn check(&self, offset: usize, len: usize) {
        assert!(
            offset.checked_add(len).is_some_and(|end| end <= self.size),
            "access [{offset}, +{len}) outside region of {} bytes",
            self.size
        );
    }

    /// Loads an aligned 8-byte cell. Never torn.
    pub fn load_u64(&self, offset: usize) -> u64 {
        debug_assert_eq!(offset % 8, 0, "unaligned cell");
        self.check(offset, 8);
        self.words[offset / 8].load(Ordering::Acquire)
    }

    pub fn load_i64(&self, offset: usize) -> i64 {
        self.load_u64(offset) as i64
    }

    pub fn store_u64(&self, offset: usize, value: u64) {
        debug_assert_eq!(offset % 8, 0, "unaligned cell");
        self.check(offset, 8);
        let line = offset / LINE_BYTES;
        let seq = self.begin_line(line);
        self.words[offset / 8].store(value, Ordering::Release);
        self.end_line(line, seq);
    }

    pub fn store_i64(&self, offset: usize, value: i64) {
        self.store_u64(offset, value as u64)
    }

    /// Writes `data` at `offset`, line by line in ascending order.
    pub fn write_bytes(&self, offset: usize, data: &[u8]) {
        self.check(offset, data.len());
        let end = offset + data.len();
        let mut pos = offset;
        while pos < end {
            let line = pos / LINE_BYTES;
            let line_end = ((line + 1) * LINE_BYTES).min(end);
            let seq = self.begin_line(line);
            self.put_words(pos, &data[pos - offset..line_end - offset]);
            self.end_line(line, seq);
            pos = line_end;
        }
    }

    /// Reads `out.len()` bytes at `offset`. Each line is copied from a
    /// consistent snapshot.
    pub fn read_bytes(&self, offset: usize, out: &mut [u8]) {
        self.check(offset, out.len());
        let end = offset + out.len();
        let mut pos = offset;
        while pos < end {
            let line = pos / LINE_BYTES;
            let line_end = ((line + 1) * LINE_BYTES).min(end);
            let chunk = &mut out[pos - offset..line_end - offset];
            loop {
                let before = self.seqs[line].load(Ordering::Acquire);
                if before % 2 == 1 {
                    std::hint::spin_loop();
                    continue;
                }
                self.get_words(pos, chunk);
                fence(Ordering::Acquire);
                if self.seqs[line].load(Ordering::Relaxed) == before {
                    break;
                }
            }
            pos = line_end;
        }
    }

    /// Reads bytes the protocol guarantees are not being written, without the
    /// per-line retry loop.
    pub fn read_stable(&self, offset: usize, out: &mut [u8]) {
        self.check(offset, out.len());
        self.get_words(offset, out);
    }

    /// Consistent snapshot of one whole line.
    pub fn read_line(&self, line: usize) -> [u8; LINE_BYTES] {
        let mut buf = [0u8; LINE_BYTES];
        let offset = line * LINE_BYTES;
        let len = LINE_BYTES.min(self.size - offset);
        self.read_bytes(offset, &mut buf[..len]);
        buf
    }

    pub fn lines(&self) -> usize {
        self.seqs.len()
    }

    fn begin_line(&self, line: usize) -> u64 {
        let seq = self.seqs[line].load(Ordering::Relaxed);
        self.seqs[line].store(seq.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        seq
    }

    fn end_line(&self, line: usize, seq: u64) {
        self.seqs[line].store(seq.wrapping_add(2), Ordering::Release);
    }

    fn put_words(&self, start: usize, bytes: &[u8]) {
        let mut pos = start;
        let mut i = 0;
        while i < bytes.len() {
            let word = pos / 8;
            let within = pos % 8;
            let take = (8 - within).min(bytes.len() - i);
            let value = if take == 8 {
                u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap())
            } else {
                let mut cur = self.words[word].load(Ordering::Relaxed).to_le_bytes();
                cur[within..within + take].copy_from_slice(&bytes[i..i + take]);
                u64::from_le_bytes(cur)
            };
            self.words[word].store(value, Ordering::Release);
            pos += take;
            i += take;
        }
    }

    fn get_words(&self, start: usize, out: &mut [u8]) {
        let mut pos = start;
        let mut i = 0;
        while i < out.len() {
            let word = pos / 8;
            let within = pos % 8;
            let take = (8 - within).min(out.len() - i);
            let bytes = self.words[word].load(Ordering::Acquire).to_le_bytes();
            out[i..i + take].copy_from_slice(&bytes[within..within + take]);
            pos += take;
            i += take;
        }
    }
}

/// One-sided write as handed to the fabric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRequest {
    pub src: NodeId,
    pub dst: NodeId,
    pub offset: usize,
    pub payload: Vec<u8>,
    pub post_cost_ns: u64,
    pub wire_latency_ns: u64,
}

/// Wake hook invoked when a node has something new to look at.
pub trait Wake: Send + Sync {
    fn wake(&self);
}

impl<F: Fn() + Send + Sync> Wake for F {
    fn wake(&self) {
        self()
    }
}

#[derive(Debug)]
struct InFlight {
    due: u64,
    seq: u64,
    req: WriteRequest,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl Eq for InFlight {}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Reverse<InFlight>>,
    next_seq: u64,
    channel_due: Vec<u64>,
    egress_free: Vec<u64>,
    rng: ChaCha8Rng,
}

/// Counter snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FabricStats {
    pub writes_posted: u64,
    pub writes_applied: u64,
    pub in_flight: u64,
    pub bytes_posted: u64,
    pub doorbells: u64,
    pub post_time_ns: u64,
    pub posts_in_critical_section: u64,
    /// `per_channel[src][dst]` writes posted.
    pub per_channel: Vec<Vec<u64>>,
}

pub struct Fabric {
    nodes: usize,
    params: ChannelParams,
    time: TimeSource,
    regions: RwLock<Vec<Option<Arc<MemoryRegion>>>>,
    wakers: RwLock<Vec<Option<Arc<dyn Wake>>>>,
    queue: Mutex<Queue>,
    ready: Condvar,
    posted: Box<[AtomicU64]>,
    applied: Box<[AtomicU64]>,
    doorbells: AtomicU64,
    bytes_posted: AtomicU64,
    post_time_ns: AtomicU64,
    posts_in_critical: AtomicU64,
    shutdown: AtomicBool,
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric")
            .field("nodes", &self.nodes)
            .field("params", &self.params)
            .finish()
    }
}

impl Fabric {
    pub fn new(nodes: usize, params: ChannelParams, time: TimeSource) -> Arc<Self> {
        let counters = |n: usize| (0..n).map(|_| AtomicU64::new(0)).collect::<Box<[_]>>();
        Arc::new(Self {
            nodes,
            queue: Mutex::new(Queue {
                heap: BinaryHeap::new(),
                next_seq: 0,
                channel_due: vec![0; nodes * nodes],
                egress_free: vec![0; nodes],
                rng: ChaCha8Rng::seed_from_u64(params.seed),
            }),
            params,
            time,
            regions: RwLock::new(vec![None; nodes]),
            wakers: RwLock::new(vec![None; nodes]),
            ready: Condvar::new(),
            posted: counters(nodes * nodes),
            applied: counters(nodes * nodes),
            doorbells: AtomicU64::new(0),
            bytes_posted: AtomicU64::new(0),
            post_time_ns: AtomicU64::new(0),
            posts_in_critical: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn time(&self) -> &TimeSource {
        &self.time
    }

    pub fn register_region(&self, node: NodeId, size: usize) -> Result<Arc<MemoryRegion>, TransportError> {
        if node.0 >= self.nodes {
            return Err(TransportError::UnknownNode(node));
        }
        if size == 0 {
            return Err(TransportError::EmptyRegion);
        }
        let mut regions = self.regions.write().unwrap();
        if regions[node.0].is_some() {
            return Err(TransportError::DuplicateRegistration(node));
        }
        let region = Arc::new(MemoryRegion::new(node, size));
        regions[node.0] = Some(region.clone());
        Ok(region)
    }

    pub fn region(&self, node: NodeId) -> Option<Arc<MemoryRegion>> {
        self.regions.read().unwrap().get(node.0).cloned().flatten()
    }

    pub fn set_waker(&self, node: NodeId, waker: Arc<dyn Wake>) {
        self.wakers.write().unwrap()[node.0] = Some(waker);
    }

    /// Builds a request carrying this fabric's cost parameters.
    pub fn request(&self, src: NodeId, dst: NodeId, offset: usize, payload: Vec<u8>) -> WriteRequest {
        WriteRequest {
            src,
            dst,
            offset,
            post_cost_ns: self.params.post_cost_ns,
            wire_latency_ns: self.params.latency.latency_ns(payload.len()),
            payload,
        }
    }

    /// Shorthand for [`Fabric::request`] followed by [`Fabric::post_write`].
    pub fn post(&self, src: NodeId, dst: NodeId, offset: usize, payload: Vec<u8>) -> Result<(), TransportError> {
        self.post_write(self.request(src, dst, offset, payload))
    }

    /// Queues a write. The caller is occupied for the request's post cost;
    /// the payload lands after the wire latency, in channel order.
    pub fn post_write(&self, req: WriteRequest) -> Result<(), TransportError> {
        if req.src.0 >= self.nodes {
            return Err(TransportError::UnknownNode(req.src));
        }
        let size = self
            .region(req.dst)
            .ok_or(TransportError::UnknownDestination(req.dst))?
            .size();
        if req.payload.is_empty() {
            return Err(TransportError::EmptyPayload);
        }
        if req.offset.checked_add(req.payload.len()).is_none_or(|end| end > size) {
            return Err(TransportError::OutOfBounds {
                offset: req.offset,
                len: req.payload.len(),
                size,
            });
        }
        if CriticalSection::active() {
            self.posts_in_critical.fetch_add(1, Ordering::Relaxed);
        }
        self.time.busy_wait(req.post_cost_ns);
        self.post_time_ns.fetch_add(req.post_cost_ns, Ordering::Relaxed);

        let channel = req.src.0 * self.nodes + req.dst.0;
        let len = req.payload.len() as u64;
        {
            let mut q = self.queue.lock().unwrap();
            let now = self.time.now_ns();
            let mut sent = now;
            if self.params.egress_bytes_per_ns > 0.0 {
                let start = now.max(q.egress_free[req.src.0]);
                sent = start + (len as f64 / self.params.egress_bytes_per_ns).ceil() as u64;
                q.egress_free[req.src.0] = sent;
            }
            let jitter = if self.params.jitter_ns > 0 {
                q.rng.gen_range(0..=self.params.jitter_ns)
            } else {
                0
            };
            let due = (sent + req.wire_latency_ns + jitter).max(q.channel_due[channel]);
            q.channel_due[channel] = due;
            let seq = q.next_seq;
            q.next_seq += 1;
            q.heap.push(Reverse(InFlight { due, seq, req }));
        }
        self.posted[channel].fetch_add(1, Ordering::Relaxed);
        self.bytes_posted.fetch_add(len, Ordering::Relaxed);
        self.ready.notify_one();
        Ok(())
    }

    /// Wakes `dst`'s polling loop if it is parked.
    pub fn ring_doorbell(&self, src: NodeId, dst: NodeId) -> Result<(), TransportError> {
        if src.0 >= self.nodes {
            return Err(TransportError::UnknownNode(src));
        }
        if self.region(dst).is_none() {
            return Err(TransportError::UnknownDestination(dst));
        }
        self.doorbells.fetch_add(1, Ordering::Relaxed);
        self.wake(dst);
        Ok(())
    }

    fn wake(&self, node: NodeId) {
        let waker = self.wakers.read().unwrap()[node.0].clone();
        if let Some(w) = waker {
            w.wake();
        }
    }

    fn apply(&self, req: WriteRequest) {
        let region = self.region(req.dst).expect("destination validated at post time");
        region.write_bytes(req.offset, &req.payload);
        self.applied[req.src.0 * self.nodes + req.dst.0].fetch_add(1, Ordering::Release);
        self.wake(req.dst);
    }

    /// Due time of the earliest in-flight write.
    pub fn next_due(&self) -> Option<u64> {
        self.queue.lock().unwrap().heap.peek().map(|Reverse(w)| w.due)
    }

    /// Applies the earliest in-flight write regardless of the clock and
    /// returns its destination. Used by event drivers on virtual time.
    pub fn apply_next(&self) -> Option<NodeId> {
        let next = self.queue.lock().unwrap().heap.pop();
        next.map(|Reverse(w)| {
            let dst = w.req.dst;
            self.apply(w.req);
            dst
        })
    }

    /// Applies every write due at or before the current time.
    pub fn apply_due(&self) -> usize {
        let mut n = 0;
        loop {
            let next = {
                let mut q = self.queue.lock().unwrap();
                match q.heap.peek() {
                    Some(Reverse(w)) if w.due <= self.time.now_ns() => q.heap.pop(),
                    _ => None,
                }
            };
            match next {
                Some(Reverse(w)) => {
                    self.apply(w.req);
                    n += 1;
                }
                None => return n,
            }
        }
    }

    /// Spawns the background applier for real-time operation.
    pub fn start_applier(self: &Arc<Self>) -> ApplierHandle {
        let fabric = self.clone();
        let thread = std::thread::Builder::new()
            .name("fabric-applier".into())
            .spawn(move || fabric.applier_loop())
            .expect("spawn applier");
        ApplierHandle {
            fabric: self.clone(),
            thread: Some(thread),
        }
    }

    fn applier_loop(&self) {
        loop {
            let next = {
                let mut q = self.queue.lock().unwrap();
                loop {
                    if q.heap.is_empty() {
                        if self.shutdown.load(Ordering::Acquire) {
                            return;
                        }
                        q = self.ready.wait_timeout(q, Duration::from_millis(5)).unwrap().0;
                        continue;
                    }
                    break;
                }
                match q.heap.peek() {
                    Some(Reverse(w)) if w.due <= self.time.now_ns() => q.heap.pop(),
                    _ => None,
                }
            };
            match next {
                Some(Reverse(w)) => self.apply(w.req),
                None => std::thread::yield_now(),
            }
        }
    }

    /// Blocks until nothing is in flight. Only meaningful with a running
    /// applier.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            if self.queue.lock().unwrap().heap.is_empty() {
                return true;
            }
            std::thread::yield_now();
        }
        false
    }

    pub fn channel_writes(&self, src: NodeId, dst: NodeId) -> u64 {
        self.posted[src.0 * self.nodes + dst.0].load(Ordering::Relaxed)
    }

    pub fn channel_applied(&self, src: NodeId, dst: NodeId) -> u64 {
        self.applied[src.0 * self.nodes + dst.0].load(Ordering::Acquire)
    }

    pub fn stats(&self) -> FabricStats {
        let in_flight = self.queue.lock().unwrap().heap.len() as u64;
        let per_channel: Vec<Vec<u64>> = (0..self.nodes)
            .map(|s| {
                (0..self.nodes)
                    .map(|d| self.posted[s * self.nodes + d].load(Ordering::Relaxed))
                    .collect()
            })
            .collect();
        FabricStats {
            writes_posted: per_channel.iter().flatten().sum(),
            writes_applied: self.applied.iter().map(|c| c.load(Ordering::Acquire)).sum(),
            in_flight,
            bytes_posted: self.bytes_posted.load(Ordering::Relaxed),
            doorbells: self.doorbells.load(Ordering::Relaxed),
            post_time_ns: self.post_time_ns.load(Ordering::Relaxed),
            posts_in_critical_section: self.posts_in_critical.load(Ordering::Relaxed),
            per_channel,
        }
    }
}

/// Stops and joins the applier thread on drop.
pub struct ApplierHandle {
    fabric: Arc<Fabric>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for ApplierHandle {
    fn drop(&mut self) {
        self.fabric.shutdown.store(true, Ordering::Release);
        self.fabric.ready.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    use crate::time::VirtualClock;

    fn virtual_fabric(n: usize, params: ChannelParams) -> (Arc<Fabric>, Arc<VirtualClock>) {
        let clock = Arc::new(VirtualClock::new());
        (Fabric::new(n, params, TimeSource::virtual_time(clock.clone())), clock)
    }

    #[test]
    fn register_region_contract() {
        let (f, _) = virtual_fabric(2, ChannelParams::zero_cost());
        let r = f.register_region(NodeId(0), 16 << 20).unwrap();
        assert_eq!(r.size(), 16 << 20);
        assert_eq!(r.owner(), NodeId(0));
        assert_eq!(
            f.register_region(NodeId(0), 64).unwrap_err(),
            TransportError::DuplicateRegistration(NodeId(0))
        );
        assert_eq!(
            f.register_region(NodeId(1), 0).unwrap_err(),
            TransportError::EmptyRegion
        );
        assert_eq!(
            f.register_region(NodeId(5), 8).unwrap_err(),
            TransportError::UnknownNode(NodeId(5))
        );
    }

    #[test]
    fn post_write_errors() {
        let (f, _) = virtual_fabric(2, ChannelParams::zero_cost());
        f.register_region(NodeId(0), 128).unwrap();
        assert_eq!(
            f.post(NodeId(0), NodeId(1), 0, vec![1]).unwrap_err(),
            TransportError::UnknownDestination(NodeId(1))
        );
        assert!(matches!(
            f.post(NodeId(1), NodeId(0), 120, vec![0; 16]).unwrap_err(),
            TransportError::OutOfBounds { .. }
        ));
        assert_eq!(
            f.post(NodeId(1), NodeId(0), 0, vec![]).unwrap_err(),
            TransportError::EmptyPayload
        );
    }

    #[test]
    fn latency_curve_matches_calibration_points() {
        let m = LatencyModel::default();
        assert_eq!(m.latency_ns(1), 1730);
        assert_eq!(m.latency_ns(4096), 2460);
        assert!(m.latency_ns(10_240) > m.latency_ns(4096));
        let mut prev = 0;
        for size in [1, 2, 64, 1000, 4096, 5000, 1 << 20] {
            let l = m.latency_ns(size);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn params_parse_from_kv() {
        let p = ChannelParams::from_kv("# comment\npost_cost_ns = 250\njitter_ns=5\nlatency_1b_ns = 100\n").unwrap();
        assert_eq!(p.post_cost_ns, 250);
        assert_eq!(p.jitter_ns, 5);
        assert_eq!(p.latency.at_1b_ns, 100.0);
        assert!(matches!(
            ChannelParams::from_kv("nope = 1"),
            Err(ParamError::UnknownKey(_))
        ));
        assert!(matches!(
            ChannelParams::from_kv("post_cost_ns"),
            Err(ParamError::Malformed(1))
        ));
        assert!(matches!(
            ChannelParams::from_kv("post_cost_ns = -3"),
            Err(ParamError::BadValue { .. })
        ));
    }

    #[test]
    fn virtual_post_charges_poster_and_delays_visibility() {
        let params = ChannelParams {
            egress_bytes_per_ns: 0.0,
            ..ChannelParams::default()
        };
        let (f, clock) = virtual_fabric(2, params);
        let dst = f.register_region(NodeId(1), 64).unwrap();
        f.post(NodeId(0), NodeId(1), 0, 7u64.to_le_bytes().to_vec()).unwrap();
        assert_eq!(clock.now(), 1000);
        assert_eq!(dst.load_u64(0), 0);
        assert_eq!(f.next_due(), Some(1000 + LatencyModel::default().latency_ns(8)));
        assert_eq!(f.apply_next(), Some(NodeId(1)));
        assert_eq!(dst.load_u64(0), 7);
    }

    #[test]
    fn channel_order_survives_size_dependent_latency() {
        let (f, _) = virtual_fabric(
            2,
            ChannelParams {
                post_cost_ns: 0,
                ..ChannelParams::default()
            },
        );
        let dst = f.register_region(NodeId(1), 1 << 16).unwrap();
        // A large write followed by a tiny one: the tiny one must not overtake.
        f.post(NodeId(0), NodeId(1), 64, vec![9; 40_000]).unwrap();
        f.post(NodeId(0), NodeId(1), 0, 1u64.to_le_bytes().to_vec()).unwrap();
        assert_eq!(f.apply_next(), Some(NodeId(1)));
        assert_eq!(dst.load_u64(0), 0);
        f.apply_next();
        assert_eq!(dst.load_u64(0), 1);
    }

    #[test]
    fn thousand_posts_counted_per_channel() {
        let (f, _) = virtual_fabric(2, ChannelParams::zero_cost());
        f.register_region(NodeId(1), 64).unwrap();
        for i in 0..1000u64 {
            f.post(NodeId(0), NodeId(1), 0, i.to_le_bytes().to_vec()).unwrap();
        }
        assert_eq!(f.channel_writes(NodeId(0), NodeId(1)), 1000);
        assert_eq!(f.channel_writes(NodeId(1), NodeId(0)), 0);
        let s = f.stats();
        assert_eq!(s.writes_posted, s.writes_applied + s.in_flight);
        while f.apply_next().is_some() {}
        let s = f.stats();
        assert_eq!((s.writes_applied, s.in_flight), (1000, 0));
    }

    #[test]
    fn unaligned_byte_writes_round_trip() {
        let (f, _) = virtual_fabric(1, ChannelParams::zero_cost());
        let r = f.register_region(NodeId(0), 300).unwrap();
        let data: Vec<u8> = (0..=200u8).collect();
        r.write_bytes(3, &data);
        let mut out = vec![0u8; data.len()];
        r.read_bytes(3, &mut out);
        assert_eq!(out, data);
        r.read_stable(3, &mut out);
        assert_eq!(out, data);
        let mut edge = [0u8; 4];
        r.read_bytes(0, &mut edge);
        assert_eq!(edge, [0, 0, 0, 0]);
    }

    #[test]
    fn critical_section_posts_are_counted() {
        let (f, _) = virtual_fabric(2, ChannelParams::zero_cost());
        f.register_region(NodeId(1), 64).unwrap();
        f.post(NodeId(0), NodeId(1), 0, vec![1]).unwrap();
        {
            let _cs = CriticalSection::enter();
            f.post(NodeId(0), NodeId(1), 0, vec![1]).unwrap();
        }
        assert!(!CriticalSection::active());
        assert_eq!(f.stats().posts_in_critical_section, 1);
    }

    #[test]
    fn doorbell_wakes_registered_hook() {
        let (f, _) = virtual_fabric(2, ChannelParams::zero_cost());
        f.register_region(NodeId(1), 64).unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        f.set_waker(
            NodeId(1),
            Arc::new(move || {
                h.fetch_add(1, Ordering::SeqCst);
            }),
        );
        f.ring_doorbell(NodeId(0), NodeId(1)).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert_eq!(
            f.ring_doorbell(NodeId(0), NodeId(0)).unwrap_err(),
            TransportError::UnknownDestination(NodeId(0))
        );
        // implicit doorbell on arrival
        f.post(NodeId(0), NodeId(1), 0, vec![1]).unwrap();
        f.apply_next();
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        assert_eq!(f.stats().doorbells, 1);
    }
}

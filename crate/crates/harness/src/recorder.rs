use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use ringcast::multicast::{Delivery, DeliveryHandler};
use ringcast::records::DeliveryRecord;
use ringcast::time::TimeSource;

use crate::config::STAMP_BYTES;

/// Delivery handler used by every scenario: applies the configured upcall
/// delay, keeps the delivery log and commit-to-delivery latencies.
pub struct Recorder {
    node: usize,
    time: TimeSource,
    upcall_delay_ns: u64,
    keep_log: bool,
    log: Mutex<Vec<DeliveryRecord>>,
    latencies: Mutex<Vec<u64>>,
    delivered: AtomicU64,
    bytes: AtomicU64,
    last_ns: AtomicU64,
}

impl Recorder {
    pub fn new(node: usize, time: TimeSource, upcall_delay_ns: u64, keep_log: bool) -> Self {
        Self {
            node,
            time,
            upcall_delay_ns,
            keep_log,
            log: Mutex::new(Vec::new()),
            latencies: Mutex::new(Vec::new()),
            delivered: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            last_ns: AtomicU64::new(0),
        }
    }

    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Acquire)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    /// Time of the latest delivery.
    pub fn last_delivery_ns(&self) -> u64 {
        self.last_ns.load(Ordering::Relaxed)
    }

    pub fn log(&self) -> Vec<DeliveryRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn latencies(&self) -> Vec<u64> {
        self.latencies.lock().unwrap().clone()
    }

    fn record(&self, d: &Delivery<'_>) {
        let now = self.time.now_ns();
        if d.body.len() >= STAMP_BYTES {
            let stamp = d.body.read_u64_le(0).unwrap_or(now);
            self.latencies.lock().unwrap().push(now.saturating_sub(stamp));
        }
        if self.keep_log {
            self.log.lock().unwrap().push(DeliveryRecord {
                node: self.node,
                sg: d.sg_id,
                rank: d.id.sender_rank,
                index: d.id.index,
                seq: d.seq.0,
                digest: d.body.digest(),
            });
        }
        self.bytes.fetch_add(d.body.len() as u64, Ordering::Relaxed);
        self.last_ns.fetch_max(now, Ordering::Relaxed);
        self.delivered.fetch_add(1, Ordering::Release);
    }
}

impl DeliveryHandler for Recorder {
    fn deliver(&self, delivery: Delivery<'_>) {
        self.time.busy_wait(self.upcall_delay_ns);
        self.record(&delivery);
    }

    fn deliver_batch(&self, batch: Vec<Delivery<'_>>) {
        self.time.busy_wait(self.upcall_delay_ns);
        for d in &batch {
            self.record(d);
        }
    }
}

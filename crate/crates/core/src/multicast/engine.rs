use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lock::{Parker, SgLock};
use super::seq::{compute_received_num, decode, null_count_decision, seq_num, SeqNum};
use crate::records::{CommitKind, CommitRecord};
use crate::smc::{
    body_view, contiguous_runs, scan_new_messages, BodyView, MessageId, SenderRing, SlotWriter, SmcError,
    SubgroupConfig,
};
use crate::sst::{SstTable, SubgroupColumns};
use crate::time::TimeSource;
use crate::transport::{NodeId, Wake};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    /// One upcall per message with a view into the slot.
    #[default]
    InPlace,
    /// One upcall per message with an owned copy.
    CopyOut,
    /// One upcall per predicate firing with every deliverable message.
    Batched,
}

impl FromStr for DeliveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in_place" | "inplace" => Ok(DeliveryMode::InPlace),
            "copy_out" | "copy" => Ok(DeliveryMode::CopyOut),
            "batched" | "batch" => Ok(DeliveryMode::Batched),
            _ => Err(format!("unknown delivery mode {s:?}")),
        }
    }
}

/// CPU costs charged on virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub predicate_ns: u64,
    pub slot_check_ns: u64,
    pub per_message_ns: u64,
    pub memcpy_bytes_per_ns: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            predicate_ns: 40,
            slot_check_ns: 10,
            per_message_ns: 30,
            memcpy_bytes_per_ns: 10.0,
        }
    }
}

impl CostModel {
    pub fn free() -> Self {
        Self {
            predicate_ns: 0,
            slot_check_ns: 0,
            per_message_ns: 0,
            memcpy_bytes_per_ns: 0.0,
        }
    }

    pub fn memcpy_ns(&self, bytes: usize) -> u64 {
        if self.memcpy_bytes_per_ns <= 0.0 {
            0
        } else {
            (bytes as f64 / self.memcpy_bytes_per_ns).ceil() as u64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub batching: bool,
    pub nulls: bool,
    pub release_lock_before_push: bool,
    pub delivery_mode: DeliveryMode,
    /// Per-subgroup delivery mode, overriding `delivery_mode`.
    pub mode_overrides: Vec<(usize, DeliveryMode)>,
    pub record_commits: bool,
    pub cost: CostModel,
    pub idle_sweeps_before_park: u64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            batching: true,
            nulls: true,
            release_lock_before_push: true,
            delivery_mode: DeliveryMode::InPlace,
            mode_overrides: Vec::new(),
            record_commits: false,
            cost: CostModel::default(),
            idle_sweeps_before_park: 10_000,
        }
    }
}

/// Batch-size histogram: size -> number of firings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram(pub BTreeMap<u64, u64>);

impl Histogram {
    pub fn record(&mut self, size: u64) {
        *self.0.entry(size).or_default() += 1;
    }

    pub fn firings(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn items(&self) -> u64 {
        self.0.iter().map(|(s, c)| s * c).sum()
    }

    /// Most frequent size; ties go to the smaller size.
    pub fn mode(&self) -> Option<u64> {
        self.0
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&s, _)| s)
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (&s, &c) in &other.0 {
            *self.0.entry(s).or_default() += c;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub send_writes: u64,
    pub receive_writes: u64,
    pub delivery_writes: u64,
    pub reals_committed: u64,
    pub nulls_committed: u64,
    pub null_commit_events: u64,
    pub lemma_violations: u64,
    pub delivered_reals: u64,
    pub delivered_bytes: u64,
    pub upcalls: u64,
    pub copy_bytes: u64,
    pub sweeps: u64,
    pub busy_sweeps: u64,
    pub parks: u64,
    pub send_batches: Histogram,
    pub receive_batches: Histogram,
    pub delivery_batches: Histogram,
}

impl EngineMetrics {
    pub fn writes(&self) -> u64 {
        self.send_writes + self.receive_writes + self.delivery_writes
    }
}

#[derive(Debug)]
pub enum Payload<'a> {
    InPlace(BodyView<'a>),
    Copied(Vec<u8>),
}

impl Payload<'_> {
    pub fn len(&self) -> usize {
        match self {
            Payload::InPlace(v) => v.len(),
            Payload::Copied(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_u64_le(&self, at: usize) -> Option<u64> {
        match self {
            Payload::InPlace(v) => v.read_u64_le(at),
            Payload::Copied(v) => v.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap())),
        }
    }

    pub fn digest(&self) -> u64 {
        match self {
            Payload::InPlace(v) => v.digest(),
            Payload::Copied(v) => crate::digest::digest(v),
        }
    }

    pub fn to_vec(&self) -> Vec<u8> {
        match self {
            Payload::InPlace(v) => v.to_vec(),
            Payload::Copied(v) => v.clone(),
        }
    }
}

/// An application-visible delivery. Nulls never surface here.
#[derive(Debug)]
pub struct Delivery<'a> {
    pub sg_id: usize,
    pub id: MessageId,
    pub seq: SeqNum,
    pub body: Payload<'a>,
}

/// Application upcalls. They run on the polling thread while it holds the
/// subgroup lock, so a handler must not send on the same node.
pub trait DeliveryHandler: Send + Sync {
    fn deliver(&self, delivery: Delivery<'_>);

    fn deliver_batch(&self, batch: Vec<Delivery<'_>>) {
        for d in batch {
            self.deliver(d);
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SendError {
    #[error("node is not a member of subgroup {0}")]
    UnknownSubgroup(usize),
    #[error("{node} is not a sender in subgroup {sg}")]
    NotASender { sg: usize, node: NodeId },
    #[error("message of {len} bytes exceeds the maximum of {max}")]
    TooLarge { len: usize, max: usize },
    #[error(transparent)]
    Build(#[from] SmcError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("subgroup {0} is not in the table layout")]
    NotInLayout(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Real { index: u64, pos: usize, len: usize },
    Null { index: u64 },
}

impl Entry {
    fn index(&self) -> u64 {
        match *self {
            Entry::Real { index, .. } | Entry::Null { index } => index,
        }
    }
}

struct Receiver {
    accounted: Vec<u64>,
    reals_seen: Vec<u64>,
    nulls_seen: Vec<u64>,
    backlog: Vec<VecDeque<Entry>>,
    received: i64,
    delivered: i64,
}

struct Shared {
    ring: Option<SenderRing>,
    nulls_total: u64,
    rx: Receiver,
}

struct Subgroup {
    cfg: SubgroupConfig,
    cols: SubgroupColumns,
    rank: Option<usize>,
    peers: Vec<NodeId>,
    mode: DeliveryMode,
    state: SgLock<Shared>,
}

/// Writes a predicate firing wants posted once its state change is done.
#[derive(Default)]
struct Plan {
    slot_runs: Vec<(usize, usize)>,
    scalar_pushes: usize,
}

/// Protocol engine of one node: all subgroups it belongs to, driven by a
/// single polling thread.
pub struct Engine {
    me: NodeId,
    table: SstTable,
    subgroups: Vec<Subgroup>,
    options: EngineOptions,
    handler: Arc<dyn DeliveryHandler>,
    wake: Arc<dyn Wake>,
    time: TimeSource,
    metrics: Mutex<EngineMetrics>,
    commits: Mutex<Vec<CommitRecord>>,
}

impl Engine {
    /// `wake` is invoked after every local commit so a parked polling loop
    /// notices new work.
    pub fn new(
        table: SstTable,
        configs: &[SubgroupConfig],
        options: EngineOptions,
        handler: Arc<dyn DeliveryHandler>,
        wake: Arc<dyn Wake>,
    ) -> Result<Self, EngineError> {
        let me = table.me();
        let time = table.fabric().time().clone();
        let mut subgroups = Vec::new();
        for cfg in configs.iter().filter(|c| c.members.contains(&me)) {
            let cols = table
                .layout()
                .columns(cfg.sg_id)
                .ok_or(EngineError::NotInLayout(cfg.sg_id))?
                .clone();
            let s = cfg.senders.len();
            let rank = cfg.sender_rank(me);
            let mode = options
                .mode_overrides
                .iter()
                .find(|(id, _)| *id == cfg.sg_id)
                .map_or(options.delivery_mode, |&(_, m)| m);
            subgroups.push(Subgroup {
                cols,
                rank,
                peers: cfg.members.iter().copied().filter(|&m| m != me).collect(),
                mode,
                state: SgLock::new(
                    Shared {
                        ring: rank.map(|r| SenderRing::new(r, s, cfg.window)),
                        nulls_total: 0,
                        rx: Receiver {
                            accounted: vec![0; s],
                            reals_seen: vec![0; s],
                            nulls_seen: vec![0; s],
                            backlog: vec![VecDeque::new(); s],
                            received: -1,
                            delivered: -1,
                        },
                    },
                    time.clone(),
                ),
                cfg: cfg.clone(),
            });
        }
        Ok(Self {
            me,
            table,
            subgroups,
            options,
            handler,
            wake,
            time,
            metrics: Mutex::new(EngineMetrics::default()),
            commits: Mutex::new(Vec::new()),
        })
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn table(&self) -> &SstTable {
        &self.table
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn subgroup_ids(&self) -> Vec<usize> {
        self.subgroups.iter().map(|s| s.cfg.sg_id).collect()
    }

    pub fn metrics(&self) -> EngineMetrics {
        self.metrics.lock().unwrap().clone()
    }

    pub fn record_park(&self) {
        self.metrics.lock().unwrap().parks += 1;
    }

    pub fn take_commits(&self) -> Vec<CommitRecord> {
        std::mem::take(&mut *self.commits.lock().unwrap())
    }

    /// Virtual nanoseconds spent waiting on subgroup locks.
    pub fn lock_wait_ns(&self) -> u64 {
        self.subgroups.iter().map(|s| s.state.waited_ns()).sum()
    }

    fn subgroup(&self, sg_id: usize) -> Result<&Subgroup, SendError> {
        self.subgroups
            .iter()
            .find(|s| s.cfg.sg_id == sg_id)
            .ok_or(SendError::UnknownSubgroup(sg_id))
    }

    fn sg(&self, sg_id: usize) -> &Subgroup {
        self.subgroup(sg_id)
            .unwrap_or_else(|_| panic!("{} is not in subgroup {sg_id}", self.me))
    }

    pub fn max_payload(&self, sg_id: usize) -> Result<usize, SendError> {
        Ok(self.subgroup(sg_id)?.cols.max_payload())
    }

    pub fn received_num(&self, sg_id: usize) -> SeqNum {
        SeqNum(self.sg(sg_id).state.lock().rx.received)
    }

    pub fn delivered_num(&self, sg_id: usize) -> SeqNum {
        SeqNum(self.sg(sg_id).state.lock().rx.delivered)
    }

    pub fn accounted(&self, sg_id: usize) -> Vec<u64> {
        self.sg(sg_id).state.lock().rx.accounted.clone()
    }

    pub fn own_committed_index(&self, sg_id: usize) -> Option<u64> {
        self.sg(sg_id)
            .state
            .lock()
            .ring
            .as_ref()
            .map(|r| r.own_committed_index())
    }

    pub fn nulls_announced(&self, sg_id: usize) -> u64 {
        self.sg(sg_id).state.lock().nulls_total
    }

    pub fn pending_sends(&self, sg_id: usize) -> usize {
        self.sg(sg_id).state.lock().ring.as_ref().map_or(0, |r| r.pending_len())
    }

    /// Builds a message in place if a slot is free. `Ok(None)` means the
    /// window is full; retry after deliveries progress.
    pub fn try_send<F>(&self, sg_id: usize, body_len: usize, build: F) -> Result<Option<MessageId>, SendError>
    where
        F: FnOnce(&mut SlotWriter<'_>) -> Result<(), SmcError>,
    {
        let sg = self.subgroup(sg_id)?;
        if sg.rank.is_none() {
            return Err(SendError::NotASender {
                sg: sg_id,
                node: self.me,
            });
        }
        let max = sg.cols.max_payload();
        if body_len > max {
            return Err(SendError::TooLarge { len: body_len, max });
        }
        let id = {
            let mut st = sg.state.lock();
            self.time.charge(self.options.cost.predicate_ns);
            let ring = st.ring.as_mut().expect("senders own a ring");
            let Some(handle) = ring.acquire_slot(&self.table, &sg.cols, &sg.cfg.members) else {
                return Ok(None);
            };
            let mut writer = SlotWriter::new(&self.table, &sg.cols, &handle, body_len);
            if let Err(e) = build(&mut writer) {
                ring.release(handle);
                return Err(e.into());
            }
            let digest = if self.options.record_commits {
                writer.view().digest()
            } else {
                0
            };
            let id = ring.commit_send(&self.table, &sg.cols, handle, body_len)?;
            if self.options.record_commits {
                self.commits.lock().unwrap().push(CommitRecord {
                    node: self.me.0,
                    sg: sg_id,
                    rank: id.sender_rank,
                    index: id.index,
                    kind: CommitKind::Real,
                    digest,
                });
            }
            id
        };
        self.metrics.lock().unwrap().reals_committed += 1;
        self.wake.wake();
        Ok(Some(id))
    }

    /// Copy-in variant of [`Engine::try_send`].
    pub fn try_send_copy(&self, sg_id: usize, data: &[u8]) -> Result<Option<MessageId>, SendError> {
        let sent = self.try_send(sg_id, data.len(), |w| w.write(0, data))?;
        if sent.is_some() {
            self.time.charge(self.options.cost.memcpy_ns(data.len()));
            self.metrics.lock().unwrap().copy_bytes += data.len() as u64;
        }
        Ok(sent)
    }

    /// Blocking send for real-time runtimes: retries until a slot frees up.
    pub fn send<F>(&self, sg_id: usize, body_len: usize, mut build: F) -> Result<MessageId, SendError>
    where
        F: FnMut(&mut SlotWriter<'_>) -> Result<(), SmcError>,
    {
        loop {
            if let Some(id) = self.try_send(sg_id, body_len, &mut build)? {
                return Ok(id);
            }
            std::thread::yield_now();
        }
    }

    pub fn send_copy(&self, sg_id: usize, data: &[u8]) -> Result<MessageId, SendError> {
        loop {
            if let Some(id) = self.try_send_copy(sg_id, data)? {
                return Ok(id);
            }
            std::thread::yield_now();
        }
    }

    fn execute(&self, sg: &Subgroup, plan: &Plan) -> u64 {
        let mut writes = 0;
        for &(first, count) in &plan.slot_runs {
            writes += self
                .table
                .push_cells(sg.cols.slot_range(first, count), &sg.peers)
                .expect("slot push within own row to members");
        }
        for _ in 0..plan.scalar_pushes {
            writes += self
                .table
                .push_cells(sg.cols.scalar_block(), &sg.peers)
                .expect("scalar push within own row to members");
        }
        writes as u64
    }

    /// Runs `body` under the subgroup lock and posts the resulting plan,
    /// after releasing the lock unless that optimization is off.
    fn fire<R>(&self, sg: &Subgroup, body: impl FnOnce(&mut Shared) -> (Plan, R)) -> (u64, R) {
        let mut st = sg.state.lock();
        self.time.charge(self.options.cost.predicate_ns);
        let (plan, out) = body(&mut st);
        let writes = if self.options.release_lock_before_push {
            drop(st);
            self.execute(sg, &plan)
        } else {
            let w = self.execute(sg, &plan);
            drop(st);
            w
        };
        (writes, out)
    }

    /// Pushes queued slots to every other member. Returns slots pushed.
    pub fn send_step(&self, sg_id: usize) -> usize {
        let sg = self.sg(sg_id);
        if sg.rank.is_none() {
            return 0;
        }
        let limit = if self.options.batching { usize::MAX } else { 1 };
        let (writes, slots) = self.fire(sg, |st| {
            let queued = st.ring.as_mut().map(|r| r.take_pending(limit)).unwrap_or_default();
            let plan = Plan {
                slot_runs: contiguous_runs(&queued),
                scalar_pushes: 0,
            };
            (plan, queued.len())
        });
        let mut m = self.metrics.lock().unwrap();
        m.send_writes += writes;
        if slots > 0 {
            m.send_batches.record(slots as u64);
        }
        slots
    }

    /// Accounts newly visible messages and nulls, commits nulls if this
    /// node lags, and pushes the scalar block. Returns messages accounted.
    pub fn receive_step(&self, sg_id: usize) -> usize {
        let sg = self.sg(sg_id);
        let (writes, (accounted, lemma_broken)) = self.fire(sg, |st| self.receive_locked(sg, st));
        let mut m = self.metrics.lock().unwrap();
        m.receive_writes += writes;
        if lemma_broken {
            m.lemma_violations += 1;
        }
        if accounted > 0 {
            m.receive_batches.record(accounted as u64);
        }
        accounted
    }

    /// Merges one sender's reals and nulls in index order, up to `cap`.
    fn account_sender(&self, sg: &Subgroup, rx: &mut Receiver, j: usize, cap: usize) -> usize {
        let node = sg.cfg.senders[j];
        // announcement first, then slots
        let announced = self.table.read(node, sg.cols.nulls()).max(0) as u64;
        let scan_limit = cap.min(sg.cols.window);
        let scanned = scan_new_messages(&self.table, &sg.cols, node, rx.reals_seen[j], scan_limit);
        self.time
            .charge(self.options.cost.slot_check_ns * (scanned.len() as u64 + 1));
        let mut next_real = scanned.iter().peekable();
        let mut took = 0;
        while took < cap {
            let at = rx.accounted[j];
            if let Some(m) = next_real.peek() {
                assert!(
                    m.msg_index >= at,
                    "protocol violation: {node} slot {} carries index {} but {} indices are already accounted",
                    m.pos,
                    m.msg_index,
                    at
                );
                if m.msg_index == at {
                    rx.backlog[j].push_back(Entry::Real {
                        index: at,
                        pos: m.pos,
                        len: m.body_len,
                    });
                    rx.reals_seen[j] += 1;
                    rx.accounted[j] += 1;
                    next_real.next();
                    took += 1;
                    continue;
                }
            }
            if rx.nulls_seen[j] < announced {
                rx.backlog[j].push_back(Entry::Null { index: at });
                rx.nulls_seen[j] += 1;
                rx.accounted[j] += 1;
                took += 1;
                continue;
            }
            break;
        }
        took
    }

    fn refresh_received(&self, sg: &Subgroup, rx: &mut Receiver) -> bool {
        let r = compute_received_num(&rx.accounted, sg.cfg.senders.len()).0;
        if r == rx.received {
            return false;
        }
        rx.received = r;
        self.table
            .update_local_cell(sg.cols.received(), r)
            .expect("received_num only grows");
        true
    }

    fn receive_locked(&self, sg: &Subgroup, st: &mut Shared) -> (Plan, (usize, bool)) {
        let s = sg.cfg.senders.len();
        let batching = self.options.batching;
        let cap = if batching { usize::MAX } else { 1 };
        let mut plan = Plan::default();
        let mut total = 0;
        let mut newest: Option<MessageId> = None;
        let mut changed = false;
        for j in 0..s {
            let took = self.account_sender(sg, &mut st.rx, j, cap);
            if took == 0 {
                continue;
            }
            total += took;
            let last = MessageId {
                sender_rank: j,
                index: st.rx.accounted[j] - 1,
            };
            if newest.is_none_or(|n| seq_num(j, last.index, s) > seq_num(n.sender_rank, n.index, s)) {
                newest = Some(last);
            }
            let moved = self.refresh_received(sg, &mut st.rx);
            if batching {
                changed |= moved;
            } else if moved {
                plan.scalar_pushes += 1;
            }
        }

        let mut lemma_broken = false;
        if let (true, Some(i), Some(newest)) = (self.options.nulls, sg.rank, newest) {
            let ring = st.ring.as_mut().expect("senders own a ring");
            let count = null_count_decision(i, ring.own_committed_index(), newest);
            if count > 0 {
                let indices = ring.commit_nulls(count);
                st.nulls_total += count;
                self.table
                    .update_local_cell(sg.cols.nulls(), st.nulls_total as i64)
                    .expect("null counter only grows");
                lemma_broken = !one_round_holds(i, ring.own_committed_index(), &st.rx.accounted, s);
                debug_assert!(!lemma_broken, "null commit overshoots or undershoots the round");
                // queued reals go out before the announcement
                let queued = ring.take_pending(usize::MAX);
                plan.slot_runs = contiguous_runs(&queued);
                if self.options.record_commits {
                    let mut log = self.commits.lock().unwrap();
                    log.extend(indices.map(|index| CommitRecord {
                        node: self.me.0,
                        sg: sg.cfg.sg_id,
                        rank: i,
                        index,
                        kind: CommitKind::Null,
                        digest: 0,
                    }));
                }
                let mut m = self.metrics.lock().unwrap();
                m.nulls_committed += count;
                m.null_commit_events += 1;
                drop(m);
                total += self.account_sender(sg, &mut st.rx, i, usize::MAX);
                self.refresh_received(sg, &mut st.rx);
                changed = true;
                plan.scalar_pushes = plan.scalar_pushes.max(1);
            }
        }
        if batching && changed {
            plan.scalar_pushes = 1;
        }
        (plan, (total, lemma_broken))
    }

    /// Delivers every position up to the members' common received frontier.
    /// Returns positions consumed, nulls included.
    pub fn delivery_step(&self, sg_id: usize) -> usize {
        let sg = self.sg(sg_id);
        let (writes, (advanced, reals, bytes, upcalls, copied)) = self.fire(sg, |st| self.deliver_locked(sg, st));
        let mut m = self.metrics.lock().unwrap();
        m.delivery_writes += writes;
        m.delivered_reals += reals;
        m.delivered_bytes += bytes;
        m.upcalls += upcalls;
        m.copy_bytes += copied;
        if advanced > 0 {
            m.delivery_batches.record(advanced);
        }
        advanced as usize
    }

    fn deliver_locked(&self, sg: &Subgroup, st: &mut Shared) -> (Plan, (u64, u64, u64, u64, u64)) {
        let frontier = sg
            .cfg
            .members
            .iter()
            .map(|&m| self.table.read(m, sg.cols.received()))
            .min()
            .unwrap_or(-1);
        let rx = &mut st.rx;
        if frontier <= rx.delivered {
            return (Plan::default(), (0, 0, 0, 0, 0));
        }
        let end = if self.options.batching {
            frontier
        } else {
            rx.delivered + 1
        };
        let s = sg.cfg.senders.len();
        let cost = self.options.cost;
        let (mut reals, mut bytes, mut upcalls, mut copied) = (0, 0, 0, 0);
        let mut batch = Vec::new();
        for pos in rx.delivered + 1..=end {
            let seq = SeqNum(pos);
            let id = decode(seq, s);
            let entry = rx.backlog[id.sender_rank]
                .pop_front()
                .expect("positions up to received_num are accounted");
            debug_assert_eq!(entry.index(), id.index);
            self.time.charge(cost.per_message_ns);
            let Entry::Real { pos: slot, len, .. } = entry else {
                continue;
            };
            let view = body_view(&self.table, &sg.cols, sg.cfg.senders[id.sender_rank], slot, len);
            reals += 1;
            bytes += len as u64;
            let body = match sg.mode {
                DeliveryMode::CopyOut => {
                    self.time.charge(cost.memcpy_ns(len));
                    copied += len as u64;
                    Payload::Copied(view.to_vec())
                }
                DeliveryMode::InPlace | DeliveryMode::Batched => Payload::InPlace(view),
            };
            let d = Delivery {
                sg_id: sg.cfg.sg_id,
                id,
                seq,
                body,
            };
            if sg.mode == DeliveryMode::Batched {
                batch.push(d);
            } else {
                upcalls += 1;
                self.handler.deliver(d);
            }
        }
        if !batch.is_empty() {
            upcalls += 1;
            self.handler.deliver_batch(batch);
        }
        let advanced = (end - rx.delivered) as u64;
        rx.delivered = end;
        self.table
            .update_local_cell(sg.cols.delivered(), end)
            .expect("delivered_num only grows");
        let plan = Plan {
            slot_runs: Vec::new(),
            scalar_pushes: 1,
        };
        (plan, (advanced, reals, bytes, upcalls, copied))
    }

    /// One sweep over every subgroup's three predicates. Returns whether
    /// anything happened.
    pub fn poll_once(&self) -> bool {
        let mut busy = false;
        for sg in &self.subgroups {
            let id = sg.cfg.sg_id;
            busy |= self.send_step(id) > 0;
            busy |= self.receive_step(id) > 0;
            busy |= self.delivery_step(id) > 0;
        }
        let mut m = self.metrics.lock().unwrap();
        m.sweeps += 1;
        if busy {
            m.busy_sweeps += 1;
        }
        busy
    }

    /// Polls until `stop` is set, parking on `parker` after the configured
    /// number of consecutive idle sweeps.
    pub fn run_polling_loop(&self, stop: &AtomicBool, parker: &Parker) {
        let mut idle = 0u64;
        while !stop.load(Ordering::Acquire) {
            if self.poll_once() {
                idle = 0;
                continue;
            }
            idle += 1;
            if idle >= self.options.idle_sweeps_before_park {
                self.record_park();
                parker.park_timeout(Duration::from_millis(50));
                idle = 0;
            } else {
                std::thread::yield_now();
            }
        }
    }
}

/// After a null commit leaving the next own index at `next_own`: the last
/// committed null precedes the newest accounted message of any other
/// sender, and the next own index follows it.
fn one_round_holds(own_rank: usize, next_own: u64, accounted: &[u64], s: usize) -> bool {
    let newest = accounted
        .iter()
        .enumerate()
        .filter(|&(j, &c)| j != own_rank && c > 0)
        .map(|(j, &c)| seq_num(j, c - 1, s))
        .max();
    match newest {
        None => false,
        Some(newest) => {
            next_own > 0 && seq_num(own_rank, next_own - 1, s) < newest && newest < seq_num(own_rank, next_own, s)
        }
    }
}

//! Small-message multicast: per-sender ring buffers of fixed-size slots
//! inside the SST rows.
//!
//! A sender's `r`-th real message (counting from 0) lives in slot `r mod w`
//! and is marked present by that slot's use counter reaching `r div w`. A
//! slot may be reused once every member has delivered its previous
//! occupant. The slot trailer also records the message's index in the
//! sender's stream, which counts nulls as well as real messages.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Fnv1a;
use crate::multicast::seq_num;
use crate::sst::{LayoutError, SstTable, SubgroupColumns, BODY_LEN_BYTES};
use crate::transport::{MemoryRegion, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmcError {
    #[error("commit does not match the outstanding slot reservation")]
    CommitWithoutAcquire,
    #[error("payload of {len} bytes exceeds the slot capacity of {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("write of {len} bytes at {at} exceeds the message length {body_len}")]
    OutOfBounds { at: usize, len: usize, body_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupConfig {
    pub sg_id: usize,
    pub members: Vec<NodeId>,
    /// Members allowed to send, in delivery-rank order.
    pub senders: Vec<NodeId>,
    pub window: usize,
    /// Slot body bytes, including the 8-byte length prefix.
    pub max_msg_size: usize,
}

impl SubgroupConfig {
    pub fn validate(&self, nodes: usize) -> Result<(), LayoutError> {
        let sg = self.sg_id;
        if self.members.is_empty() {
            return Err(LayoutError::EmptyMembership(sg));
        }
        if self.window == 0 {
            return Err(LayoutError::ZeroWindow(sg));
        }
        if self.max_msg_size == 0 {
            return Err(LayoutError::ZeroMessageSize(sg));
        }
        for (i, &node) in self.members.iter().enumerate() {
            if node.0 >= nodes {
                return Err(LayoutError::MemberOutOfRange { sg, node, nodes });
            }
            if self.members[..i].contains(&node) {
                return Err(LayoutError::Duplicate { sg, node });
            }
        }
        for (i, &node) in self.senders.iter().enumerate() {
            if !self.members.contains(&node) {
                return Err(LayoutError::SenderNotMember { sg, node });
            }
            if self.senders[..i].contains(&node) {
                return Err(LayoutError::Duplicate { sg, node });
            }
        }
        Ok(())
    }

    pub fn sender_rank(&self, node: NodeId) -> Option<usize> {
        self.senders.iter().position(|&s| s == node)
    }
}

/// Name of a message: sender rank and index in that sender's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageId {
    pub sender_rank: usize,
    pub index: u64,
}

/// Reservation of the next ring slot. Only [`SenderRing::commit_send`] or
/// [`SenderRing::release`] consume it.
#[derive(Debug)]
pub struct SlotHandle {
    pos: usize,
    ordinal: u64,
}

impl SlotHandle {
    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn ordinal(&self) -> u64 {
        self.ordinal
    }
}

/// Sender-side state of one node in one subgroup.
#[derive(Debug)]
pub struct SenderRing {
    rank: usize,
    senders: usize,
    window: usize,
    next_ordinal: u64,
    next_index: u64,
    /// Sequence number of the message last placed in each slot.
    occupant_seq: Vec<i64>,
    reserved: Option<u64>,
    pending: VecDeque<usize>,
}

impl SenderRing {
    pub fn new(rank: usize, senders: usize, window: usize) -> Self {
        Self {
            rank,
            senders,
            window,
            next_ordinal: 0,
            next_index: 0,
            occupant_seq: vec![-1; window],
            reserved: None,
            pending: VecDeque::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Next index this sender will assign, counting queued real messages and
    /// committed nulls.
    pub fn own_committed_index(&self) -> u64 {
        self.next_index
    }

    /// Real messages committed so far.
    pub fn reals_committed(&self) -> u64 {
        self.next_ordinal
    }

    /// Grants the next ring slot if every member has delivered its previous
    /// occupant. `None` is back-pressure; the caller retries.
    pub fn acquire_slot(&mut self, table: &SstTable, cols: &SubgroupColumns, members: &[NodeId]) -> Option<SlotHandle> {
        if self.reserved.is_some() {
            return None;
        }
        let ordinal = self.next_ordinal;
        let pos = (ordinal % self.window as u64) as usize;
        let previous = self.occupant_seq[pos];
        if previous >= 0 {
            let min_delivered = members
                .iter()
                .map(|&m| table.read(m, cols.delivered()))
                .min()
                .unwrap_or(-1);
            if previous > min_delivered {
                return None;
            }
        }
        self.reserved = Some(ordinal);
        Some(SlotHandle { pos, ordinal })
    }

    /// Drops a reservation without sending.
    pub fn release(&mut self, handle: SlotHandle) {
        if self.reserved == Some(handle.ordinal) {
            self.reserved = None;
        }
    }

    /// Finalizes the reserved slot: records the length and index, bumps the
    /// use counter and queues the slot for the send predicate. No remote
    /// write happens here.
    pub fn commit_send(
        &mut self,
        table: &SstTable,
        cols: &SubgroupColumns,
        handle: SlotHandle,
        body_len: usize,
    ) -> Result<MessageId, SmcError> {
        if self.reserved != Some(handle.ordinal) || handle.ordinal != self.next_ordinal {
            return Err(SmcError::CommitWithoutAcquire);
        }
        if body_len > cols.max_payload() {
            return Err(SmcError::PayloadTooLarge {
                len: body_len,
                max: cols.max_payload(),
            });
        }
        let index = self.next_index;
        let pos = handle.pos;
        table.write_local(cols.slot_body(pos), &(body_len as u64).to_le_bytes());
        table.store_local(cols.slot_index(pos), index as i64);
        table
            .update_local_cell(cols.slot_counter(pos), (handle.ordinal / self.window as u64) as i64)
            .expect("slot use counter moves forward by one per reuse");
        self.occupant_seq[pos] = seq_num(self.rank, index, self.senders).0;
        self.next_index += 1;
        self.next_ordinal += 1;
        self.reserved = None;
        self.pending.push_back(pos);
        Ok(MessageId {
            sender_rank: self.rank,
            index,
        })
    }

    /// Assigns the next `count` indices to nulls and returns them.
    pub fn commit_nulls(&mut self, count: u64) -> Range<u64> {
        let start = self.next_index;
        self.next_index += count;
        start..self.next_index
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Removes up to `limit` queued slots in commit order.
    pub fn take_pending(&mut self, limit: usize) -> Vec<usize> {
        let n = limit.min(self.pending.len());
        self.pending.drain(..n).collect()
    }
}

/// Splits queued slot positions into contiguous runs `(first, count)`.
/// A queue that wraps the ring yields two runs.
pub fn contiguous_runs(positions: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &p in positions {
        match runs.last_mut() {
            Some((first, count)) if *first + *count == p => *count += 1,
            _ => runs.push((p, 1)),
        }
    }
    runs
}

/// In-place writer over a reserved slot's payload area.
pub struct SlotWriter<'a> {
    region: &'a MemoryRegion,
    payload_at: usize,
    body_len: usize,
}

impl<'a> SlotWriter<'a> {
    pub fn new(table: &'a SstTable, cols: &SubgroupColumns, handle: &SlotHandle, body_len: usize) -> Self {
        Self {
            region: table.region(),
            payload_at: table.offset(table.me(), cols.slot_payload(handle.pos)),
            body_len,
        }
    }

    pub fn len(&self) -> usize {
        self.body_len
    }

    pub fn is_empty(&self) -> bool {
        self.body_len == 0
    }

    pub fn write(&mut self, at: usize, bytes: &[u8]) -> Result<(), SmcError> {
        if at.checked_add(bytes.len()).is_none_or(|end| end > self.body_len) {
            return Err(SmcError::OutOfBounds {
                at,
                len: bytes.len(),
                body_len: self.body_len,
            });
        }
        if !bytes.is_empty() {
            self.region.write_bytes(self.payload_at + at, bytes);
        }
        Ok(())
    }

    /// Payload written so far, read back from the slot.
    pub fn view(&self) -> BodyView<'a> {
        BodyView {
            region: self.region,
            offset: self.payload_at,
            len: self.body_len,
        }
    }
}

/// Read-only view of a message payload inside a region. No copy is made
/// until the caller asks for one.
#[derive(Clone, Copy)]
pub struct BodyView<'a> {
    region: &'a MemoryRegion,
    offset: usize,
    len: usize,
}

impl std::fmt::Debug for BodyView<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BodyView")
            .field("offset", &self.offset)
            .field("len", &self.len)
            .finish()
    }
}

impl<'a> BodyView<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Offset of the payload inside the owning region.
    pub fn region_offset(&self) -> usize {
        self.offset
    }

    pub fn copy_to(&self, out: &mut [u8]) {
        self.region.read_stable(self.offset, &mut out[..self.len]);
    }

    pub fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.len];
        self.copy_to(&mut v);
        v
    }

    pub fn read_u64_le(&self, at: usize) -> Option<u64> {
        if at + 8 > self.len {
            return None;
        }
        let mut b = [0u8; 8];
        self.region.read_stable(self.offset + at, &mut b);
        Some(u64::from_le_bytes(b))
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        let mut buf = [0u8; 512];
        let mut at = 0;
        while at < self.len {
            let n = (self.len - at).min(buf.len());
            self.region.read_stable(self.offset + at, &mut buf[..n]);
            h.update(&buf[..n]);
            at += n;
        }
        h.finish()
    }
}

/// A message found by [`scan_new_messages`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScannedMessage {
    pub ordinal: u64,
    pub pos: usize,
    pub msg_index: u64,
    pub body_len: usize,
}

/// Walks `sender`'s slots from `expected_next_ordinal`, returning every
/// consecutively present message up to `limit`, stopping at the first slot
/// whose counter has not reached the expected generation.
pub fn scan_new_messages(
    table: &SstTable,
    cols: &SubgroupColumns,
    sender: NodeId,
    expected_next_ordinal: u64,
    limit: usize,
) -> Vec<ScannedMessage> {
    let w = cols.window as u64;
    let mut out = Vec::new();
    let mut ordinal = expected_next_ordinal;
    while out.len() < limit {
        let pos = (ordinal % w) as usize;
        let generation = (ordinal / w) as i64;
        let counter = table.read(sender, cols.slot_counter(pos));
        if counter != generation {
            debug_assert!(
                counter < generation,
                "slot {pos} of {sender} overwritten before delivery"
            );
            break;
        }
        let msg_index = table.read(sender, cols.slot_index(pos));
        let len_at = table.offset(sender, cols.slot_body(pos));
        let body_len = table.region().load_u64(len_at) as usize;
        out.push(ScannedMessage {
            ordinal,
            pos,
            msg_index: msg_index as u64,
            body_len,
        });
        ordinal += 1;
    }
    out
}

/// View of a scanned message's payload in the local copy of `sender`'s row.
pub fn body_view<'a>(
    table: &'a SstTable,
    cols: &SubgroupColumns,
    sender: NodeId,
    pos: usize,
    len: usize,
) -> BodyView<'a> {
    debug_assert!(len <= cols.body_capacity - BODY_LEN_BYTES);
    BodyView {
        region: table.region(),
        offset: table.offset(sender, cols.slot_payload(pos)),
        len,
    }
}

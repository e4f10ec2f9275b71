//! Shared State Table: one row per node, each row owned by its node.
//!
//! Every node holds a full copy of the table in its registered region. A
//! node mutates only its own row and pushes byte ranges of it to peers; the
//! other rows change only when a peer's write lands.
//!
//! Row layout, repeated for every subgroup in configuration order, each part
//! starting on a 64-byte line:
//!
//! ```text
//! | received_num | delivered_num | nulls | pad to 64 |   scalar block
//! | slot 0 | slot 1 | ... | slot w-1 | pad to 64 |      slot region
//!
//! slot = | body_len (8) | payload ... (pad to 8) | msg_index (8) | use_counter (8) |
//! ```
//!
//! The slot counters sit at the end of each slot. Writes are applied in
//! ascending address order, so a reader that observes a counter also
//! observes the body in front of it.

use std::ops::Range;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::smc::SubgroupConfig;
use crate::transport::{Fabric, MemoryRegion, NodeId, TransportError, LINE_BYTES};

/// Bytes of protocol header carried by every slot (message index and use
/// counter).
pub const SLOT_HEADER_BYTES: usize = 16;
/// Bytes at the start of every slot body that hold the payload length.
pub const BODY_LEN_BYTES: usize = 8;
const SCALAR_BLOCK_BYTES: usize = 24;

fn round_up(v: usize, to: usize) -> usize {
    v.div_ceil(to) * to
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("subgroup {0} has no members")]
    EmptyMembership(usize),
    #[error("subgroup {0} has a zero window")]
    ZeroWindow(usize),
    #[error("subgroup {0} has a zero maximum message size")]
    ZeroMessageSize(usize),
    #[error("subgroup {sg}: {node} is not below the node count {nodes}")]
    MemberOutOfRange { sg: usize, node: NodeId, nodes: usize },
    #[error("subgroup {sg}: sender {node} is not a member")]
    SenderNotMember { sg: usize, node: NodeId },
    #[error("subgroup {sg}: {node} listed twice")]
    Duplicate { sg: usize, node: NodeId },
    #[error("subgroup id {0} used twice")]
    DuplicateSubgroup(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SstError {
    #[error("cell at {cell} would move from {current} to {new}")]
    NotMonotonic { cell: usize, current: i64, new: i64 },
    #[error("range {start}..{end} is outside the row of {row_size} bytes")]
    OutsideRow { start: usize, end: usize, row_size: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Offset of a 64-bit cell inside a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellOffset(pub usize);

/// Row placement of one subgroup's columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubgroupColumns {
    pub sg_id: usize,
    pub window: usize,
    pub max_msg_size: usize,
    pub scalars: usize,
    pub slots: usize,
    pub slot_stride: usize,
    pub body_capacity: usize,
}

impl SubgroupColumns {
    pub fn received(&self) -> CellOffset {
        CellOffset(self.scalars)
    }

    pub fn delivered(&self) -> CellOffset {
        CellOffset(self.scalars + 8)
    }

    /// Total nulls the row's owner has committed in this subgroup.
    pub fn nulls(&self) -> CellOffset {
        CellOffset(self.scalars + 16)
    }

    pub fn scalar_block(&self) -> Range<usize> {
        self.scalars..self.scalars + SCALAR_BLOCK_BYTES
    }

    pub fn slot(&self, pos: usize) -> usize {
        debug_assert!(pos < self.window);
        self.slots + pos * self.slot_stride
    }

    pub fn slot_body(&self, pos: usize) -> usize {
        self.slot(pos)
    }

    pub fn slot_payload(&self, pos: usize) -> usize {
        self.slot(pos) + BODY_LEN_BYTES
    }

    pub fn slot_index(&self, pos: usize) -> CellOffset {
        CellOffset(self.slot(pos) + self.body_capacity)
    }

    pub fn slot_counter(&self, pos: usize) -> CellOffset {
        CellOffset(self.slot(pos) + self.body_capacity + 8)
    }

    /// Row bytes covering `count` consecutive slots starting at `first`.
    pub fn slot_range(&self, first: usize, count: usize) -> Range<usize> {
        debug_assert!(count >= 1 && first + count <= self.window);
        self.slot(first)..self.slot(first) + count * self.slot_stride
    }

    /// Largest payload an application message can carry.
    pub fn max_payload(&self) -> usize {
        self.max_msg_size.saturating_sub(BODY_LEN_BYTES)
    }

    fn section_end(&self) -> usize {
        self.slots + round_up(self.window * self.slot_stride, LINE_BYTES)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SstLayout {
    pub nodes: usize,
    /// Header size used in the sizing formula.
    pub header_size: usize,
    pub row_size: usize,
    pub subgroups: Vec<SubgroupColumns>,
}

impl SstLayout {
    pub fn row_offset(&self, node: NodeId) -> usize {
        node.0 * self.row_size
    }

    pub fn region_size(&self) -> usize {
        self.nodes * self.row_size
    }

    pub fn columns(&self, sg_id: usize) -> Option<&SubgroupColumns> {
        self.subgroups.iter().find(|c| c.sg_id == sg_id)
    }

    /// Slot space per node: `n · Σ w · (m + header_size)`.
    pub fn slot_bytes_per_node(&self) -> u64 {
        let per_row: u64 = self
            .subgroups
            .iter()
            .map(|c| (c.window * (c.max_msg_size + self.header_size)) as u64)
            .sum();
        self.nodes as u64 * per_row
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            #[serde(flatten)]
            layout: &'a SstLayout,
            region_size: usize,
            slot_bytes_per_node: u64,
        }
        serde_json::to_string_pretty(&Dump {
            layout: self,
            region_size: self.region_size(),
            slot_bytes_per_node: self.slot_bytes_per_node(),
        })
        .expect("layout serializes")
    }
}

/// Lays out rows for `nodes` nodes and the given subgroups.
pub fn build_layout(nodes: usize, subgroups: &[SubgroupConfig], header_size: usize) -> Result<SstLayout, LayoutError> {
    let mut columns = Vec::with_capacity(subgroups.len());
    let mut cursor = 0;
    for (i, sg) in subgroups.iter().enumerate() {
        sg.validate(nodes)?;
        if subgroups[..i].iter().any(|o| o.sg_id == sg.sg_id) {
            return Err(LayoutError::DuplicateSubgroup(sg.sg_id));
        }
        let body_capacity = round_up(sg.max_msg_size.max(BODY_LEN_BYTES), 8);
        let cols = SubgroupColumns {
            sg_id: sg.sg_id,
            window: sg.window,
            max_msg_size: sg.max_msg_size,
            scalars: cursor,
            slots: cursor + LINE_BYTES,
            slot_stride: body_capacity + SLOT_HEADER_BYTES,
            body_capacity,
        };
        cursor = cols.section_end();
        columns.push(cols);
    }
    Ok(SstLayout {
        nodes,
        header_size,
        row_size: cursor.max(LINE_BYTES),
        subgroups: columns,
    })
}

/// A node's copy of the table.
pub struct SstTable {
    layout: Arc<SstLayout>,
    me: NodeId,
    region: Arc<MemoryRegion>,
    fabric: Arc<Fabric>,
}

impl std::fmt::Debug for SstTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SstTable").field("me", &self.me).finish()
    }
}

impl SstTable {
    /// Registers `me`'s region and puts every row in its initial state:
    /// frontiers and slot counters at -1, null totals at 0.
    pub fn new(layout: Arc<SstLayout>, me: NodeId, fabric: Arc<Fabric>) -> Result<Self, SstError> {
        let region = fabric.register_region(me, layout.region_size())?;
        for row in 0..layout.nodes {
            let base = row * layout.row_size;
            for c in &layout.subgroups {
                region.store_i64(base + c.received().0, -1);
                region.store_i64(base + c.delivered().0, -1);
                region.store_i64(base + c.nulls().0, 0);
                for pos in 0..c.window {
                    region.store_i64(base + c.slot_index(pos).0, -1);
                    region.store_i64(base + c.slot_counter(pos).0, -1);
                }
            }
        }
        Ok(Self {
            layout,
            me,
            region,
            fabric,
        })
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn layout(&self) -> &SstLayout {
        &self.layout
    }

    pub fn region(&self) -> &MemoryRegion {
        &self.region
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    /// Region offset of a row-relative offset.
    pub fn offset(&self, row: NodeId, in_row: usize) -> usize {
        self.layout.row_offset(row) + in_row
    }

    /// Reads `row`'s cell from the local copy. Wait-free.
    pub fn read(&self, row: NodeId, cell: CellOffset) -> i64 {
        self.region.load_i64(self.offset(row, cell.0))
    }

    pub fn local(&self, cell: CellOffset) -> i64 {
        self.read(self.me, cell)
    }

    /// Raises one of this node's monotonic cells. Lowering it is an error;
    /// storing the same value is a no-op.
    pub fn update_local_cell(&self, cell: CellOffset, value: i64) -> Result<(), SstError> {
        let current = self.local(cell);
        if value < current {
            return Err(SstError::NotMonotonic {
                cell: cell.0,
                current,
                new: value,
            });
        }
        if value != current {
            self.region.store_i64(self.offset(self.me, cell.0), value);
        }
        Ok(())
    }

    /// Stores a cell in the own row without the monotonic check.
    pub fn store_local(&self, cell: CellOffset, value: i64) {
        self.region.store_i64(self.offset(self.me, cell.0), value);
    }

    pub fn write_local(&self, in_row: usize, data: &[u8]) {
        self.region.write_bytes(self.offset(self.me, in_row), data);
    }

    fn check_range(&self, range: &Range<usize>) -> Result<(), SstError> {
        if range.start >= range.end || range.end > self.layout.row_size {
            return Err(SstError::OutsideRow {
                start: range.start,
                end: range.end,
                row_size: self.layout.row_size,
            });
        }
        Ok(())
    }

    /// Copies the current bytes of `range` of the own row to every target,
    /// one write per target. Returns the number of writes posted.
    pub fn push_cells(&self, range: Range<usize>, targets: &[NodeId]) -> Result<usize, SstError> {
        self.check_range(&range)?;
        let at = self.offset(self.me, range.start);
        let mut posted = 0;
        for &t in targets.iter().filter(|&&t| t != self.me) {
            let mut payload = vec![0u8; range.len()];
            self.region.read_bytes(at, &mut payload);
            self.fabric.post(self.me, t, at, payload)?;
            posted += 1;
        }
        Ok(posted)
    }

    /// Pushes `data`, then the guard cell, on the same channels. A reader
    /// that sees the new guard also sees the new data.
    pub fn push_data_then_guard(
        &self,
        data: Range<usize>,
        guard: CellOffset,
        targets: &[NodeId],
    ) -> Result<usize, SstError> {
        self.check_range(&data)?;
        self.check_range(&(guard.0..guard.0 + 8))?;
        let mut posted = self.push_cells(data, targets)?;
        posted += self.push_cells(guard.0..guard.0 + 8, targets)?;
        Ok(posted)
    }
}

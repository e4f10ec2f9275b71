//! Naive reference computations, written without the protocol's helpers.
//!
//! Everything here walks the delivery order round by round and rank by
//! rank instead of using closed-form sequence arithmetic, so agreement with
//! the engine is evidence rather than tautology.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::records::{CommitKind, CommitRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("rank {rank} skips from index {expected} to {found}")]
    Gap { rank: usize, expected: u64, found: u64 },
    #[error("rank {rank} logs index {index} twice")]
    Duplicate { rank: usize, index: u64 },
    #[error("rank {rank} is outside {senders} senders")]
    RankOutOfRange { rank: usize, senders: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoggedMessage {
    pub index: u64,
    pub kind: CommitKind,
    pub digest: u64,
}

/// Commit history of one subgroup, one list per sender rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SendLog {
    pub senders: Vec<Vec<LoggedMessage>>,
}

/// Application-visible message in the reference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expected {
    pub rank: usize,
    pub index: u64,
    pub digest: u64,
}

impl SendLog {
    /// Collects the records of subgroup `sg` and sorts each sender's list
    /// by index. Gaps are reported by [`reference_delivery_order`].
    pub fn from_records(records: &[CommitRecord], sg: usize, senders: usize) -> Result<Self, OracleError> {
        let mut per: Vec<BTreeMap<u64, LoggedMessage>> = vec![BTreeMap::new(); senders];
        for r in records.iter().filter(|r| r.sg == sg) {
            let list = per
                .get_mut(r.rank)
                .ok_or(OracleError::RankOutOfRange { rank: r.rank, senders })?;
            let entry = LoggedMessage {
                index: r.index,
                kind: r.kind,
                digest: r.digest,
            };
            if list.insert(r.index, entry).is_some() {
                return Err(OracleError::Duplicate {
                    rank: r.rank,
                    index: r.index,
                });
            }
        }
        Ok(SendLog {
            senders: per.into_iter().map(|m| m.into_values().collect()).collect(),
        })
    }

    fn check(&self) -> Result<(), OracleError> {
        for (rank, list) in self.senders.iter().enumerate() {
            for (expected, m) in list.iter().enumerate() {
                if m.index != expected as u64 {
                    return Err(OracleError::Gap {
                        rank,
                        expected: expected as u64,
                        found: m.index,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Round-robin order of the longest gap-free prefix, nulls removed.
///
/// Round 0 of rank 0 comes first, then round 0 of rank 1, and so on. The
/// walk stops at the first (round, rank) that no log covers: nothing after
/// it can have been delivered anywhere.
pub fn reference_delivery_order(logs: &SendLog) -> Result<Vec<Expected>, OracleError> {
    logs.check()?;
    let s = logs.senders.len();
    let mut out = Vec::new();
    if s == 0 {
        return Ok(out);
    }
    let mut round = 0usize;
    'rounds: loop {
        for rank in 0..s {
            let Some(m) = logs.senders[rank].get(round) else {
                break 'rounds;
            };
            if m.kind == CommitKind::Real {
                out.push(Expected {
                    rank,
                    index: m.index,
                    digest: m.digest,
                });
            }
        }
        round += 1;
    }
    Ok(out)
}

/// Last position covered by every earlier position, by walking positions
/// one at a time. -1 when position 0 is missing.
pub fn reference_received_num(accounted: &[u64]) -> i64 {
    let mut last = -1i64;
    let mut round = 0u64;
    loop {
        for &count in accounted {
            if count <= round {
                return last;
            }
            last += 1;
        }
        if accounted.is_empty() {
            return last;
        }
        round += 1;
    }
}

/// Position of message `index` of `rank` among `senders`, by counting.
pub fn reference_position(rank: usize, index: u64, senders: usize) -> i64 {
    let mut pos = -1i64;
    for round in 0..=index {
        for r in 0..senders {
            pos += 1;
            if round == index && r == rank {
                return pos;
            }
        }
    }
    unreachable!("rank {rank} outside {senders} senders")
}

/// Whether a sender may place its real message number `ordinal` (0-based,
/// nulls excluded) into its ring. `index_of` maps earlier real ordinals to
/// their stream indices; `min_delivered` is the lowest delivered_num among
/// members.
pub fn reference_slot_free(
    rank: usize,
    senders: usize,
    window: usize,
    ordinal: usize,
    index_of: &[u64],
    min_delivered: i64,
) -> bool {
    if ordinal < window {
        return true;
    }
    let previous = index_of[ordinal - window];
    reference_position(rank, previous, senders) <= min_delivered
}

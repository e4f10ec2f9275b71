//! Round-robin sequence numbers.
//!
//! Message `k` of the sender with rank `i` among `S` senders sits at
//! position `k*S + i` of the delivery order. Rounds are delivered one at a
//! time, and within a round lower ranks go first.

use serde::{Deserialize, Serialize};

use crate::smc::MessageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqNum(pub i64);

impl SeqNum {
    pub const NONE: SeqNum = SeqNum(-1);
}

pub fn seq_num(sender_rank: usize, index: u64, senders: usize) -> SeqNum {
    debug_assert!(sender_rank < senders);
    SeqNum(index as i64 * senders as i64 + sender_rank as i64)
}

/// Inverse of [`seq_num`] for non-negative positions.
pub fn decode(seq: SeqNum, senders: usize) -> MessageId {
    debug_assert!(seq.0 >= 0);
    let s = senders as i64;
    MessageId {
        sender_rank: (seq.0 % s) as usize,
        index: (seq.0 / s) as u64,
    }
}

/// Highest position such that every position at or below it is accounted,
/// given how many messages (real or null) each rank has accounted.
pub fn compute_received_num(accounted: &[u64], senders: usize) -> SeqNum {
    debug_assert_eq!(accounted.len(), senders);
    let first_missing = accounted
        .iter()
        .enumerate()
        .map(|(i, &c)| seq_num(i, c, senders).0)
        .min()
        .unwrap_or(0);
    SeqNum(first_missing - 1)
}

/// Number of nulls sender `own_rank`, whose next index is `own_next_index`,
/// must commit so that none of its future messages precede message
/// `(sender_rank, index)` of `received`.
pub fn null_count_decision(own_rank: usize, own_next_index: u64, received: MessageId) -> u64 {
    let reach = received.index + u64::from(own_rank < received.sender_rank);
    reach.saturating_sub(own_next_index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(sender_rank: usize, index: u64) -> MessageId {
        MessageId { sender_rank, index }
    }

    #[test]
    fn formula_points() {
        assert_eq!(seq_num(0, 0, 3), SeqNum(0));
        assert_eq!(seq_num(1, 2, 3), SeqNum(7));
        assert_eq!(decode(SeqNum(7), 3), id(1, 2));
    }

    #[test]
    fn order_matches_round_then_rank() {
        for s in 1..=4usize {
            for (i1, k1, i2, k2) in (0..s).flat_map(|i1| {
                (0..=5u64).flat_map(move |k1| (0..s).flat_map(move |i2| (0..=5u64).map(move |k2| (i1, k1, i2, k2))))
            }) {
                let before = k1 < k2 || (k1 == k2 && i1 < i2);
                assert_eq!(
                    seq_num(i1, k1, s) < seq_num(i2, k2, s),
                    before,
                    "S={s} ({i1},{k1}) ({i2},{k2})"
                );
            }
        }
    }

    #[test]
    fn received_num_points() {
        assert_eq!(compute_received_num(&[3, 3, 3], 3), SeqNum(8));
        assert_eq!(compute_received_num(&[0, 0, 0], 3), SeqNum(-1));
        assert_eq!(compute_received_num(&[4, 3, 3], 3), SeqNum(9));
        assert_eq!(compute_received_num(&[1, 0], 2), SeqNum(0));
        assert_eq!(compute_received_num(&[0, 1], 2), SeqNum(-1));
    }

    #[test]
    fn null_count_points() {
        assert_eq!(null_count_decision(0, 5, id(2, 6)), 2);
        assert_eq!(null_count_decision(2, 6, id(1, 6)), 0);
        assert_eq!(null_count_decision(1, 7, id(0, 6)), 0);
        // lagging by one round behind a higher rank
        assert_eq!(null_count_decision(0, 5, id(1, 5)), 1);
        assert_eq!(null_count_decision(2, 5, id(1, 6)), 1);
    }
}

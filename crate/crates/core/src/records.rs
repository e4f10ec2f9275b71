//! Line-delimited commit and delivery records.
//!
//! Commit lines read `node sg rank index kind digest`; delivery lines read
//! `node sg rank index seq digest`. Digests are 16 hex digits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitKind {
    Real,
    Null,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub node: usize,
    pub sg: usize,
    pub rank: usize,
    pub index: u64,
    pub kind: CommitKind,
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub node: usize,
    pub sg: usize,
    pub rank: usize,
    pub index: u64,
    pub seq: i64,
    pub digest: u64,
}

impl fmt::Display for CommitRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            CommitKind::Real => "real",
            CommitKind::Null => "null",
        };
        write!(
            f,
            "{} {} {} {} {} {:016x}",
            self.node, self.sg, self.rank, self.index, kind, self.digest
        )
    }
}

impl fmt::Display for DeliveryRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {:016x}",
            self.node, self.sg, self.rank, self.index, self.seq, self.digest
        )
    }
}

fn fields<const N: usize>(line: &str) -> Result<[&str; N], String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    parts
        .try_into()
        .map_err(|p: Vec<&str>| format!("expected {N} fields, found {}", p.len()))
}

fn num<T: FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

fn hex(s: &str) -> Result<u64, String> {
    u64::from_str_radix(s, 16).map_err(|_| format!("bad digest {s:?}"))
}

impl FromStr for CommitRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let [node, sg, rank, index, kind, digest] = fields::<6>(line)?;
        Ok(CommitRecord {
            node: num(node, "node")?,
            sg: num(sg, "subgroup")?,
            rank: num(rank, "rank")?,
            index: num(index, "index")?,
            kind: match kind {
                "real" => CommitKind::Real,
                "null" => CommitKind::Null,
                other => return Err(format!("bad kind {other:?}")),
            },
            digest: hex(digest)?,
        })
    }
}

impl FromStr for DeliveryRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let [node, sg, rank, index, seq, digest] = fields::<6>(line)?;
        Ok(DeliveryRecord {
            node: num(node, "node")?,
            sg: num(sg, "subgroup")?,
            rank: num(rank, "rank")?,
            index: num(index, "index")?,
            seq: num(seq, "seq")?,
            digest: hex(digest)?,
        })
    }
}

/// Parses every non-blank, non-`#` line.
pub fn parse_lines<T: FromStr<Err = String>>(text: &str) -> Result<Vec<T>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| l.parse().map_err(|reason| RecordError { line: i + 1, reason }))
        .collect()
}

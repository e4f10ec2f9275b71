//! Scenario description, read from `key = value` text.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use ringcast::multicast::{CostModel, DeliveryMode, EngineOptions};
use ringcast::smc::SubgroupConfig;
use ringcast::transport::{ChannelParams, NodeId, ParamError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {0} is not `key = value`")]
    Malformed(usize),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenderPattern {
    All,
    Half,
    One,
}

impl FromStr for SenderPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(SenderPattern::All),
            "half" => Ok(SenderPattern::Half),
            "one" => Ok(SenderPattern::One),
            _ => Err("expected all, half or one".into()),
        }
    }
}

/// Busy-wait a sender performs after each send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delay {
    #[default]
    None,
    Busy(u64),
    /// Listed as a sender but never sends.
    Infinite,
}

impl FromStr for Delay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" | "0" => Ok(Delay::None),
            "infinite" | "silent" => Ok(Delay::Infinite),
            _ => parse_duration(s).map(|d| Delay::Busy(d.as_nanos() as u64)),
        }
    }
}

impl fmt::Display for Delay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delay::None => f.write_str("none"),
            Delay::Infinite => f.write_str("infinite"),
            Delay::Busy(ns) => write!(f, "{}", humantime::format_duration(Duration::from_nanos(*ns))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Runtime {
    /// Discrete-event simulation on virtual time.
    Sim,
    /// One OS thread per polling loop and sender, real time.
    Threads,
}

impl FromStr for Runtime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Runtime::Sim),
            "threads" => Ok(Runtime::Threads),
            _ => Err("expected sim or threads".into()),
        }
    }
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    humantime::parse_duration(s).map_err(|e| e.to_string())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub nodes: usize,
    /// Subgroups, each spanning every node.
    pub subgroups: usize,
    /// The first this many subgroups carry traffic.
    pub active_subgroups: usize,
    pub senders: SenderPattern,
    /// Messages each non-silent sender sends per active subgroup.
    pub messages: u64,
    /// Application payload bytes per message.
    pub message_size: usize,
    pub window: usize,
    pub sender_delay: Delay,
    /// Per-node overrides of `sender_delay`.
    pub node_delays: Vec<(usize, Delay)>,
    pub upcall_delay_ns: u64,
    pub batching: bool,
    pub nulls: bool,
    pub release_lock: bool,
    pub delivery: DeliveryMode,
    pub copy_in: bool,
    pub transport: ChannelParams,
    pub cost: CostModel,
    pub header_size: usize,
    pub idle_sweeps: u64,
    pub seed: u64,
    pub runtime: Runtime,
    pub stall_timeout_ns: u64,
    pub settle_ns: u64,
    pub record_logs: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            subgroups: 1,
            active_subgroups: 1,
            senders: SenderPattern::All,
            messages: 1000,
            message_size: 1024,
            window: 100,
            sender_delay: Delay::None,
            node_delays: Vec::new(),
            upcall_delay_ns: 0,
            batching: true,
            nulls: true,
            release_lock: true,
            delivery: DeliveryMode::InPlace,
            copy_in: false,
            transport: ChannelParams::default(),
            cost: CostModel::default(),
            header_size: 16,
            idle_sweeps: 10_000,
            seed: 0,
            runtime: Runtime::Sim,
            stall_timeout_ns: 30_000_000_000,
            settle_ns: 2_000_000_000,
            record_logs: true,
        }
    }
}

/// Bytes the harness puts in front of the pattern: commit time and ordinal.
pub const STAMP_BYTES: usize = 16;

impl ScenarioConfig {
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Malformed(no + 1))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Malformed(0))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason,
        };
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| "not a number".to_string())
        }
        let ns = |v: &str| parse_duration(v).map(|d| d.as_nanos() as u64);
        match key {
            "nodes" => self.nodes = num(value).map_err(bad)?,
            "subgroups" => self.subgroups = num(value).map_err(bad)?,
            "active_subgroups" => self.active_subgroups = num(value).map_err(bad)?,
            "senders" => self.senders = value.parse().map_err(bad)?,
            "messages" => self.messages = num(value).map_err(bad)?,
            "message_size" => self.message_size = num(value).map_err(bad)?,
            "window" | "w" => self.window = num(value).map_err(bad)?,
            "sender_delay" => self.sender_delay = value.parse().map_err(bad)?,
            "upcall_delay" => self.upcall_delay_ns = ns(value).map_err(bad)?,
            "batching" => self.batching = parse_bool(value).map_err(bad)?,
            "nulls" => self.nulls = parse_bool(value).map_err(bad)?,
            "release_lock" => self.release_lock = parse_bool(value).map_err(bad)?,
            "optimizations" => {
                let on = parse_bool(value).map_err(bad)?;
                self.batching = on;
                self.nulls = on;
                self.release_lock = on;
            }
            "delivery" => self.delivery = value.parse().map_err(bad)?,
            "copy_in" => self.copy_in = parse_bool(value).map_err(bad)?,
            "predicate_ns" => self.cost.predicate_ns = num(value).map_err(bad)?,
            "slot_check_ns" => self.cost.slot_check_ns = num(value).map_err(bad)?,
            "per_message_ns" => self.cost.per_message_ns = num(value).map_err(bad)?,
            "memcpy_bytes_per_ns" => self.cost.memcpy_bytes_per_ns = num(value).map_err(bad)?,
            "header_size" => self.header_size = num(value).map_err(bad)?,
            "idle_sweeps" => self.idle_sweeps = num(value).map_err(bad)?,
            "seed" => {
                self.seed = num(value).map_err(bad)?;
                self.transport.seed = self.seed;
            }
            "runtime" => self.runtime = value.parse().map_err(bad)?,
            "stall_timeout" => self.stall_timeout_ns = ns(value).map_err(bad)?,
            "settle" => self.settle_ns = ns(value).map_err(bad)?,
            "record_logs" => self.record_logs = parse_bool(value).map_err(bad)?,
            _ => {
                if let Some(node) = key.strip_prefix("delay.") {
                    let node: usize = num(node).map_err(bad)?;
                    let delay: Delay = value.parse().map_err(bad)?;
                    self.node_delays.retain(|(n, _)| *n != node);
                    self.node_delays.push((node, delay));
                    return Ok(());
                }
                return self.transport.set(key, value).map_err(|e| match e {
                    ParamError::UnknownKey(k) => ConfigError::UnknownKey(k),
                    other => bad(other.to_string()),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.nodes == 0 {
            return fail("nodes must be at least 1");
        }
        if self.subgroups == 0 || self.active_subgroups > self.subgroups {
            return fail("need 1 <= subgroups and active_subgroups <= subgroups");
        }
        if self.window == 0 {
            return fail("window must be at least 1");
        }
        if let Some((n, _)) = self.node_delays.iter().find(|(n, _)| *n >= self.nodes) {
            return Err(ConfigError::Invalid(format!(
                "delay for node {n} outside {} nodes",
                self.nodes
            )));
        }
        Ok(())
    }

    pub fn sender_nodes(&self) -> Vec<NodeId> {
        let count = match self.senders {
            SenderPattern::All => self.nodes,
            SenderPattern::Half => self.nodes.div_ceil(2),
            SenderPattern::One => 1,
        };
        (0..count).map(NodeId).collect()
    }

    pub fn delay_of(&self, node: usize) -> Delay {
        self.node_delays
            .iter()
            .find(|(n, _)| *n == node)
            .map_or(self.sender_delay, |&(_, d)| d)
    }

    /// Slot body bytes: the payload plus its length prefix.
    pub fn max_msg_size(&self) -> usize {
        self.message_size + ringcast::sst::BODY_LEN_BYTES
    }

    pub fn subgroup_configs(&self) -> Vec<SubgroupConfig> {
        (0..self.subgroups)
            .map(|sg_id| SubgroupConfig {
                sg_id,
                members: (0..self.nodes).map(NodeId).collect(),
                senders: self.sender_nodes(),
                window: self.window,
                max_msg_size: self.max_msg_size(),
            })
            .collect()
    }

    /// Messages `node` sends into subgroup `sg`.
    pub fn quota(&self, node: usize, sg: usize) -> u64 {
        let sends = sg < self.active_subgroups
            && self.sender_nodes().contains(&NodeId(node))
            && self.delay_of(node) != Delay::Infinite;
        if sends {
            self.messages
        } else {
            0
        }
    }

    /// Real messages every member of `sg` must deliver.
    pub fn expected_in(&self, sg: usize) -> u64 {
        (0..self.nodes).map(|n| self.quota(n, sg)).sum()
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            batching: self.batching,
            nulls: self.nulls,
            release_lock_before_push: self.release_lock,
            delivery_mode: self.delivery,
            mode_overrides: Vec::new(),
            record_commits: self.record_logs,
            cost: self.cost,
            idle_sweeps_before_park: self.idle_sweeps,
        }
    }
}

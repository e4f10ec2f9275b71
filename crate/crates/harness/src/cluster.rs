use std::sync::Arc;

use anyhow::{Context, Result};
use ringcast::multicast::{Engine, EngineMetrics};
use ringcast::records::{CommitRecord, DeliveryRecord};
use ringcast::smc::SlotWriter;
use ringcast::sst::{build_layout, SstLayout, SstTable};
use ringcast::time::TimeSource;
use ringcast::transport::{Fabric, FabricStats, NodeId, Wake};
use serde::Serialize;

use crate::config::{ScenarioConfig, STAMP_BYTES};
use crate::recorder::Recorder;

/// Every node of a scenario, wired to one fabric.
pub struct Cluster {
    pub layout: Arc<SstLayout>,
    pub fabric: Arc<Fabric>,
    pub engines: Vec<Arc<Engine>>,
    pub recorders: Vec<Arc<Recorder>>,
}

impl Cluster {
    /// `wake(node)` is the hook both for local commits and for writes
    /// landing at `node`.
    pub fn build(config: &ScenarioConfig, time: TimeSource, wake: impl Fn(usize) -> Arc<dyn Wake>) -> Result<Self> {
        config.validate()?;
        let configs = config.subgroup_configs();
        let layout = Arc::new(build_layout(config.nodes, &configs, config.header_size)?);
        let fabric = Fabric::new(config.nodes, config.transport.clone(), time.clone());
        let mut engines = Vec::new();
        let mut recorders = Vec::new();
        for node in 0..config.nodes {
            let table = SstTable::new(layout.clone(), NodeId(node), fabric.clone())
                .with_context(|| format!("registering node {node}"))?;
            let recorder = Arc::new(Recorder::new(
                node,
                time.clone(),
                config.upcall_delay_ns,
                config.record_logs,
            ));
            let hook = wake(node);
            fabric.set_waker(NodeId(node), hook.clone());
            let engine = Engine::new(table, &configs, config.engine_options(), recorder.clone(), hook)?;
            engines.push(Arc::new(engine));
            recorders.push(recorder);
        }
        Ok(Self {
            layout,
            fabric,
            engines,
            recorders,
        })
    }

    /// Real messages each node must deliver before the run is complete.
    pub fn expected_per_node(config: &ScenarioConfig) -> u64 {
        (0..config.subgroups).map(|sg| config.expected_in(sg)).sum()
    }

    pub fn all_delivered(&self, expected: u64) -> bool {
        self.recorders.iter().all(|r| r.delivered() >= expected)
    }

    pub fn nulls_committed(&self) -> u64 {
        self.engines.iter().map(|e| e.metrics().nulls_committed).sum()
    }

    pub fn state_dump(&self) -> String {
        let mut out = String::new();
        for e in &self.engines {
            for sg in e.subgroup_ids() {
                out.push_str(&format!(
                    "{} sg{} received={} delivered={} accounted={:?} next_own={:?} nulls={} pending={}\n",
                    e.me(),
                    sg,
                    e.received_num(sg).0,
                    e.delivered_num(sg).0,
                    e.accounted(sg),
                    e.own_committed_index(sg),
                    e.nulls_announced(sg),
                    e.pending_sends(sg),
                ));
            }
        }
        out
    }
}

/// Per-sender payload pattern; byte `i` of message `ordinal` is
/// `pattern[(ordinal + i) % len]`.
pub fn pattern_for(node: usize, sg: usize) -> Vec<u8> {
    (0..251u32)
        .map(|i| (i.wrapping_mul(31) ^ (node as u32 * 97 + sg as u32 * 13)) as u8)
        .collect()
}

fn stamp(commit_ns: u64, ordinal: u64) -> [u8; STAMP_BYTES] {
    let mut s = [0u8; STAMP_BYTES];
    s[..8].copy_from_slice(&commit_ns.to_le_bytes());
    s[8..].copy_from_slice(&ordinal.to_le_bytes());
    s
}

/// Writes a message straight into its slot.
pub fn fill_in_place(
    w: &mut SlotWriter<'_>,
    commit_ns: u64,
    ordinal: u64,
    pattern: &[u8],
) -> Result<(), ringcast::smc::SmcError> {
    let len = w.len();
    let head = stamp(commit_ns, ordinal);
    let n = len.min(STAMP_BYTES);
    w.write(0, &head[..n])?;
    let mut at = n;
    let mut chunk = [0u8; 256];
    while at < len {
        let take = (len - at).min(chunk.len());
        for (i, b) in chunk[..take].iter_mut().enumerate() {
            *b = pattern[(ordinal as usize + at + i) % pattern.len()];
        }
        w.write(at, &chunk[..take])?;
        at += take;
    }
    Ok(())
}

/// Same bytes as [`fill_in_place`], in an owned buffer.
pub fn build_buffer(len: usize, commit_ns: u64, ordinal: u64, pattern: &[u8]) -> Vec<u8> {
    let head = stamp(commit_ns, ordinal);
    (0..len)
        .map(|i| {
            if i < STAMP_BYTES {
                head[i]
            } else {
                pattern[(ordinal as usize + i) % pattern.len()]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub completed: bool,
    /// Time of the last delivery (virtual or wall, by runtime).
    pub elapsed_ns: u64,
    pub wall_ms: u64,
    pub settle_nulls: u64,
    pub delivered: Vec<u64>,
    pub delivered_bytes: Vec<u64>,
    pub engines: Vec<EngineMetrics>,
    pub fabric: FabricStats,
    pub lock_wait_ns: u64,
    pub slot_bytes_per_node: u64,
    #[serde(skip)]
    pub latencies: Vec<u64>,
    #[serde(skip)]
    pub commits: Vec<CommitRecord>,
    #[serde(skip)]
    pub deliveries: Vec<Vec<DeliveryRecord>>,
    pub stall_state: Option<String>,
}

impl RunResult {
    pub fn collect(cluster: &Cluster, completed: bool, settle_nulls: u64, wall_ms: u64) -> Self {
        let mut commits: Vec<CommitRecord> = cluster.engines.iter().flat_map(|e| e.take_commits()).collect();
        commits.sort_by_key(|c| (c.sg, c.rank, c.index));
        let mut latencies: Vec<u64> = cluster.recorders.iter().flat_map(|r| r.latencies()).collect();
        latencies.sort_unstable();
        Self {
            completed,
            elapsed_ns: cluster
                .recorders
                .iter()
                .map(|r| r.last_delivery_ns())
                .max()
                .unwrap_or(0),
            wall_ms,
            settle_nulls,
            delivered: cluster.recorders.iter().map(|r| r.delivered()).collect(),
            delivered_bytes: cluster.recorders.iter().map(|r| r.bytes()).collect(),
            engines: cluster.engines.iter().map(|e| e.metrics()).collect(),
            fabric: cluster.fabric.stats(),
            lock_wait_ns: cluster.engines.iter().map(|e| e.lock_wait_ns()).sum(),
            slot_bytes_per_node: cluster.layout.slot_bytes_per_node(),
            latencies,
            commits,
            deliveries: cluster.recorders.iter().map(|r| r.log()).collect(),
            stall_state: (!completed).then(|| cluster.state_dump()),
        }
    }
}

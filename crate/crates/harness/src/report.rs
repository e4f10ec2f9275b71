//! Verdicts, summary metrics and the files a run leaves behind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ringcast::multicast::{EngineMetrics, Histogram};
use ringcast::oracle::{reference_delivery_order, Expected, SendLog};
use ringcast::records::{parse_lines, CommitRecord, DeliveryRecord};
use ringcast::smc::SubgroupConfig;
use ringcast::transport::FabricStats;
use serde::{Deserialize, Serialize};

use crate::cluster::RunResult;
use crate::config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn skip(name: &str, detail: &str) -> Self {
        Self {
            name: name.into(),
            status: Status::Skip,
            detail: detail.into(),
        }
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{s} {}: {}", self.name, self.detail)
    }
}

/// Compares every node's deliveries against the oracle order built from
/// the merged commit logs. Returns the first mismatch.
pub fn check_order(
    subgroups: &[SubgroupConfig],
    commits: &[CommitRecord],
    deliveries: &[DeliveryRecord],
) -> std::result::Result<usize, String> {
    let mut by_node: BTreeMap<(usize, usize), Vec<&DeliveryRecord>> = BTreeMap::new();
    for d in deliveries {
        by_node.entry((d.sg, d.node)).or_default().push(d);
    }
    let mut compared = 0;
    for sg in subgroups {
        let logs = SendLog::from_records(commits, sg.sg_id, sg.senders.len()).map_err(|e| e.to_string())?;
        let expected: Vec<Expected> = reference_delivery_order(&logs).map_err(|e| e.to_string())?;
        for member in &sg.members {
            let got = by_node.get(&(sg.sg_id, member.0)).map(Vec::as_slice).unwrap_or(&[]);
            if got.len() != expected.len() {
                return Err(format!(
                    "sg{} {member}: {} deliveries, oracle expects {}",
                    sg.sg_id,
                    got.len(),
                    expected.len()
                ));
            }
            for (pos, (g, e)) in got.iter().zip(&expected).enumerate() {
                if (g.rank, g.index, g.digest) != (e.rank, e.index, e.digest) {
                    return Err(format!(
                        "sg{} {member} delivery {pos}: got ({}, {}, {:016x}), oracle ({}, {}, {:016x})",
                        sg.sg_id, g.rank, g.index, g.digest, e.rank, e.index, e.digest
                    ));
                }
            }
            compared += got.len();
        }
    }
    Ok(compared)
}

pub fn verdicts(config: &ScenarioConfig, run: &RunResult) -> Vec<Verdict> {
    let mut out = Vec::new();
    if config.record_logs {
        let all: Vec<DeliveryRecord> = run.deliveries.iter().flatten().cloned().collect();
        out.push(match check_order(&config.subgroup_configs(), &run.commits, &all) {
            Ok(n) => Verdict::new(
                "order",
                true,
                format!("{n} deliveries match the oracle at every member"),
            ),
            Err(e) => Verdict::new("order", false, e),
        });
    } else {
        out.push(Verdict::skip("order", "logs not recorded"));
    }

    let committed: u64 = run.engines.iter().map(|e| e.reals_committed).sum();
    let expected: u64 = (0..config.subgroups).map(|sg| config.expected_in(sg)).sum();
    let bad = run
        .engines
        .iter()
        .zip(&run.delivered)
        .enumerate()
        .find(|(_, (m, &d))| m.delivered_reals != committed || d != expected);
    out.push(match bad {
        None => Verdict::new(
            "validity",
            true,
            format!(
                "{committed} committed reals delivered once at each of {} nodes",
                config.nodes
            ),
        ),
        Some((n, (m, d))) => Verdict::new(
            "validity",
            false,
            format!(
                "node{n} delivered {d} (engine {}) of {committed} committed, {expected} scheduled",
                m.delivered_reals
            ),
        ),
    });

    out.push(Verdict::new(
        "no_stall",
        run.completed,
        if run.completed {
            format!("complete after {} ns", run.elapsed_ns)
        } else {
            format!("stalled:\n{}", run.stall_state.as_deref().unwrap_or(""))
        },
    ));

    out.push(if run.completed {
        Verdict::new(
            "quiescence",
            run.settle_nulls == 0,
            format!("{} nulls committed during the settle window", run.settle_nulls),
        )
    } else {
        Verdict::skip("quiescence", "run did not complete")
    });

    let violations: u64 = run.engines.iter().map(|e| e.lemma_violations).sum();
    let null_events: u64 = run.engines.iter().map(|e| e.null_commit_events).sum();
    out.push(Verdict::new(
        "lemma",
        violations == 0,
        format!("{violations} violations over {null_events} null commits"),
    ));

    let f = &run.fabric;
    out.push(Verdict::new(
        "conservation",
        f.writes_posted == f.writes_applied + f.in_flight,
        format!(
            "posted {} = applied {} + in flight {}",
            f.writes_posted, f.writes_applied, f.in_flight
        ),
    ));
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn from_sorted(s: &[u64]) -> Self {
        Self {
            samples: s.len() as u64,
            p50_ns: percentile(s, 50.0),
            p90_ns: percentile(s, 90.0),
            p99_ns: percentile(s, 99.0),
            max_ns: s.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: usize,
    pub delivered: u64,
    pub delivered_bytes: u64,
    pub bytes_per_sec: f64,
    pub engine: EngineMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ScenarioConfig,
    pub completed: bool,
    pub elapsed_ns: u64,
    pub wall_ms: u64,
    pub delivered_messages: u64,
    pub delivered_bytes: u64,
    pub throughput_bytes_per_sec: f64,
    pub writes_posted: u64,
    pub writes_per_delivery: f64,
    pub send_writes: u64,
    pub receive_writes: u64,
    pub delivery_writes: u64,
    pub reals_committed: u64,
    pub nulls_committed: u64,
    pub settle_nulls: u64,
    pub lemma_violations: u64,
    pub posts_in_critical_section: u64,
    pub post_time_ns: u64,
    pub lock_wait_ns: u64,
    pub parks: u64,
    pub upcalls: u64,
    pub copy_bytes: u64,
    pub slot_bytes_per_node: u64,
    pub latency: LatencySummary,
    pub send_batches: Histogram,
    pub receive_batches: Histogram,
    pub delivery_batches: Histogram,
    pub nodes: Vec<NodeSummary>,
    pub fabric: FabricStats,
    pub verdicts: Vec<Verdict>,
}

fn rate(bytes: u64, ns: u64) -> f64 {
    if ns == 0 {
        0.0
    } else {
        bytes as f64 * 1e9 / ns as f64
    }
}

impl Summary {
    pub fn new(config: &ScenarioConfig, run: &RunResult, verdicts: Vec<Verdict>) -> Self {
        let sum = |f: fn(&EngineMetrics) -> u64| run.engines.iter().map(f).sum::<u64>();
        let mut hist = [Histogram::default(), Histogram::default(), Histogram::default()];
        for e in &run.engines {
            hist[0].merge(&e.send_batches);
            hist[1].merge(&e.receive_batches);
            hist[2].merge(&e.delivery_batches);
        }
        let [send_batches, receive_batches, delivery_batches] = hist;
        let delivered_messages: u64 = run.delivered.iter().sum();
        let delivered_bytes: u64 = run.delivered_bytes.iter().sum();
        Self {
            config: config.clone(),
            completed: run.completed,
            elapsed_ns: run.elapsed_ns,
            wall_ms: run.wall_ms,
            delivered_messages,
            delivered_bytes,
            throughput_bytes_per_sec: rate(delivered_bytes, run.elapsed_ns),
            writes_posted: run.fabric.writes_posted,
            writes_per_delivery: if delivered_messages == 0 {
                0.0
            } else {
                run.fabric.writes_posted as f64 / delivered_messages as f64
            },
            send_writes: sum(|e| e.send_writes),
            receive_writes: sum(|e| e.receive_writes),
            delivery_writes: sum(|e| e.delivery_writes),
            reals_committed: sum(|e| e.reals_committed),
            nulls_committed: sum(|e| e.nulls_committed),
            settle_nulls: run.settle_nulls,
            lemma_violations: sum(|e| e.lemma_violations),
            posts_in_critical_section: run.fabric.posts_in_critical_section,
            post_time_ns: run.fabric.post_time_ns,
            lock_wait_ns: run.lock_wait_ns,
            parks: sum(|e| e.parks),
            upcalls: sum(|e| e.upcalls),
            copy_bytes: sum(|e| e.copy_bytes),
            slot_bytes_per_node: run.slot_bytes_per_node,
            latency: LatencySummary::from_sorted(&run.latencies),
            send_batches,
            receive_batches,
            delivery_batches,
            nodes: run
                .engines
                .iter()
                .enumerate()
                .map(|(node, e)| NodeSummary {
                    node,
                    delivered: run.delivered[node],
                    delivered_bytes: run.delivered_bytes[node],
                    bytes_per_sec: rate(run.delivered_bytes[node], run.elapsed_ns),
                    engine: e.clone(),
                })
                .collect(),
            fabric: run.fabric.clone(),
            verdicts,
        }
    }

    pub fn failed(&self) -> bool {
        self.verdicts.iter().any(Verdict::failed)
    }
}

fn write_hist(path: &Path, h: &Histogram) -> Result<()> {
    let mut s = String::from("batch_size,firings\n");
    for (size, count) in &h.0 {
        s.push_str(&format!("{size},{count}\n"));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Writes metrics.json, the three histogram CSVs, latency.csv,
/// subgroups.json and, when recorded, commits.log and deliveries.log.
pub fn emit_report(dir: &Path, summary: &Summary, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(summary)?)
        .with_context(|| format!("writing metrics.json in {}", dir.display()))?;
    write_hist(&dir.join("hist_send.csv"), &summary.send_batches)?;
    write_hist(&dir.join("hist_receive.csv"), &summary.receive_batches)?;
    write_hist(&dir.join("hist_delivery.csv"), &summary.delivery_batches)?;
    let l = &summary.latency;
    let mut lat = String::from("percentile,latency_ns\n");
    if l.samples > 0 {
        for (p, v) in [("50", l.p50_ns), ("90", l.p90_ns), ("99", l.p99_ns), ("100", l.max_ns)] {
            lat.push_str(&format!("{p},{v}\n"));
        }
    }
    fs::write(dir.join("latency.csv"), lat)?;
    fs::write(
        dir.join("subgroups.json"),
        serde_json::to_string_pretty(&summary.config.subgroup_configs())?,
    )?;
    if summary.config.record_logs {
        let mut f = fs::File::create(dir.join("commits.log"))?;
        for c in &run.commits {
            writeln!(f, "{c}")?;
        }
        let mut f = fs::File::create(dir.join("deliveries.log"))?;
        for d in run.deliveries.iter().flatten() {
            writeln!(f, "{d}")?;
        }
    }
    Ok(())
}

/// Oracle check over a directory written by [`emit_report`].
pub fn verify_logs(dir: &Path) -> Result<Verdict> {
    let read = |name: &str| fs::read_to_string(dir.join(name)).with_context(|| format!("reading {name}"));
    let subgroups: Vec<SubgroupConfig> = serde_json::from_str(&read("subgroups.json")?)?;
    let commits: Vec<CommitRecord> = parse_lines(&read("commits.log")?)?;
    let deliveries: Vec<DeliveryRecord> = parse_lines(&read("deliveries.log")?)?;
    Ok(match check_order(&subgroups, &commits, &deliveries) {
        Ok(n) => Verdict::new(
            "order",
            true,
            format!("{n} deliveries match the oracle at every member"),
        ),
        Err(e) => Verdict::new("order", false, e),
    })
}

//! Scenario driver for the ringcast protocol: builds in-process clusters
//! on the simulated fabric, runs them on virtual or real time, and checks
//! the outcome against the oracle.

pub mod cluster;
pub mod config;
pub mod recorder;
pub mod report;
pub mod sim;
pub mod threads;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;

pub use cluster::RunResult;
pub use config::{Delay, Runtime, ScenarioConfig, SenderPattern};
pub use report::{emit_report, verdicts, verify_logs, Status, Summary, Verdict};

pub struct Outcome {
    pub run: RunResult,
    pub summary: Summary,
}

impl Outcome {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.summary.verdicts.iter().find(|v| v.name == name)
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<Outcome> {
    let run = match config.runtime {
        Runtime::Sim => sim::run(config)?,
        Runtime::Threads => threads::run(config)?,
    };
    let v = verdicts(config, &run);
    let summary = Summary::new(config, &run, v);
    Ok(Outcome { run, summary })
}

/// Runs `base` once per value of `param` and writes `sweep.csv` plus one
/// report directory per value under `out`.
pub fn sweep(base: &ScenarioConfig, param: &str, values: &[String], out: &Path) -> Result<Vec<Outcome>> {
    fs::create_dir_all(out)?;
    let mut csv = String::from(
        "value,completed,throughput_bytes_per_sec,writes_per_delivery,latency_p50_ns,slot_bytes_per_node\n",
    );
    let mut outcomes = Vec::new();
    for v in values {
        let mut c = base.clone();
        c.set(param, v)?;
        let o = run_scenario(&c)?;
        emit_report(&out.join(format!("{param}={v}")), &o.summary, &o.run)?;
        let s = &o.summary;
        writeln!(
            csv,
            "{v},{},{:.0},{:.4},{},{}",
            s.completed, s.throughput_bytes_per_sec, s.writes_per_delivery, s.latency.p50_ns, s.slot_bytes_per_node
        )?;
        outcomes.push(o);
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(outcomes)
}

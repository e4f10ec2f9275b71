use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ringcast_harness::{emit_report, run_scenario, sweep, verify_logs, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "ringcast",
    version,
    about = "Scenario driver for the ringcast multicast protocol"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        /// `key = value` scenario file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the delivery logs of a finished run against the oracle.
    Verify {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Run a scenario once per parameter value.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

fn load(config: Option<PathBuf>, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut c = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            ScenarioConfig::from_kv(&text)?
        }
        None => ScenarioConfig::default(),
    };
    for o in overrides {
        c.apply_override(o)?;
    }
    c.validate()?;
    Ok(c)
}

fn main() -> Result<ExitCode> {
    let failed = match Cli::parse().command {
        Command::Run { config, overrides, out } => {
            let c = load(config, &overrides)?;
            let o = run_scenario(&c)?;
            emit_report(&out, &o.summary, &o.run)?;
            let s = &o.summary;
            println!(
                "delivered {} messages, {:.3} GB/s, {:.3} writes per delivery, p50 latency {} ns",
                s.delivered_messages,
                s.throughput_bytes_per_sec / 1e9,
                s.writes_per_delivery,
                s.latency.p50_ns
            );
            for v in &s.verdicts {
                println!("{v}");
            }
            s.failed()
        }
        Command::Verify { logs } => {
            let v = verify_logs(&logs)?;
            println!("{v}");
            v.failed()
        }
        Command::Sweep {
            config,
            overrides,
            param,
            values,
            out,
        } => {
            let c = load(config, &overrides)?;
            let outcomes = sweep(&c, &param, &values, &out)?;
            let mut failed = false;
            for (v, o) in values.iter().zip(&outcomes) {
                let s = &o.summary;
                println!(
                    "{param}={v}: {:.3} GB/s, {:.3} writes per delivery, {} slot bytes per node",
                    s.throughput_bytes_per_sec / 1e9,
                    s.writes_per_delivery,
                    s.slot_bytes_per_node
                );
                for verdict in s.verdicts.iter().filter(|v| v.failed()) {
                    println!("  {verdict}");
                }
                failed |= s.failed();
            }
            println!("wrote {}", out.join("sweep.csv").display());
            failed
        }
    };
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

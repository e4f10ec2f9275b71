//! Real-time runtime: one OS thread per polling loop and per sender, plus
//! the fabric's applier thread.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Result};
use ringcast::multicast::Parker;
use ringcast::time::TimeSource;
use ringcast::transport::Wake;

use crate::cluster::{build_buffer, fill_in_place, pattern_for, Cluster, RunResult};
use crate::config::{Delay, ScenarioConfig};

pub fn run(config: &ScenarioConfig) -> Result<RunResult> {
    let wall = Instant::now();
    let time = TimeSource::real();
    let parkers: Vec<Arc<Parker>> = (0..config.nodes).map(|_| Arc::new(Parker::new())).collect();
    let cluster = Cluster::build(config, time.clone(), |node| parkers[node].clone() as Arc<dyn Wake>)?;
    let applier = cluster.fabric.start_applier();
    let stop = Arc::new(AtomicBool::new(false));
    let expected = Cluster::expected_per_node(config);

    let mut handles = Vec::new();
    for (node, parker) in parkers.iter().enumerate() {
        let engine = cluster.engines[node].clone();
        let parker = parker.clone();
        let halt = stop.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("poll-{node}"))
                .spawn(move || engine.run_polling_loop(&halt, &parker))?,
        );
        for sg in 0..config.subgroups {
            let quota = config.quota(node, sg);
            if quota == 0 {
                continue;
            }
            let delay_ns = match config.delay_of(node) {
                Delay::Busy(ns) => ns,
                _ => 0,
            };
            let engine = cluster.engines[node].clone();
            let stop = stop.clone();
            let time = time.clone();
            let len = config.message_size;
            let copy_in = config.copy_in;
            handles.push(
                std::thread::Builder::new()
                    .name(format!("send-{node}-{sg}"))
                    .spawn(move || {
                        let pattern = pattern_for(node, sg);
                        let mut ordinal = 0;
                        while ordinal < quota && !stop.load(Ordering::Relaxed) {
                            let commit_ns = time.now_ns();
                            let sent = if copy_in {
                                let buf = build_buffer(len, commit_ns, ordinal, &pattern);
                                engine.try_send_copy(sg, &buf)
                            } else {
                                engine.try_send(sg, len, |w| fill_in_place(w, commit_ns, ordinal, &pattern))
                            }
                            .expect("scenario senders are configured senders");
                            if sent.is_some() {
                                ordinal += 1;
                                time.busy_wait(delay_ns);
                            } else {
                                std::thread::yield_now();
                            }
                        }
                    })?,
            );
        }
    }

    let deadline = Duration::from_nanos(config.stall_timeout_ns);
    let mut completed = false;
    while wall.elapsed() < deadline {
        if cluster.all_delivered(expected) {
            completed = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    let mut settle_nulls = 0;
    if completed {
        let before = cluster.nulls_committed();
        std::thread::sleep(Duration::from_nanos(config.settle_ns));
        settle_nulls = cluster.nulls_committed() - before;
    }
    stop.store(true, Ordering::Release);
    for p in &parkers {
        p.unpark();
    }
    for h in handles {
        h.join().map_err(|_| anyhow!("a protocol thread panicked"))?;
    }
    drop(applier);
    Ok(RunResult::collect(
        &cluster,
        completed,
        settle_nulls,
        wall.elapsed().as_millis() as u64,
    ))
}

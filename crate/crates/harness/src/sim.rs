//! Discrete-event runtime on virtual time.
//!
//! Every polling loop and every sender is an actor with its own ready time.
//! The driver repeatedly runs whichever comes first, an actor or the
//! earliest in-flight write, with the shared clock set to that instant.
//! Work done inside a step advances the clock, which becomes the actor's
//! next ready time. An idle polling loop sleeps until something lands at
//! its node or a local sender commits.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::Result;
use ringcast::time::{TimeSource, VirtualClock};
use ringcast::transport::Wake;

use crate::cluster::{build_buffer, fill_in_place, pattern_for, Cluster, RunResult};
use crate::config::{Delay, ScenarioConfig};

enum Kind {
    Poller {
        sweep_ns: u64,
    },
    Sender {
        sg: usize,
        left: u64,
        ordinal: u64,
        delay_ns: u64,
        pattern: Vec<u8>,
    },
}

struct Actor {
    node: usize,
    kind: Kind,
    ready: Option<u64>,
    idle_since: u64,
}

pub fn run(config: &ScenarioConfig) -> Result<RunResult> {
    let wall = Instant::now();
    let clock = Arc::new(VirtualClock::new());
    let time = TimeSource::virtual_time(clock.clone());
    let woken: Arc<Mutex<Vec<usize>>> = Arc::default();
    let cluster = Cluster::build(config, time.clone(), |node| {
        let woken = woken.clone();
        Arc::new(move || woken.lock().unwrap().push(node)) as Arc<dyn Wake>
    })?;

    let mut actors: Vec<Actor> = (0..config.nodes)
        .map(|node| Actor {
            node,
            kind: Kind::Poller { sweep_ns: 1 },
            ready: Some(0),
            idle_since: 0,
        })
        .collect();
    for node in 0..config.nodes {
        for sg in 0..config.subgroups {
            let quota = config.quota(node, sg);
            if quota == 0 {
                continue;
            }
            let delay_ns = match config.delay_of(node) {
                Delay::Busy(ns) => ns,
                _ => 0,
            };
            actors.push(Actor {
                node,
                kind: Kind::Sender {
                    sg,
                    left: quota,
                    ordinal: 0,
                    delay_ns,
                    pattern: pattern_for(node, sg),
                },
                ready: Some(0),
                idle_since: 0,
            });
        }
    }

    let expected = Cluster::expected_per_node(config);
    let mut settle: Option<(u64, u64)> = None;
    let idle_park = config.idle_sweeps.max(1);

    loop {
        if settle.is_none() && cluster.all_delivered(expected) {
            settle = Some((clock.now() + config.settle_ns, cluster.nulls_committed()));
        }
        let next_actor = actors
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.ready.map(|t| (t, i)))
            .min();
        let next_write = cluster.fabric.next_due();
        let at = match (next_actor, next_write) {
            (None, None) => break,
            (Some((t, _)), None) => t,
            (None, Some(d)) => d,
            (Some((t, _)), Some(d)) => t.min(d),
        };
        match settle {
            Some((end, _)) if at >= end => break,
            None if at > config.stall_timeout_ns => break,
            _ => {}
        }

        if next_write.is_some_and(|d| next_actor.is_none_or(|(t, _)| d <= t)) {
            clock.set(at);
            cluster.fabric.apply_next();
        } else {
            let (_, i) = next_actor.expect("an actor is ready");
            clock.set(at);
            let a = &mut actors[i];
            let engine = &cluster.engines[a.node];
            match &mut a.kind {
                Kind::Poller { sweep_ns } => {
                    let busy = engine.poll_once();
                    let now = clock.now();
                    if busy {
                        a.ready = Some(now.max(at + 1));
                        woken.lock().unwrap().push(a.node);
                    } else {
                        *sweep_ns = (now - at).max(1);
                        a.ready = None;
                        a.idle_since = now;
                    }
                }
                Kind::Sender {
                    sg,
                    left,
                    ordinal,
                    delay_ns,
                    pattern,
                } => {
                    let len = config.message_size;
                    let commit_ns = clock.now();
                    let gen_ns = config.cost.memcpy_ns(len);
                    let sent = if config.copy_in {
                        let buf = build_buffer(len, commit_ns, *ordinal, pattern);
                        engine.try_send_copy(*sg, &buf)?
                    } else {
                        engine.try_send(*sg, len, |w| fill_in_place(w, commit_ns, *ordinal, pattern))?
                    };
                    if sent.is_some() {
                        time.charge(gen_ns);
                        *left -= 1;
                        *ordinal += 1;
                        time.busy_wait(*delay_ns);
                        a.ready = (*left > 0).then(|| clock.now().max(at + 1));
                    } else {
                        a.ready = None;
                        a.idle_since = clock.now();
                    }
                }
            }
        }

        let nodes: Vec<usize> = std::mem::take(&mut *woken.lock().unwrap());
        if !nodes.is_empty() {
            let now = clock.now();
            for a in actors
                .iter_mut()
                .filter(|a| a.ready.is_none() && nodes.contains(&a.node))
            {
                match a.kind {
                    Kind::Poller { sweep_ns } => {
                        if now.saturating_sub(a.idle_since) / sweep_ns >= idle_park {
                            cluster.engines[a.node].record_park();
                        }
                    }
                    Kind::Sender { left: 0, .. } => continue,
                    Kind::Sender { .. } => {}
                }
                a.ready = Some(now.max(a.idle_since));
            }
        }
    }

    let completed = cluster.all_delivered(expected);
    let settle_nulls = settle.map_or(0, |(_, before)| cluster.nulls_committed() - before);
    Ok(RunResult::collect(
        &cluster,
        completed,
        settle_nulls,
        wall.elapsed().as_millis() as u64,
    ))
}

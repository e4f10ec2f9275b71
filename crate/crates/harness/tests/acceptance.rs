//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringcast::multicast::{compute_received_num, DeliveryMode};
use ringcast::oracle::reference_received_num;
use ringcast::smc::SubgroupConfig;
use ringcast::sst::{build_layout, SstTable};
use ringcast::time::TimeSource;
use ringcast::transport::{ChannelParams, Fabric, NodeId, LINE_BYTES};
use ringcast_harness::{run_scenario, Delay, Outcome, ScenarioConfig, SenderPattern, Status};

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    quiescence: Vec<String>,
    settle_checked: usize,
    null_events: u64,
    lemma_violations: u64,
}

impl Suite {
    fn observe(&mut self, label: &str, o: &Outcome) {
        self.null_events += o.run.engines.iter().map(|e| e.null_commit_events).sum::<u64>();
        self.lemma_violations += o.summary.lemma_violations;
        if o.summary.completed {
            self.settle_checked += 1;
            if o.summary.settle_nulls != 0 {
                self.quiescence
                    .push(format!("{label}: {} settle nulls", o.summary.settle_nulls));
            }
        }
    }

    fn run(&mut self, label: &str, config: &ScenarioConfig) -> Outcome {
        let o = run_scenario(config).unwrap_or_else(|e| panic!("{label}: {e:#}"));
        self.observe(label, &o);
        o
    }
}

fn failed_verdicts(o: &Outcome) -> Vec<String> {
    o.summary
        .verdicts
        .iter()
        .filter(|v| v.status == Status::Fail)
        .map(|v| format!("{}: {}", v.name, v.detail.lines().next().unwrap_or("")))
        .collect()
}

fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = ScenarioConfig {
        seed,
        nodes: rng.gen_range(2..=6),
        ..ScenarioConfig::default()
    };
    c.transport.seed = seed;
    c.senders = match rng.gen_range(0..3) {
        0 => SenderPattern::All,
        1 => SenderPattern::Half,
        _ => SenderPattern::One,
    };
    let s = c.sender_nodes().len() as u64;
    let cap = 20_000 / s;
    c.messages = if rng.gen_bool(0.2) {
        rng.gen_range(1..=cap)
    } else {
        rng.gen_range(1..=cap.min(1500))
    };
    c.message_size = rng.gen_range(0..=2048);
    c.window = rng.gen_range(1..=64);
    c.batching = rng.gen_bool(0.8);
    c.release_lock = rng.gen_bool(0.8);
    c.delivery = match rng.gen_range(0..3) {
        0 => DeliveryMode::InPlace,
        1 => DeliveryMode::CopyOut,
        _ => DeliveryMode::Batched,
    };
    c.transport.jitter_ns = rng.gen_range(0..=5_000);
    c.node_delays = (0..c.nodes)
        .map(|n| {
            let d = match rng.gen_range(0..10) {
                0..=1 => Delay::Infinite,
                2..=5 => Delay::Busy(rng.gen_range(0..=30_000)),
                _ => Delay::None,
            };
            (n, d)
        })
        .collect();
    c
}

fn randomized(suite: &mut Suite) -> Line {
    let mut problems = Vec::new();
    let mut deliveries = 0u64;
    let mut silent = 0usize;
    for seed in 0..200u64 {
        let c = random_scenario(seed);
        silent += (0..c.nodes)
            .filter(|&n| c.sender_nodes().contains(&NodeId(n)) && c.delay_of(n) == Delay::Infinite)
            .count();
        let o = suite.run(&format!("random#{seed}"), &c);
        deliveries += o.summary.delivered_messages;
        let bad: Vec<_> = failed_verdicts(&o)
            .into_iter()
            .filter(|f| !f.starts_with("quiescence") && !f.starts_with("lemma"))
            .collect();
        let order_ok = o.verdict("order").is_some_and(|v| v.status == Status::Pass);
        if !bad.is_empty() || !order_ok {
            problems.push(format!("seed {seed}: {bad:?}"));
        }
    }
    Line {
        name: "total order and validity",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("200 scenarios, {deliveries} deliveries, {silent} silent senders, all equal to the oracle")
        } else {
            format!("{} failing: {}", problems.len(), problems.join("; "))
        },
    }
}

fn received_num_exhaustive() -> Line {
    let mut cases = 0u64;
    let mut mismatches = 0u64;
    let mut counts = [0u64; 5];
    loop {
        for s in 1..=5 {
            cases += 1;
            if compute_received_num(&counts[..s], s).0 != reference_received_num(&counts[..s]) {
                mismatches += 1;
            }
        }
        let mut i = 0;
        while i < 5 && counts[i] == 6 {
            counts[i] = 0;
            i += 1;
        }
        if i == 5 {
            break;
        }
        counts[i] += 1;
    }
    Line {
        name: "received_num equivalence",
        pass: mismatches == 0 && cases == 7u64.pow(5) * 5,
        detail: format!("{cases} cases, {mismatches} mismatches"),
    }
}

fn lone_sender(n: usize, nulls: bool) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        nodes: n,
        senders: SenderPattern::All,
        messages: 1000,
        nulls,
        stall_timeout_ns: 2_000_000_000,
        ..ScenarioConfig::default()
    };
    c.node_delays = (1..n).map(|i| (i, Delay::Infinite)).collect();
    c
}

fn no_stall(suite: &mut Suite) -> Line {
    let mut parts = Vec::new();
    let mut pass = true;
    for n in [2, 4, 8] {
        let on = suite.run(&format!("lone n={n}"), &lone_sender(n, true));
        let off = suite.run(&format!("lone n={n} nulls off"), &lone_sender(n, false));
        let ok = on.summary.completed && failed_verdicts(&on).is_empty() && !off.summary.completed;
        pass &= ok;
        parts.push(format!(
            "n={n}: nulls on {} ({} nulls), nulls off {}",
            if on.summary.completed { "complete" } else { "STALLED" },
            on.summary.nulls_committed,
            if off.summary.completed { "COMPLETED" } else { "stalls" },
        ));
    }
    Line {
        name: "null no-stall",
        pass,
        detail: parts.join("; "),
    }
}

fn throughput_scenario(optimized: bool) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        nodes: 8,
        senders: SenderPattern::All,
        messages: 6250,
        message_size: 1024,
        record_logs: false,
        ..ScenarioConfig::default()
    };
    c.set("optimizations", if optimized { "on" } else { "off" }).unwrap();
    c
}

fn fence_guard() -> Line {
    const ROUNDS: i64 = 10_000;
    let cfg = SubgroupConfig {
        sg_id: 0,
        members: vec![NodeId(0), NodeId(1)],
        senders: vec![NodeId(0)],
        window: 4,
        max_msg_size: 200,
    };
    let layout = Arc::new(build_layout(2, &[cfg], 16).unwrap());
    let mut params = ChannelParams::zero_cost();
    params.set("latency_1b_ns", "500").unwrap();
    params.set("jitter_ns", "3000").unwrap();
    let fabric = Fabric::new(2, params, TimeSource::real());
    let writer = SstTable::new(layout.clone(), NodeId(0), fabric.clone()).unwrap();
    let _reader = SstTable::new(layout.clone(), NodeId(1), fabric.clone()).unwrap();
    let cols = layout.columns(0).unwrap().clone();
    let data = cols.slot_range(0, 4);
    let guard = cols.received();
    let applier = fabric.start_applier();
    let done = Arc::new(AtomicBool::new(false));
    let ahead = Arc::new(AtomicU64::new(0));
    let torn = Arc::new(AtomicU64::new(0));
    let reads = Arc::new(AtomicU64::new(0));
    let readers: Vec<_> = (0..2)
        .map(|_| {
            let (done, ahead, torn, reads) = (done.clone(), ahead.clone(), torn.clone(), reads.clone());
            let region = fabric.region(NodeId(1)).unwrap();
            let row = layout.row_offset(NodeId(0));
            let (guard_at, lo, hi) = (row + guard.0, row + data.start, row + data.end);
            std::thread::spawn(move || {
                while !done.load(Ordering::Acquire) {
                    let g = region.load_i64(guard_at);
                    if g < 1 {
                        continue;
                    }
                    for line in lo.div_ceil(LINE_BYTES)..hi / LINE_BYTES {
                        let bytes = region.read_line(line);
                        let first = i64::from_le_bytes(bytes[..8].try_into().unwrap());
                        if bytes
                            .chunks_exact(8)
                            .any(|w| i64::from_le_bytes(w.try_into().unwrap()) != first)
                        {
                            torn.fetch_add(1, Ordering::Relaxed);
                        }
                        if first < g {
                            ahead.fetch_add(1, Ordering::Relaxed);
                        }
                        reads.fetch_add(1, Ordering::Relaxed);
                    }
                }
            })
        })
        .collect();
    for v in 1..=ROUNDS {
        let fill: Vec<u8> = std::iter::repeat_n(v.to_le_bytes(), data.len() / 8).flatten().collect();
        writer.write_local(data.start, &fill);
        writer.store_local(guard, v);
        writer.push_data_then_guard(data.clone(), guard, &[NodeId(1)]).unwrap();
    }
    let drained = fabric.wait_idle(Duration::from_secs(60));
    done.store(true, Ordering::Release);
    for r in readers {
        r.join().unwrap();
    }
    drop(applier);
    let (ahead, torn, reads) = (
        ahead.load(Ordering::Relaxed),
        torn.load(Ordering::Relaxed),
        reads.load(Ordering::Relaxed),
    );
    Line {
        name: "fence/guard soundness",
        pass: drained && ahead == 0 && torn == 0 && reads > 0,
        detail: format!("{ROUNDS} pushes, {reads} line reads, {ahead} guard-ahead, {torn} torn"),
    }
}

fn sizing() -> Line {
    let members: Vec<NodeId> = (0..16).map(NodeId).collect();
    let cfg = SubgroupConfig {
        sg_id: 0,
        members: members.clone(),
        senders: members,
        window: 100,
        max_msg_size: 10 * 1024,
    };
    let got = build_layout(16, &[cfg], 8).unwrap().slot_bytes_per_node();
    Line {
        name: "sizing formula",
        pass: got == 16_396_800,
        detail: format!("n=16 w=100 m=10240 header=8: {got} bytes"),
    }
}

fn upcall_delay(suite: &mut Suite) -> Line {
    let base = ScenarioConfig {
        nodes: 4,
        senders: SenderPattern::All,
        messages: 500,
        upcall_delay_ns: 100_000,
        record_logs: false,
        ..ScenarioConfig::default()
    };
    let per = suite.run("upcall in_place", &base);
    let batched = suite.run(
        "upcall batched",
        &ScenarioConfig {
            delivery: DeliveryMode::Batched,
            ..base
        },
    );
    let (a, b) = (
        per.summary.throughput_bytes_per_sec,
        batched.summary.throughput_bytes_per_sec,
    );
    let ratio = b / a;
    Line {
        name: "delivery-delay sensitivity",
        pass: per.summary.completed && batched.summary.completed && ratio >= 5.0,
        detail: format!(
            "100us upcall: per-message {:.3e} B/s, batched {:.3e} B/s, {ratio:.1}x (need >= 5x)",
            a, b
        ),
    }
}

fn batch_structure(suite: &mut Suite) -> Line {
    let c = ScenarioConfig {
        nodes: 4,
        senders: SenderPattern::All,
        messages: 10_000,
        record_logs: false,
        ..ScenarioConfig::default()
    };
    let o = suite.run("symmetric n=S=4", &c);
    let h = &o.summary.delivery_batches;
    let mode = h.mode();
    let top: Vec<String> = {
        let mut v: Vec<_> = h.0.iter().collect();
        v.sort_by(|x, y| y.1.cmp(x.1).then(x.0.cmp(y.0)));
        v.into_iter().take(4).map(|(s, c)| format!("{s}x{c}")).collect()
    };
    Line {
        name: "delivery batch structure",
        pass: o.summary.completed && mode.is_some_and(|m| m > 0 && m % 4 == 0),
        detail: format!("modal batch {mode:?} with S=4; most frequent {}", top.join(" ")),
    }
}

fn main() {
    let started = Instant::now();
    let mut suite = Suite::default();
    let mut lines = Vec::new();

    lines.push(randomized(&mut suite));
    lines.push(received_num_exhaustive());
    lines.push(no_stall(&mut suite));

    let on = suite.run("n=8 optimized", &throughput_scenario(true));
    let off = suite.run("n=8 baseline", &throughput_scenario(false));
    let complete = on.summary.completed && off.summary.completed;
    let (won, woff) = (on.summary.writes_per_delivery, off.summary.writes_per_delivery);
    let (ton, toff) = (
        on.summary.throughput_bytes_per_sec,
        off.summary.throughput_bytes_per_sec,
    );
    let (lon, loff) = (on.summary.latency.p50_ns, off.summary.latency.p50_ns);

    lines.push(upcall_delay(&mut suite));
    lines.push(batch_structure(&mut suite));

    let mut ordered = vec![
        Line {
            name: "null quiescence",
            pass: suite.quiescence.is_empty() && suite.settle_checked > 0,
            detail: if suite.quiescence.is_empty() {
                format!(
                    "0 nulls in the 2 s settle window of all {} completed scenarios",
                    suite.settle_checked
                )
            } else {
                suite.quiescence.join("; ")
            },
        },
        Line {
            name: "one-round lemma",
            pass: suite.lemma_violations == 0,
            detail: format!(
                "{} violations over {} null commits",
                suite.lemma_violations, suite.null_events
            ),
        },
        Line {
            name: "write reduction",
            pass: complete && woff / won >= 5.0,
            detail: format!(
                "n=8, 50000 x 1 KB: {won:.3} writes/delivery batched vs {woff:.3} unbatched, {:.1}x (need >= 5x)",
                woff / won
            ),
        },
        Line {
            name: "throughput improvement",
            pass: complete && ton / toff >= 3.0,
            detail: format!(
                "{:.3e} B/s optimized vs {:.3e} B/s baseline, {:.1}x (need >= 3x)",
                ton,
                toff,
                ton / toff
            ),
        },
        Line {
            name: "latency non-regression",
            pass: complete && lon <= loff,
            detail: format!("median {lon} ns optimized vs {loff} ns baseline"),
        },
        fence_guard(),
        sizing(),
    ];
    let tail = lines.split_off(3);
    lines.append(&mut ordered);
    lines.extend(tail);

    let mut failures = 0;
    for l in &lines {
        if !l.pass {
            failures += 1;
        }
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        lines.len() - failures,
        lines.len(),
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ringcast::multicast::{Delivery, DeliveryHandler, Engine, EngineOptions, Parker};
use ringcast::smc::SubgroupConfig;
use ringcast::sst::{build_layout, SstTable};
use ringcast::time::TimeSource;
use ringcast::transport::{ChannelParams, Fabric, NodeId, LINE_BYTES};

fn config(n: usize, window: usize, m: usize) -> SubgroupConfig {
    SubgroupConfig {
        sg_id: 0,
        members: (0..n).map(NodeId).collect(),
        senders: (0..n).map(NodeId).collect(),
        window,
        max_msg_size: m,
    }
}

fn jittery() -> ChannelParams {
    let mut p = ChannelParams::zero_cost();
    p.set("latency_1b_ns", "500").unwrap();
    p.set("latency_4k_ns", "2000").unwrap();
    p.set("jitter_ns", "3000").unwrap();
    p.set("seed", "7").unwrap();
    p
}

#[test]
fn guard_never_overtakes_data() {
    const ROUNDS: u64 = 10_000;
    let cfg = config(2, 4, 200);
    let layout = Arc::new(build_layout(2, std::slice::from_ref(&cfg), 16).unwrap());
    let fabric = Fabric::new(2, jittery(), TimeSource::real());
    let writer = SstTable::new(layout.clone(), NodeId(0), fabric.clone()).unwrap();
    let reader = SstTable::new(layout.clone(), NodeId(1), fabric.clone()).unwrap();
    let cols = layout.columns(0).unwrap().clone();
    let data = cols.slot_range(0, 4);
    let guard = cols.received();
    let _applier = fabric.start_applier();

    let done = Arc::new(AtomicBool::new(false));
    let violations = Arc::new(AtomicU64::new(0));
    let torn = Arc::new(AtomicU64::new(0));
    let checks = Arc::new(AtomicU64::new(0));
    let mut readers = Vec::new();
    for _ in 0..2 {
        let (done, violations, torn, checks) = (done.clone(), violations.clone(), torn.clone(), checks.clone());
        let region = fabric.region(NodeId(1)).unwrap();
        let guard_at = reader.offset(NodeId(0), guard.0);
        let data_at = reader.offset(NodeId(0), data.start);
        let data_end = reader.offset(NodeId(0), data.end);
        readers.push(thread::spawn(move || {
            let first_line = data_at.div_ceil(LINE_BYTES);
            let last_line = data_end / LINE_BYTES;
            let mut last_guard = i64::MIN;
            while !done.load(Ordering::Acquire) {
                let g = region.load_i64(guard_at);
                if g < last_guard {
                    violations.fetch_add(1, Ordering::Relaxed);
                }
                last_guard = g;
                if g < 1 {
                    // initial cells, nothing pushed yet
                    continue;
                }
                for line in first_line..last_line {
                    let bytes = region.read_line(line);
                    let words: Vec<i64> = bytes
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    if words.iter().any(|&w| w != words[0]) {
                        torn.fetch_add(1, Ordering::Relaxed);
                    }
                    if words[0] < g {
                        violations.fetch_add(1, Ordering::Relaxed);
                    }
                }
                checks.fetch_add(1, Ordering::Relaxed);
            }
        }));
    }

    let targets = [NodeId(0), NodeId(1)];
    for v in 1..=ROUNDS as i64 {
        let fill: Vec<u8> = std::iter::repeat_n(v.to_le_bytes(), data.len() / 8).flatten().collect();
        writer.write_local(data.start, &fill);
        writer.store_local(guard, v);
        assert_eq!(writer.push_data_then_guard(data.clone(), guard, &targets).unwrap(), 2);
    }
    assert!(fabric.wait_idle(Duration::from_secs(30)));
    done.store(true, Ordering::Release);
    for r in readers {
        r.join().unwrap();
    }
    assert_eq!(reader.read(NodeId(0), guard), ROUNDS as i64);
    assert!(checks.load(Ordering::Relaxed) > 0);
    assert_eq!(violations.load(Ordering::Relaxed), 0, "guard seen ahead of data");
    assert_eq!(torn.load(Ordering::Relaxed), 0, "torn line reads");
    assert_eq!(fabric.stats().writes_applied, 2 * ROUNDS);
}

#[derive(Default)]
struct Count(AtomicU64);

impl DeliveryHandler for Count {
    fn deliver(&self, _: Delivery<'_>) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

struct Live {
    fabric: Arc<Fabric>,
    engines: Vec<Arc<Engine>>,
    counts: Vec<Arc<Count>>,
    parkers: Vec<Arc<Parker>>,
    stop: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
    _applier: ringcast::transport::ApplierHandle,
}

fn live(n: usize, opts: EngineOptions) -> Live {
    let cfg = config(n, 8, 64);
    let layout = Arc::new(build_layout(n, std::slice::from_ref(&cfg), 16).unwrap());
    let fabric = Fabric::new(n, jittery(), TimeSource::real());
    let stop = Arc::new(AtomicBool::new(false));
    let (mut engines, mut counts, mut parkers, mut threads) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let parker = Arc::new(Parker::new());
        fabric.set_waker(NodeId(i), parker.clone());
        let count = Arc::new(Count::default());
        let table = SstTable::new(layout.clone(), NodeId(i), fabric.clone()).unwrap();
        let engine = Arc::new(
            Engine::new(
                table,
                std::slice::from_ref(&cfg),
                opts.clone(),
                count.clone(),
                parker.clone(),
            )
            .unwrap(),
        );
        let (e, p, s) = (engine.clone(), parker.clone(), stop.clone());
        threads.push(thread::spawn(move || e.run_polling_loop(&s, &p)));
        engines.push(engine);
        counts.push(count);
        parkers.push(parker);
    }
    let applier = fabric.start_applier();
    Live {
        fabric,
        engines,
        counts,
        parkers,
        stop,
        threads,
        _applier: applier,
    }
}

impl Live {
    fn wait_for(&self, each: u64) -> bool {
        let deadline = Instant::now() + Duration::from_secs(20);
        while Instant::now() < deadline {
            if self.counts.iter().all(|c| c.0.load(Ordering::Relaxed) >= each) {
                return true;
            }
            thread::sleep(Duration::from_millis(1));
        }
        false
    }

    fn shutdown(self) {
        self.stop.store(true, Ordering::Release);
        for p in &self.parkers {
            p.unpark();
        }
        for t in self.threads {
            t.join().unwrap();
        }
    }
}

#[test]
fn idle_loops_park_and_writes_wake_them() {
    let net = live(
        3,
        EngineOptions {
            idle_sweeps_before_park: 50,
            ..EngineOptions::default()
        },
    );
    thread::sleep(Duration::from_millis(200));
    assert!(net.engines.iter().all(|e| e.metrics().parks > 0));
    assert_eq!(net.fabric.stats().writes_posted, 0);

    let unparks_before = net.parkers[2].unparks();
    net.engines[0].try_send_copy(0, b"wake up").unwrap().unwrap();
    assert!(net.wait_for(1), "delivery after parking");
    assert!(net.parkers[2].unparks() > unparks_before);
    assert_eq!(net.fabric.stats().posts_in_critical_section, 0);
    net.shutdown();
}

#[test]
fn concurrent_senders_post_outside_the_lock() {
    let net = live(3, EngineOptions::default());
    let per = 400u64;
    let senders: Vec<_> = net
        .engines
        .iter()
        .map(|e| {
            let e = e.clone();
            thread::spawn(move || {
                for i in 0..per {
                    e.send_copy(0, &i.to_le_bytes()).unwrap();
                }
            })
        })
        .collect();
    for s in senders {
        s.join().unwrap();
    }
    assert!(net.wait_for(3 * per));
    let stats = net.fabric.stats();
    assert!(stats.writes_posted > 0);
    assert_eq!(stats.posts_in_critical_section, 0);
    net.shutdown();
}

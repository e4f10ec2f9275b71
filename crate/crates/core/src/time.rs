//! Time sources shared by the fabric and the protocol engine.
//!
//! Two flavours exist. [`TimeSource::Real`] measures wall-clock nanoseconds
//! and realizes costs as busy-waits, so contention between real threads is
//! observable. [`TimeSource::Virtual`] reads a [`VirtualClock`] owned by a
//! discrete-event driver; costs advance that clock instead of burning CPU.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Clock advanced explicitly by a single-threaded event driver.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now.load(Ordering::Relaxed)
    }

    /// Moves the clock to `t`. The driver may move it backwards when it
    /// switches to an actor whose local time is behind the last one.
    pub fn set(&self, t: u64) {
        self.now.store(t, Ordering::Relaxed);
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub enum TimeSource {
    Real { origin: Instant },
    Virtual(Arc<VirtualClock>),
}

impl TimeSource {
    pub fn real() -> Self {
        TimeSource::Real { origin: Instant::now() }
    }

    pub fn virtual_time(clock: Arc<VirtualClock>) -> Self {
        TimeSource::Virtual(clock)
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, TimeSource::Virtual(_))
    }

    /// Nanoseconds since the origin (real) or the current virtual instant.
    pub fn now_ns(&self) -> u64 {
        match self {
            TimeSource::Real { origin } => origin.elapsed().as_nanos() as u64,
            TimeSource::Virtual(clock) => clock.now(),
        }
    }

    /// Occupies the caller for `ns`: a spin in real time, a clock advance in
    /// virtual time.
    pub fn busy_wait(&self, ns: u64) {
        if ns == 0 {
            return;
        }
        match self {
            TimeSource::Real { .. } => {
                let until = Instant::now() + Duration::from_nanos(ns);
                while Instant::now() < until {
                    std::hint::spin_loop();
                }
            }
            TimeSource::Virtual(clock) => clock.advance(ns),
        }
    }

    /// Virtual time only: moves the clock forward to `t` if it is behind.
    pub fn advance_to(&self, t: u64) {
        if let TimeSource::Virtual(clock) = self {
            if clock.now() < t {
                clock.set(t);
            }
        }
    }

    /// Accounts modelled CPU work. Real time already pays for the work it
    /// does, so this is a no-op there.
    pub fn charge(&self, ns: u64) {
        if let TimeSource::Virtual(clock) = self {
            clock.advance(ns);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_busy_wait_advances_clock() {
        let clock = Arc::new(VirtualClock::new());
        let t = TimeSource::virtual_time(clock.clone());
        t.busy_wait(1_000);
        t.charge(250);
        assert_eq!(t.now_ns(), 1_250);
        clock.set(10);
        assert_eq!(t.now_ns(), 10);
    }

    #[test]
    fn real_busy_wait_takes_at_least_the_requested_time() {
        let t = TimeSource::real();
        let start = t.now_ns();
        t.busy_wait(200_000);
        assert!(t.now_ns() - start >= 200_000);
        // charge is free in real time
        let before = Instant::now();
        t.charge(1_000_000_000);
        assert!(before.elapsed() < Duration::from_millis(100));
    }
}

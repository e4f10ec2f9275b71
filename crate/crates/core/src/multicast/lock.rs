use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::time::TimeSource;
use crate::transport::{CriticalSection, Wake};

/// Per-subgroup lock shared by the polling thread and sender threads.
///
/// On virtual time the mutex itself never blocks (one actor runs at a
/// time), so the lock also remembers when its last holder let go. An actor
/// arriving earlier in virtual time is moved forward to that instant.
pub struct SgLock<T> {
    inner: Mutex<T>,
    busy_until: AtomicU64,
    waited_ns: AtomicU64,
    time: TimeSource,
}

impl<T> SgLock<T> {
    pub fn new(value: T, time: TimeSource) -> Self {
        Self {
            inner: Mutex::new(value),
            busy_until: AtomicU64::new(0),
            waited_ns: AtomicU64::new(0),
            time,
        }
    }

    pub fn lock(&self) -> SgGuard<'_, T> {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if self.time.is_virtual() {
            let now = self.time.now_ns();
            let free_at = self.busy_until.load(Ordering::Relaxed);
            if free_at > now {
                self.waited_ns.fetch_add(free_at - now, Ordering::Relaxed);
                self.time.advance_to(free_at);
            }
        }
        SgGuard {
            guard,
            lock: self,
            _cs: CriticalSection::enter(),
        }
    }

    /// Virtual nanoseconds actors spent waiting for this lock.
    pub fn waited_ns(&self) -> u64 {
        self.waited_ns.load(Ordering::Relaxed)
    }
}

pub struct SgGuard<'a, T> {
    guard: MutexGuard<'a, T>,
    lock: &'a SgLock<T>,
    _cs: CriticalSection,
}

impl<T> Deref for SgGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.guard
    }
}

impl<T> DerefMut for SgGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.guard
    }
}

impl<T> Drop for SgGuard<'_, T> {
    fn drop(&mut self) {
        if self.lock.time.is_virtual() {
            self.lock
                .busy_until
                .fetch_max(self.lock.time.now_ns(), Ordering::Relaxed);
        }
    }
}

/// Single-token park/unpark primitive for the polling thread.
#[derive(Default)]
pub struct Parker {
    token: Mutex<bool>,
    cv: Condvar,
    unparks: AtomicU64,
}

impl Parker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unpark(&self) {
        self.unparks.fetch_add(1, Ordering::Relaxed);
        *self.token.lock().unwrap() = true;
        self.cv.notify_all();
    }

    /// Blocks until unparked or `timeout` passes. Returns whether a token was
    /// consumed. A token left by an earlier unpark is consumed immediately.
    pub fn park_timeout(&self, timeout: Duration) -> bool {
        let token = self.token.lock().unwrap();
        let (mut token, _) = self.cv.wait_timeout_while(token, timeout, |t| !*t).unwrap();
        std::mem::replace(&mut *token, false)
    }

    pub fn unparks(&self) -> u64 {
        self.unparks.load(Ordering::Relaxed)
    }
}

impl Wake for Parker {
    fn wake(&self) {
        self.unpark();
    }
}

//! Run clocks. The simulated clock advances only when told to, which keeps
//! replayed trajectories byte-identical; the real clock tracks wall time and
//! sleeps through delays.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Milliseconds since run start.
    fn now_ms(&self) -> u64;
    /// Advances logical time (simulated) or sleeps (real).
    fn advance(&self, ms: u64);
    fn is_simulated(&self) -> bool;
}

#[derive(Debug, Default)]
pub struct SimClock {
    ms: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        SimClock::default()
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.ms.load(Ordering::SeqCst)
    }

    fn advance(&self, ms: u64) {
        self.ms.fetch_add(ms, Ordering::SeqCst);
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

#[derive(Debug)]
pub struct RealClock {
    start: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock { start: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        RealClock::new()
    }
}

impl Clock for RealClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn advance(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }

    fn is_simulated(&self) -> bool {
        false
    }
}

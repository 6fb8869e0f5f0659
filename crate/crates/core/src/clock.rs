//! Injected time source.
//!
//! Every component that reasons about time (politeness, rate limiting, change
//! processes, checkpoint cadence) reads it through [`Clock`], so tests can run a
//! simulated hour of crawling in milliseconds of wall time.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Seconds since the Unix epoch, fractional.
pub type Seconds = f64;

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Seconds;

    /// Move time forward to `t`. A simulated clock jumps and returns zero; the
    /// system clock cannot jump, so it returns how long the caller should sleep.
    fn advance_to(&self, t: Seconds) -> Duration;

    fn is_simulated(&self) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Seconds {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }

    fn advance_to(&self, t: Seconds) -> Duration {
        let wait = t - self.now();
        if wait > 0.0 {
            Duration::from_secs_f64(wait)
        } else {
            Duration::ZERO
        }
    }

    fn is_simulated(&self) -> bool {
        false
    }
}

/// Manually driven clock. Time never goes backwards: `advance_to` with an
/// earlier instant is a no-op.
#[derive(Debug)]
pub struct SimClock {
    bits: AtomicU64,
}

impl SimClock {
    pub fn new(start: Seconds) -> Self {
        SimClock {
            bits: AtomicU64::new(start.to_bits()),
        }
    }

    pub fn advance_by(&self, dt: Seconds) {
        let target = self.now() + dt;
        self.advance_to(target);
    }
}

impl Default for SimClock {
    /// 2023-11-14T22:13:20Z, an arbitrary but fixed origin.
    fn default() -> Self {
        SimClock::new(1_700_000_000.0)
    }
}

impl Clock for SimClock {
    fn now(&self) -> Seconds {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    fn advance_to(&self, t: Seconds) -> Duration {
        let _ = self
            .bits
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |cur| {
                (t > f64::from_bits(cur)).then_some(t.to_bits())
            });
        Duration::ZERO
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

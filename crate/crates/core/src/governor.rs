//! The scheduler's three duties: per-host politeness, the diurnal global
//! rate limit, and the crawl stop conditions.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use thiserror::Error;

use crate::clock::Seconds;

pub const DEFAULT_HOST_INTERVAL: Seconds = 20.0;
pub const DEFAULT_PAGES_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HostState {
    pub host: String,
    pub last_contact: Option<Seconds>,
    pub in_flight: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotDecision {
    Granted,
    /// Too soon after the last contact; try again at this instant.
    RetryAt(Seconds),
    /// A request to this host is still in flight.
    Busy,
}

/// Per-host politeness ledger shared by the dispatcher and the workers.
#[derive(Debug, Default)]
pub struct HostLedger {
    hosts: Mutex<HashMap<String, HostState>>,
}

impl HostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Grants a slot iff nothing is in flight to `host` and at least
    /// `min_interval` has passed since the last contact. A grant records
    /// `now` as the contact time and marks the host in flight, atomically.
    pub fn acquire(&self, host: &str, now: Seconds, min_interval: Seconds) -> SlotDecision {
        let mut hosts = self.hosts.lock().expect("host ledger poisoned");
        let state = hosts.entry(host.to_string()).or_insert_with(|| HostState {
            host: host.to_string(),
            last_contact: None,
            in_flight: 0,
        });
        if state.in_flight > 0 {
            return SlotDecision::Busy;
        }
        if let Some(last) = state.last_contact {
            let ready = last + min_interval;
            if now < ready {
                return SlotDecision::RetryAt(ready);
            }
        }
        state.last_contact = Some(state.last_contact.map_or(now, |l| l.max(now)));
        state.in_flight += 1;
        SlotDecision::Granted
    }

    /// Ends the in-flight request. The contact time moves to the completion
    /// instant, so the next start is at least `min_interval` after this
    /// request finished, not merely after it started.
    pub fn release(&self, host: &str, now: Seconds) {
        let mut hosts = self.hosts.lock().expect("host ledger poisoned");
        if let Some(state) = hosts.get_mut(host) {
            state.in_flight = state.in_flight.saturating_sub(1);
            state.last_contact = Some(state.last_contact.map_or(now, |l| l.max(now)));
        }
    }

    /// Records a contact learned from elsewhere (e.g. pages stored after the
    /// last checkpoint), never moving the contact time backwards.
    pub fn note_contact(&self, host: &str, at: Seconds) {
        let mut hosts = self.hosts.lock().expect("host ledger poisoned");
        let state = hosts.entry(host.to_string()).or_insert_with(|| HostState {
            host: host.to_string(),
            last_contact: None,
            in_flight: 0,
        });
        state.last_contact = Some(state.last_contact.map_or(at, |l| l.max(at)));
    }

    pub fn state(&self, host: &str) -> Option<HostState> {
        self.hosts.lock().expect("host ledger poisoned").get(host).cloned()
    }

    /// `(host, last_contact)` for every contacted host, sorted by host.
    pub fn listing(&self) -> Vec<(String, Seconds)> {
        let hosts = self.hosts.lock().expect("host ledger poisoned");
        let mut out: Vec<_> = hosts
            .values()
            .filter_map(|s| s.last_contact.map(|t| (s.host.clone(), t)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn restore(entries: &[(String, Seconds)]) -> Self {
        let hosts = entries
            .iter()
            .map(|(h, t)| {
                (
                    h.clone(),
                    HostState {
                        host: h.clone(),
                        last_contact: Some(*t),
                        in_flight: 0,
                    },
                )
            })
            .collect();
        HostLedger {
            hosts: Mutex::new(hosts),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("hour bucket [{0}, {1}) is out of range")]
    BadHours(u8, u8),
    #[error("rate must be positive, got {0}")]
    BadRate(f64),
    #[error("hour {0} is covered by more than one bucket")]
    Overlap(u8),
}

/// Pages per second applying to the half-open local-time hours
/// `[start_hour, end_hour)`. `start_hour > end_hour` wraps past midnight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBucket {
    pub start_hour: u8,
    pub end_hour: u8,
    pub pages_per_second: f64,
}

impl RateBucket {
    fn covers(&self, hour: u8) -> bool {
        if self.start_hour <= self.end_hour {
            (self.start_hour..self.end_hour).contains(&hour)
        } else {
            hour >= self.start_hour || hour < self.end_hour
        }
    }
}

/// Time-of-day rate table. Hours not covered by an explicit bucket use the
/// default rate, so every hour has exactly one rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateProfile {
    buckets: Vec<RateBucket>,
    default_rate: f64,
}

impl Default for RateProfile {
    fn default() -> Self {
        RateProfile {
            buckets: Vec::new(),
            default_rate: DEFAULT_PAGES_PER_SECOND,
        }
    }
}

impl RateProfile {
    /// `f64::INFINITY` is accepted as the "unlimited" rate.
    pub fn new(buckets: Vec<RateBucket>, default_rate: f64) -> Result<Self, ProfileError> {
        if !(default_rate > 0.0) {
            return Err(ProfileError::BadRate(default_rate));
        }
        for b in &buckets {
            if b.start_hour > 23 || b.end_hour > 24 || b.start_hour == b.end_hour {
                return Err(ProfileError::BadHours(b.start_hour, b.end_hour));
            }
            if !(b.pages_per_second > 0.0) {
                return Err(ProfileError::BadRate(b.pages_per_second));
            }
        }
        for hour in 0..24u8 {
            if buckets.iter().filter(|b| b.covers(hour)).count() > 1 {
                return Err(ProfileError::Overlap(hour));
            }
        }
        Ok(RateProfile {
            buckets,
            default_rate,
        })
    }

    pub fn buckets(&self) -> &[RateBucket] {
        &self.buckets
    }

    pub fn default_rate(&self) -> f64 {
        self.default_rate
    }

    pub fn rate_for_hour(&self, hour: u8) -> f64 {
        self.buckets
            .iter()
            .find(|b| b.covers(hour))
            .map_or(self.default_rate, |b| b.pages_per_second)
    }

    /// The rate in force at `now`, in local time `timezone_offset` seconds
    /// east of UTC.
    pub fn current_rate(&self, now: Seconds, timezone_offset: Seconds) -> f64 {
        self.rate_for_hour(local_hour(now, timezone_offset))
    }
}

pub fn local_hour(now: Seconds, timezone_offset: Seconds) -> u8 {
    let secs_of_day = (now + timezone_offset).rem_euclid(86_400.0);
    ((secs_of_day / 3600.0).floor() as u8).min(23)
}

/// Token bucket with burst equal to the rate (at least one token).
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    tokens: f64,
    last: Option<Seconds>,
}

impl TokenBucket {
    pub fn new(rate: f64) -> Self {
        TokenBucket {
            rate,
            tokens: Self::burst_for(rate),
            last: None,
        }
    }

    fn burst_for(rate: f64) -> f64 {
        if rate.is_infinite() {
            f64::INFINITY
        } else {
            rate.max(1.0)
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn burst(&self) -> f64 {
        Self::burst_for(self.rate)
    }

    /// Switches to a new rate (e.g. at an hour boundary), keeping at most one
    /// new burst worth of tokens.
    pub fn set_rate(&mut self, rate: f64, now: Seconds) {
        if rate == self.rate {
            return;
        }
        self.refill(now);
        self.rate = rate;
        self.tokens = self.tokens.min(self.burst());
    }

    fn refill(&mut self, now: Seconds) {
        if self.rate.is_infinite() {
            self.tokens = f64::INFINITY;
        } else if let Some(last) = self.last {
            if now > last {
                self.tokens = (self.tokens + (now - last) * self.rate).min(self.burst());
            }
        }
        self.last = Some(self.last.map_or(now, |l| l.max(now)));
    }

    /// Seconds until a token is available; zero means proceed now.
    pub fn ready_in(&mut self, now: Seconds) -> Seconds {
        self.refill(now);
        // Tolerance absorbs refill rounding that would otherwise ask for a
        // wait too small to move the clock.
        if self.tokens >= 1.0 - 1e-9 {
            0.0
        } else {
            (1.0 - self.tokens) / self.rate
        }
    }

    /// Takes a token if one is available, otherwise reports the wait.
    pub fn gate(&mut self, now: Seconds) -> RateGate {
        let wait = self.ready_in(now);
        if wait > 0.0 {
            RateGate::Wait(wait)
        } else {
            if self.tokens.is_finite() {
                self.tokens -= 1.0;
            }
            RateGate::Proceed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateGate {
    Proceed,
    Wait(Seconds),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopConditions {
    pub max_pages: Option<u64>,
    pub max_duration: Option<Seconds>,
    pub max_depth: Option<u32>,
}

impl StopConditions {
    pub fn is_bounded(&self) -> bool {
        self.max_pages.is_some() || self.max_duration.is_some() || self.max_depth.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub pages_fetched: u64,
    pub elapsed: Seconds,
    /// Smallest depth among pending and in-flight requests; `None` when
    /// there is no work left at all.
    pub frontier_min_depth: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    PageBudget,
    TimeBudget,
    DepthExhausted,
    FrontierExhausted,
    /// The run was cut short on purpose (crash simulation or interrupt).
    Halted,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::PageBudget => "PageBudget",
            StopReason::TimeBudget => "TimeBudget",
            StopReason::DepthExhausted => "DepthExhausted",
            StopReason::FrontierExhausted => "FrontierExhausted",
            StopReason::Halted => "Halted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// First violated bound wins: pages, then duration, then depth, then an
/// empty frontier.
pub fn should_stop(progress: &Progress, limits: &StopConditions) -> StopDecision {
    if limits.max_pages.is_some_and(|m| progress.pages_fetched >= m) {
        return StopDecision::Stop(StopReason::PageBudget);
    }
    if limits.max_duration.is_some_and(|m| progress.elapsed > m) {
        return StopDecision::Stop(StopReason::TimeBudget);
    }
    match progress.frontier_min_depth {
        None => StopDecision::Stop(StopReason::FrontierExhausted),
        Some(d) if limits.max_depth.is_some_and(|m| d > m) => {
            StopDecision::Stop(StopReason::DepthExhausted)
        }
        Some(_) => StopDecision::Continue,
    }
}

//! Revisit planning under a Poisson change model.
//!
//! Each page changes as a Poisson process with rate λ (changes per unit
//! time). A page revisited every `I` time units has time-averaged
//!
//! ```text
//! freshness(λ, I) = (1 - e^(-λI)) / (λI)
//! age(λ, I)       = I/2 - 1/λ + (1 - e^(-λI)) / (λ²I)
//! ```
//!
//! The planners allocate a total revisit budget `B = Σ f_i` across pages.
//! The two optimal policies search a uniform frequency grid; because both
//! objectives are separable and concave (freshness) or convex (age) in `f`,
//! greedy marginal allocation on the grid is exact. When a per-page sequence
//! is not discretely concave/convex (possible for the capped age of an
//! abandoned page on a coarse grid) the planner falls back to dynamic
//! programming, which is exact regardless.
//!
//! [`evaluate_plan`] measures a plan by discrete-event simulation and never
//! consults the closed forms, so it doubles as their check.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clock::Seconds;

#[derive(Debug, Error, PartialEq)]
pub enum RevisitError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("budget must be positive, got {0}")]
    BudgetError(f64),
    #[error("every visit observed a change; the rate is unresolvable")]
    Saturated,
    #[error("visit spacing varies by more than 1%")]
    IrregularHistory,
    #[error("unknown revisit policy {0:?}")]
    UnknownPolicy(String),
}

fn check_domain(lambda: f64, interval: f64) -> Result<(), RevisitError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(RevisitError::DomainError(format!("change rate {lambda} must be finite and >= 0")));
    }
    if !(interval > 0.0) {
        return Err(RevisitError::DomainError(format!("interval {interval} must be > 0")));
    }
    Ok(())
}

/// Time-averaged probability that the local copy is current when the page
/// is revisited every `interval`.
pub fn expected_freshness(lambda: f64, interval: f64) -> Result<f64, RevisitError> {
    check_domain(lambda, interval)?;
    if interval.is_infinite() {
        return Ok(if lambda == 0.0 { 1.0 } else { 0.0 });
    }
    let x = lambda * interval;
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(-(-x).exp_m1() / x)
}

/// Time-averaged staleness, in the same time unit as `interval`.
pub fn expected_age(lambda: f64, interval: f64) -> Result<f64, RevisitError> {
    check_domain(lambda, interval)?;
    let x = lambda * interval;
    if x == 0.0 {
        return Ok(0.0);
    }
    // age = I * g(x), g(x) = 1/2 - 1/x + (1 - e^-x)/x².
    let g = if x < 0.5 {
        // g(x) = Σ_{k≥1} (-1)^(k+1) x^k / (k+2)!, avoids the cancellation.
        let mut term = x / 6.0;
        let mut sum = 0.0f64;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            sum += term;
            term *= -x / (k + 3.0);
            k += 1.0;
        }
        sum
    } else {
        0.5 - 1.0 / x + (-(-x).exp_m1()) / (x * x)
    };
    Ok((interval * g).max(0.0))
}

/// Change-rate estimate from `changes` detected over `visits` regular
/// intervals of length `interval`: λ̂ = -ln(1 - X/n) / I.
pub fn estimate_change_rate(visits: u32, changes: u32, interval: f64) -> Result<f64, RevisitError> {
    if visits == 0 || changes > visits || !(interval > 0.0) {
        return Err(RevisitError::DomainError(format!(
            "need n >= 1, 0 <= X <= n, I > 0 (n={visits}, X={changes}, I={interval})"
        )));
    }
    if changes == visits {
        return Err(RevisitError::Saturated);
    }
    if changes == 0 {
        return Ok(0.0);
    }
    let ratio = changes as f64 / visits as f64;
    Ok(-(-ratio).ln_1p() / interval)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub visit_time: Seconds,
    /// Whether the page differed from the copy taken at the previous visit.
    pub changed_since_last_visit: bool,
}

/// A baseline fetch followed by regular revisits of one page.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationHistory {
    pub baseline: Seconds,
    pub visits: Vec<Observation>,
}

impl ObservationHistory {
    pub fn new(baseline: Seconds) -> Self {
        ObservationHistory {
            baseline,
            visits: Vec::new(),
        }
    }

    pub fn record(&mut self, visit_time: Seconds, changed: bool) {
        self.visits.push(Observation {
            visit_time,
            changed_since_last_visit: changed,
        });
    }

    /// Mean spacing, or `IrregularHistory` if any gap strays more than 1%
    /// from it (or visit times are not strictly increasing).
    pub fn regular_interval(&self) -> Result<f64, RevisitError> {
        if self.visits.is_empty() {
            return Err(RevisitError::DomainError("no visits recorded".into()));
        }
        let mut prev = self.baseline;
        let mut gaps = Vec::with_capacity(self.visits.len());
        for v in &self.visits {
            let gap = v.visit_time - prev;
            if !(gap > 0.0) {
                return Err(RevisitError::IrregularHistory);
            }
            gaps.push(gap);
            prev = v.visit_time;
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        if gaps.iter().any(|g| (g - mean).abs() > 0.01 * mean) {
            return Err(RevisitError::IrregularHistory);
        }
        Ok(mean)
    }

    pub fn estimate(&self) -> Result<f64, RevisitError> {
        let interval = self.regular_interval()?;
        let changes = self.visits.iter().filter(|v| v.changed_since_last_visit).count();
        estimate_change_rate(self.visits.len() as u32, changes as u32, interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RevisitPolicy {
    Uniform,
    Proportional,
    OptimalFreshness,
    OptimalAge,
}

impl fmt::Display for RevisitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RevisitPolicy::Uniform => "uniform",
            RevisitPolicy::Proportional => "proportional",
            RevisitPolicy::OptimalFreshness => "optimal-freshness",
            RevisitPolicy::OptimalAge => "optimal-age",
        })
    }
}

impl FromStr for RevisitPolicy {
    type Err = RevisitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(RevisitPolicy::Uniform),
            "proportional" => Ok(RevisitPolicy::Proportional),
            "optimal-freshness" => Ok(RevisitPolicy::OptimalFreshness),
            "optimal-age" => Ok(RevisitPolicy::OptimalAge),
            other => Err(RevisitError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Frequency grid for the optimal planners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanGrid {
    /// Frequencies considered are `0, step, 2·step, …`.
    pub step: f64,
    /// Age charged to a page that is never revisited is `age(λ, horizon)`.
    pub age_horizon: f64,
}

impl Default for PlanGrid {
    fn default() -> Self {
        PlanGrid {
            step: 0.1,
            age_horizon: 1000.0,
        }
    }
}

/// Freshness contribution of a page visited `f` times per unit time. A page
/// never revisited is fresh only if it never changes.
pub fn freshness_at(lambda: f64, f: f64) -> f64 {
    if f <= 0.0 {
        return if lambda == 0.0 { 1.0 } else { 0.0 };
    }
    expected_freshness(lambda, 1.0 / f).unwrap_or(0.0)
}

/// Age contribution of a page visited `f` times per unit time, with the
/// never-revisited case capped at `horizon`.
pub fn age_at(lambda: f64, f: f64, horizon: f64) -> f64 {
    let interval = if f <= 0.0 { horizon } else { (1.0 / f).min(horizon) };
    expected_age(lambda, interval).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisitPlan {
    pub policy: RevisitPolicy,
    pub frequencies: Vec<f64>,
    pub budget: f64,
    pub predicted_freshness: f64,
    pub predicted_age: f64,
}

impl RevisitPlan {
    fn build(policy: RevisitPolicy, lambdas: &[f64], frequencies: Vec<f64>, budget: f64, grid: &PlanGrid) -> Self {
        let n = lambdas.len().max(1) as f64;
        let predicted_freshness = lambdas
            .iter()
            .zip(&frequencies)
            .map(|(&l, &f)| freshness_at(l, f))
            .sum::<f64>()
            / n;
        let predicted_age = lambdas
            .iter()
            .zip(&frequencies)
            .map(|(&l, &f)| age_at(l, f, grid.age_horizon))
            .sum::<f64>()
            / n;
        RevisitPlan {
            policy,
            frequencies,
            budget,
            predicted_freshness,
            predicted_age,
        }
    }

    /// `page_id,lambda,frequency,predicted_freshness`, one row per page.
    pub fn to_csv(&self, page_ids: &[String], lambdas: &[f64]) -> String {
        let mut out = String::from("page_id,lambda,frequency,predicted_freshness\n");
        for (i, (&l, &f)) in lambdas.iter().zip(&self.frequencies).enumerate() {
            let id = page_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            out.push_str(&format!("{id},{l},{f},{:.6}\n", freshness_at(l, f)));
        }
        out
    }
}

pub fn plan_revisits(
    policy: RevisitPolicy,
    lambdas: &[f64],
    budget: f64,
    grid: &PlanGrid,
) -> Result<RevisitPlan, RevisitError> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(RevisitError::BudgetError(budget));
    }
    for &l in lambdas {
        check_domain(l, 1.0)?;
    }
    if !(grid.step > 0.0) || !(grid.age_horizon > 0.0) {
        return Err(RevisitError::DomainError("grid step and horizon must be > 0".into()));
    }
    let n = lambdas.len();
    let frequencies = match policy {
        RevisitPolicy::Uniform => vec![budget / n.max(1) as f64; n],
        RevisitPolicy::Proportional => {
            let total: f64 = lambdas.iter().sum();
            if total == 0.0 {
                vec![0.0; n]
            } else {
                lambdas.iter().map(|l| budget * l / total).collect()
            }
        }
        RevisitPolicy::OptimalFreshness => {
            let units = grid_units(budget, grid.step);
            let scores = |i: usize, k: usize| freshness_at(lambdas[i], k as f64 * grid.step);
            allocate(n, units, scores)
                .into_iter()
                .map(|k| k as f64 * grid.step)
                .collect()
        }
        RevisitPolicy::OptimalAge => {
            let units = grid_units(budget, grid.step);
            let scores = |i: usize, k: usize| -age_at(lambdas[i], k as f64 * grid.step, grid.age_horizon);
            allocate(n, units, scores)
                .into_iter()
                .map(|k| k as f64 * grid.step)
                .collect()
        }
    };
    Ok(RevisitPlan::build(policy, lambdas, frequencies, budget, grid))
}

fn grid_units(budget: f64, step: f64) -> usize {
    (budget / step + 1e-9).floor() as usize
}

#[derive(Debug, PartialEq)]
struct Gain {
    value: f64,
    page: usize,
}

impl Eq for Gain {}

impl PartialOrd for Gain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gain {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.page.cmp(&self.page))
    }
}

/// Maximizes `Σ score(i, k_i)` subject to `Σ k_i ≤ units` over integer
/// `k_i ≥ 0`. Greedy when every per-page score sequence has nonincreasing
/// increments, dynamic programming otherwise.
fn allocate(n: usize, units: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let table: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..=units).map(|k| score(i, k)).collect())
        .collect();
    let concave = table.iter().all(|row| {
        row.windows(3)
            .all(|w| (w[2] - w[1]) <= (w[1] - w[0]) + 1e-12 * (1.0 + w[1].abs()))
    });
    if concave {
        allocate_greedy(&table, units)
    } else {
        allocate_dp(&table, units)
    }
}

fn allocate_greedy(table: &[Vec<f64>], units: usize) -> Vec<usize> {
    let n = table.len();
    let mut k = vec![0usize; n];
    let mut heap: BinaryHeap<Gain> = (0..n)
        .filter(|_| units > 0)
        .map(|i| Gain {
            value: table[i][1] - table[i][0],
            page: i,
        })
        .collect();
    let mut spent = 0;
    while spent < units {
        let Some(best) = heap.pop() else { break };
        if best.value <= 0.0 {
            break;
        }
        let i = best.page;
        k[i] += 1;
        spent += 1;
        if k[i] < units {
            heap.push(Gain {
                value: table[i][k[i] + 1] - table[i][k[i]],
                page: i,
            });
        }
    }
    k
}

fn allocate_dp(table: &[Vec<f64>], units: usize) -> Vec<usize> {
    let n = table.len();
    // best[j] = max total over the pages processed so far using at most j units.
    let mut best = vec![0.0f64; units + 1];
    let mut choice = vec![vec![0usize; units + 1]; n];
    for i in 0..n {
        let mut next = vec![f64::NEG_INFINITY; units + 1];
        for j in 0..=units {
            for k in 0..=j {
                let v = best[j - k] + table[i][k];
                if v > next[j] {
                    next[j] = v;
                    choice[i][j] = k;
                }
            }
        }
        best = next;
    }
    let mut k = vec![0usize; n];
    let mut j = units;
    for i in (0..n).rev() {
        k[i] = choice[i][j];
        j -= k[i];
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEvaluation {
    pub avg_freshness: f64,
    pub freshness_stderr: f64,
    pub avg_age: f64,
    pub age_stderr: f64,
}

const BATCHES: usize = 20;

/// Batched time integrals of freshness and age for one simulation run.
struct Integrals {
    horizon: f64,
    fresh: [f64; BATCHES],
    age: [f64; BATCHES],
}

impl Integrals {
    fn new(horizon: f64) -> Self {
        Integrals {
            horizon,
            fresh: [0.0; BATCHES],
            age: [0.0; BATCHES],
        }
    }

    fn batch_len(&self) -> f64 {
        self.horizon / BATCHES as f64
    }

    /// Adds the interval `[a, b)`: fresh if `stale_since` is `None`, else
    /// stale with age `t - stale_since`.
    fn add(&mut self, a: f64, b: f64, stale_since: Option<f64>) {
        let w = self.batch_len();
        let mut start = a;
        while start < b {
            let idx = ((start / w) as usize).min(BATCHES - 1);
            let end = b.min((idx + 1) as f64 * w);
            let end = if idx == BATCHES - 1 { b } else { end };
            match stale_since {
                None => self.fresh[idx] += end - start,
                Some(s) => {
                    self.age[idx] += ((end - s).powi(2) - (start - s).powi(2)) / 2.0;
                }
            }
            start = end;
        }
    }
}

/// Simulates every page over `[0, horizon)`: Poisson changes at rate λ_i,
/// revisits every `1/f_i` starting at a random phase, all copies fresh at
/// time 0. Returns collection-averaged freshness and age with standard errors
/// from 20 batch means.
pub fn evaluate_plan(plan: &RevisitPlan, lambdas: &[f64], horizon: f64, seed: u64) -> PlanEvaluation {
    evaluate_frequencies(&plan.frequencies, lambdas, horizon, seed)
}

pub fn evaluate_frequencies(frequencies: &[f64], lambdas: &[f64], horizon: f64, seed: u64) -> PlanEvaluation {
    assert!(horizon > 0.0, "horizon must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = Integrals::new(horizon);
    for (&lambda, &f) in lambdas.iter().zip(frequencies) {
        let mut next_change = if lambda > 0.0 {
            exp_sample(&mut rng, lambda)
        } else {
            f64::INFINITY
        };
        let mut next_visit = if f > 0.0 {
            rng.gen::<f64>() / f
        } else {
            f64::INFINITY
        };
        let mut t = 0.0;
        let mut stale_since: Option<f64> = None;
        while t < horizon {
            let event = next_change.min(next_visit).min(horizon);
            totals.add(t, event, stale_since);
            t = event;
            if t >= horizon {
                break;
            }
            if next_change <= next_visit {
                if stale_since.is_none() {
                    stale_since = Some(t);
                }
                next_change = t + exp_sample(&mut rng, lambda);
            } else {
                stale_since = None;
                next_visit = t + 1.0 / f;
            }
        }
    }
    let n = lambdas.len().max(1) as f64;
    let w = totals.batch_len();
    let fresh: Vec<f64> = totals.fresh.iter().map(|v| v / (w * n)).collect();
    let age: Vec<f64> = totals.age.iter().map(|v| v / (w * n)).collect();
    let (avg_freshness, freshness_stderr) = mean_and_stderr(&fresh);
    let (avg_age, age_stderr) = mean_and_stderr(&age);
    PlanEvaluation {
        avg_freshness,
        freshness_stderr,
        avg_age,
        age_stderr,
    }
}

fn exp_sample(rng: &mut impl Rng, rate: f64) -> f64 {
    // 1 - u lies in (0, 1], so the log is finite.
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

pub(crate) fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

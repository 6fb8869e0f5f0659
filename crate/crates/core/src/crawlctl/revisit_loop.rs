use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::Seconds;
use crate::fetchnet::{Fetch, Fetcher, Outcome};
use crate::governor::{HostLedger, SlotDecision};
use crate::parsekit::fingerprint;
use crate::revisit::{estimate_change_rate, plan_revisits, RevisitError, RevisitPolicy};
use crate::simweb::{body_version, SimWeb};
use crate::store::{PageMeta, PageRepo};
use crate::urlkit::CanonicalUrl;

use super::config::{CrawlConfig, LambdaSource, RevisitSettings};
use super::{CrawlEnv, CrawlError};

const BATCHES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RevisitReport {
    pub policy: RevisitPolicy,
    /// Visits per time unit across the collection.
    pub budget: f64,
    pub pages: usize,
    /// Measured span in time units.
    pub horizon: f64,
    pub lambda_source: LambdaSource,
    pub urls: Vec<String>,
    /// Rates the plan was built from.
    pub lambdas: Vec<f64>,
    pub true_lambdas: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub predicted_freshness: f64,
    pub predicted_age: f64,
    pub measured_freshness: f64,
    pub freshness_stderr: f64,
    /// In time units.
    pub measured_age: f64,
    pub age_stderr: f64,
    pub visits: u64,
    pub observation_visits: u64,
    pub samples: u64,
    /// Visits pushed back by the politeness interval.
    pub politeness_delays: u64,
}

impl RevisitReport {
    fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("policy", self.policy.to_string()),
            ("budget", format!("{}", self.budget)),
            ("pages", self.pages.to_string()),
            ("horizon", format!("{}", self.horizon)),
            (
                "lambda_source",
                match self.lambda_source {
                    LambdaSource::True => "true".into(),
                    LambdaSource::Estimated => "estimated".into(),
                },
            ),
            ("predicted_freshness", format!("{:.6}", self.predicted_freshness)),
            ("measured_freshness", format!("{:.6}", self.measured_freshness)),
            ("freshness_stderr", format!("{:.6}", self.freshness_stderr)),
            ("predicted_age", format!("{:.6}", self.predicted_age)),
            ("measured_age", format!("{:.6}", self.measured_age)),
            ("age_stderr", format!("{:.6}", self.age_stderr)),
            ("visits", self.visits.to_string()),
            ("observation_visits", self.observation_visits.to_string()),
            ("samples", self.samples.to_string()),
            ("politeness_delays", self.politeness_delays.to_string()),
        ]
    }

    /// Writes `revisit_report.csv` and `revisit_plan.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(), CrawlError> {
        let err = |e: csv::Error| CrawlError::Report(e.to_string());
        let mut w = csv::Writer::from_path(dir.join("revisit_report.csv")).map_err(err)?;
        w.write_record(["key", "value"]).map_err(err)?;
        for (k, v) in self.rows() {
            w.write_record([k, v.as_str()]).map_err(err)?;
        }
        w.flush().map_err(|e| CrawlError::Report(e.to_string()))?;

        let mut w = csv::Writer::from_path(dir.join("revisit_plan.csv")).map_err(err)?;
        w.write_record(["url", "true_lambda", "lambda", "frequency"]).map_err(err)?;
        for i in 0..self.pages {
            w.write_record([
                self.urls[i].clone(),
                self.true_lambdas[i].to_string(),
                self.lambdas[i].to_string(),
                self.frequencies[i].to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| CrawlError::Report(e.to_string()))
    }
}

impl fmt::Display for RevisitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "revisit report")?;
        for (k, v) in self.rows() {
            writeln!(f, "  {k:<22} {v}")?;
        }
        Ok(())
    }
}

/// Runs the revisit loop in the environment the config describes, with the
/// config's revisit settings.
pub async fn run_revisit_loop(cfg: &CrawlConfig, settings: &RevisitSettings) -> Result<RevisitReport, CrawlError> {
    let (env, server) = CrawlEnv::start(cfg).await?;
    let result = run_revisit_loop_in(cfg, &env, settings).await;
    if let Some(server) = server {
        server.shutdown().await;
    }
    let report = result?;
    report.write_csv(&cfg.run_dir)?;
    Ok(report)
}

/// Re-fetches the stored collection per a revisit plan while the simulated
/// web changes, sampling freshness and age on a fixed grid.
pub async fn run_revisit_loop_in(
    cfg: &CrawlConfig,
    env: &CrawlEnv,
    settings: &RevisitSettings,
) -> Result<RevisitReport, CrawlError> {
    let web = env
        .web
        .clone()
        .ok_or_else(|| CrawlError::RunDir("the revisit loop needs an embedded simweb".into()))?;
    if !env.clock.is_simulated() {
        return Err(CrawlError::RunDir("the revisit loop needs `clock simulated`".into()));
    }
    let mut repo = PageRepo::open(&cfg.run_dir)?;
    let mut pages = Vec::new();
    let mut latest_fetch = f64::NEG_INFINITY;
    let mut ahead = 0;
    for rec in repo.live_records() {
        latest_fetch = latest_fetch.max(rec.fetched_at);
        if !(200..300).contains(&rec.status) {
            continue;
        }
        let Some(id) = web.page_id(&rec.url) else { continue };
        let Some(version) = body_version(&repo.read_body(rec)?) else { continue };
        let live = web.version(id);
        if version > live {
            ahead += 1;
        }
        pages.push(Tracked {
            id,
            url: rec.url.clone(),
            held: version.min(live),
            depth: rec.depth,
        });
    }
    if ahead > 0 {
        warn!("{ahead} stored copies are newer than the simulated web (an earlier simulation); treating them as current");
    }
    if pages.is_empty() {
        return Err(CrawlError::NoBaseline);
    }
    pages.sort_by_key(|p| p.id);
    pages.dedup_by_key(|p| p.id);
    let n = pages.len();
    let budget = settings.budget.unwrap_or(n as f64);
    if latest_fetch.is_finite() {
        env.clock.advance_to(latest_fetch + cfg.host_interval);
    }

    let fetcher = Fetcher::new(cfg.fetch.clone(), env.hosts.clone(), env.clock.clone())?;
    let true_lambdas: Vec<f64> = pages.iter().map(|p| web.graph().pages[p.id].lambda).collect();
    let mut sim = Sim {
        cfg,
        web,
        fetcher,
        repo: &mut repo,
        ledger: HostLedger::new(),
        pages,
        t0: env.clock.now(),
        now: 0.0,
        unit: cfg.simweb.as_ref().map_or(1.0, |s| s.time_unit),
        seed: settings.seed,
        steps: 0,
        delays: 0,
    };

    let mut observation_visits = 0;
    let lambdas = match settings.lambda_source {
        LambdaSource::True => true_lambdas.clone(),
        LambdaSource::Estimated => {
            let (est, visits) = sim.observe(budget, settings.observe_visits).await?;
            observation_visits = visits;
            est
        }
    };
    let plan = plan_revisits(settings.policy, &lambdas, budget, &settings.grid)?;
    info!(
        "revisit plan {}: predicted freshness {:.4}, age {:.4}",
        settings.policy, plan.predicted_freshness, plan.predicted_age
    );
    let measured = sim.run(&plan.frequencies, settings).await?;

    Ok(RevisitReport {
        policy: settings.policy,
        budget,
        pages: n,
        horizon: settings.horizon,
        lambda_source: settings.lambda_source,
        urls: sim.pages.iter().map(|p| p.url.render()).collect(),
        lambdas,
        true_lambdas,
        frequencies: plan.frequencies.clone(),
        predicted_freshness: plan.predicted_freshness,
        predicted_age: plan.predicted_age,
        measured_freshness: measured.freshness,
        freshness_stderr: measured.freshness_se,
        measured_age: measured.age,
        age_stderr: measured.age_se,
        visits: measured.visits,
        observation_visits,
        samples: measured.samples,
        politeness_delays: sim.delays,
    })
}

#[derive(Debug)]
struct Tracked {
    id: usize,
    url: CanonicalUrl,
    held: u64,
    depth: u32,
}

struct Measured {
    freshness: f64,
    freshness_se: f64,
    age: f64,
    age_se: f64,
    visits: u64,
    samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Sample,
    /// Page index and its nominal (undelayed) time, as bits.
    Visit(usize, u64),
}

enum Visit {
    Done { changed: bool },
    RetryAt(f64),
}

struct Sim<'a> {
    cfg: &'a CrawlConfig,
    web: Arc<SimWeb>,
    fetcher: Fetcher,
    repo: &'a mut PageRepo,
    ledger: HostLedger,
    pages: Vec<Tracked>,
    /// Clock reading at time unit zero.
    t0: Seconds,
    /// Current time in units.
    now: f64,
    unit: Seconds,
    seed: u64,
    steps: u64,
    delays: u64,
}

impl Sim<'_> {
    fn clock_at(&self, t: f64) -> Seconds {
        self.t0 + t * self.unit
    }

    /// Moves the clock to `t` (units), applying page changes on the way.
    fn advance(&mut self, t: f64) {
        if t <= self.now {
            return;
        }
        let dt = (t - self.now) * self.unit;
        self.web.clock().advance_to(self.clock_at(t));
        self.steps += 1;
        let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.steps;
        self.web.advance_changes(dt, seed);
        self.now = t;
    }

    async fn visit(&mut self, i: usize) -> Result<Visit, CrawlError> {
        let now = self.clock_at(self.now);
        let host = self.pages[i].url.host().to_string();
        match self.ledger.acquire(&host, now, self.cfg.host_interval) {
            SlotDecision::Granted => {}
            SlotDecision::RetryAt(t) => {
                self.delays += 1;
                return Ok(Visit::RetryAt((t - self.t0) / self.unit));
            }
            SlotDecision::Busy => unreachable!("visits are sequential"),
        }
        let result = self.fetcher.fetch(self.pages[i].url.clone()).await;
        self.ledger.release(&host, now);
        let page = &mut self.pages[i];
        let (Outcome::Success, Some(body)) = (&result.outcome, &result.body) else {
            warn!("revisit of {} failed: {}", page.url, result.outcome.label());
            return Ok(Visit::Done { changed: false });
        };
        let version = body_version(body).unwrap_or(page.held);
        let changed = version != page.held;
        page.held = version;
        self.repo.put_page(
            PageMeta {
                url: page.url.clone(),
                fetched_at: result.fetched_at,
                status: result.status.unwrap_or(200),
                fingerprint: fingerprint(body),
                relevance: 0.0,
                depth: page.depth,
            },
            body,
        )?;
        Ok(Visit::Done { changed })
    }

    /// Visits every page `rounds` times at the uniform interval and
    /// estimates its change rate.
    async fn observe(&mut self, budget: f64, rounds: u32) -> Result<(Vec<f64>, u64), CrawlError> {
        let n = self.pages.len();
        let interval = n as f64 / budget;
        let start = self.now;
        let mut heap = BinaryHeap::new();
        for i in 0..n {
            let t = start + interval * (1.0 + i as f64 / n as f64);
            heap.push(Reverse((t.to_bits(), Event::Visit(i, t.to_bits()))));
        }
        let mut changes = vec![0u32; n];
        let mut done = vec![0u32; n];
        let mut visits = 0;
        while let Some(Reverse((bits, event))) = heap.pop() {
            let Event::Visit(i, nominal) = event else { continue };
            self.advance(f64::from_bits(bits));
            match self.visit(i).await? {
                Visit::RetryAt(t) => heap.push(Reverse((t.to_bits(), event))),
                Visit::Done { changed } => {
                    visits += 1;
                    changes[i] += u32::from(changed);
                    done[i] += 1;
                    if done[i] < rounds {
                        let next = f64::from_bits(nominal) + interval;
                        heap.push(Reverse((next.to_bits(), Event::Visit(i, next.to_bits()))));
                    }
                }
            }
        }
        let estimates = (0..n)
            .map(|i| match estimate_change_rate(rounds, changes[i], interval) {
                Ok(l) => Ok(l),
                // Every visit saw a change: report the largest rate this
                // history can resolve.
                Err(RevisitError::Saturated) => Ok((2.0 * rounds as f64).ln() / interval),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>, _>>()?;
        debug!("estimated rates: {estimates:?}");
        Ok((estimates, visits))
    }

    async fn run(&mut self, frequencies: &[f64], settings: &RevisitSettings) -> Result<Measured, CrawlError> {
        let begin = self.now;
        let sample_start = begin + settings.warmup;
        let end = sample_start + settings.horizon;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5EED);
        let mut heap = BinaryHeap::new();
        for (i, &f) in frequencies.iter().enumerate() {
            if f > 0.0 {
                let t = begin + rng.gen::<f64>() / f;
                heap.push(Reverse((t.to_bits(), Event::Visit(i, t.to_bits()))));
            }
        }
        heap.push(Reverse((sample_start.to_bits(), Event::Sample)));

        let n = self.pages.len() as f64;
        let batch_len = settings.horizon / BATCHES as f64;
        let mut fresh_sum = [0.0; BATCHES];
        let mut age_sum = [0.0; BATCHES];
        let mut count = [0u64; BATCHES];
        let mut samples = 0u64;
        let mut visits = 0u64;
        let mut k = 0u64;
        while let Some(Reverse((bits, event))) = heap.pop() {
            let t = f64::from_bits(bits);
            if t >= end {
                break;
            }
            self.advance(t);
            match event {
                Event::Sample => {
                    let at = self.clock_at(t);
                    let (mut fresh, mut age) = (0.0, 0.0);
                    for p in &self.pages {
                        let (f, a) = self.web.probe(p.id, p.held, at);
                        fresh += f64::from(u8::from(f));
                        age += a / self.unit;
                    }
                    let b = (((t - sample_start) / batch_len) as usize).min(BATCHES - 1);
                    fresh_sum[b] += fresh / n;
                    age_sum[b] += age / n;
                    count[b] += 1;
                    samples += 1;
                    k += 1;
                    let next = sample_start + k as f64 * settings.sample_step;
                    heap.push(Reverse((next.to_bits(), Event::Sample)));
                }
                Event::Visit(i, nominal) => match self.visit(i).await? {
                    Visit::RetryAt(r) => heap.push(Reverse((r.to_bits(), event))),
                    Visit::Done { .. } => {
                        visits += 1;
                        let next = f64::from_bits(nominal) + 1.0 / frequencies[i];
                        heap.push(Reverse((next.to_bits(), Event::Visit(i, next.to_bits()))));
                    }
                },
            }
        }
        self.advance(end);
        self.repo.flush()?;
        let means = |sums: &[f64; BATCHES]| -> Vec<f64> {
            sums.iter()
                .zip(&count)
                .filter(|(_, &c)| c > 0)
                .map(|(s, &c)| s / c as f64)
                .collect()
        };
        let (freshness, freshness_se) = crate::revisit::mean_and_stderr(&means(&fresh_sum));
        let (age, age_se) = crate::revisit::mean_and_stderr(&means(&age_sum));
        Ok(Measured {
            freshness,
            freshness_se,
            age,
            age_se,
            visits,
            samples,
        })
    }
}

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::Serialize;
use tokio::sync::mpsc;

use crate::clock::{Clock, Seconds};
use crate::fetchnet::{run_downloader_pool, FetchResult, Fetcher, Outcome, PostFetch};
use crate::frontier::{CrawlRequest, Frontier, SeqCounter};
use crate::governor::{
    should_stop, HostLedger, Progress, RateGate, SlotDecision, StopDecision, StopReason, TokenBucket,
};
use crate::parsekit::{analyze, fingerprint, Fingerprint, PageAnalysis};
use crate::store::{list_checkpoints, load_latest, recover, write_checkpoint, Checkpoint, PageMeta, PageRepo};
use crate::urlkit::{CanonicalUrl, SeenSet};

use super::config::{is_local_host, CrawlConfig};
use super::report::CrawlReport;
use super::{CrawlEnv, CrawlError};

/// Checkpoints kept on disk.
const KEEP_CHECKPOINTS: usize = 2;
/// Frontier entries examined per dispatch round.
const SCAN_LIMIT: usize = 10_000;
const EPS: Seconds = 1e-9;

/// One completed fetch, as written to `crawl_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FetchLogRow {
    pub dispatch_index: u64,
    pub url: String,
    pub host: String,
    pub depth: u32,
    pub priority: f64,
    pub seq: u64,
    pub dispatched_at: Seconds,
    pub completed_at: Seconds,
    pub outcome: String,
    pub status: u16,
    pub bytes: usize,
    pub relevance: f64,
    pub duplicate: bool,
    pub new_links: usize,
}

/// Runs a crawl in the environment its config describes.
pub async fn run_crawl(cfg: &CrawlConfig, resume: bool) -> Result<CrawlReport, CrawlError> {
    let (env, server) = CrawlEnv::start(cfg).await?;
    let result = run_crawl_in(cfg, &env, resume).await;
    if let (Some(server), Some(web)) = (server, env.web.as_ref()) {
        if result.is_ok() {
            web.write_log_csv(&cfg.run_dir.join("requests.csv"))?;
        }
        server.shutdown().await;
    }
    result
}

/// Runs a crawl against an existing environment. Writes `report.csv` and
/// `crawl_log.csv` into the run directory unless the run was halted.
pub async fn run_crawl_in(cfg: &CrawlConfig, env: &CrawlEnv, resume: bool) -> Result<CrawlReport, CrawlError> {
    for seed in &cfg.seeds {
        if !is_local_host(seed.host()) && env.hosts.route_for(seed.host()).is_none() {
            warn!(
                "crawling non-local host {}: robots.txt is NOT consulted, only the politeness interval applies",
                seed.host()
            );
        }
    }
    std::fs::create_dir_all(&cfg.run_dir)
        .map_err(|e| CrawlError::RunDir(format!("{}: {e}", cfg.run_dir.display())))?;
    let repo = PageRepo::open(&cfg.run_dir)?;
    let truncated = repo.open_report().truncated_bytes;
    if truncated > 0 {
        warn!("discarded {truncated} bytes of torn records at the end of the page log");
    }
    let mut master = if resume {
        Master::resumed(cfg, env, repo)?
    } else {
        if !repo.is_empty() || !list_checkpoints(&cfg.run_dir)?.is_empty() {
            return Err(CrawlError::RunDir(format!(
                "{} already holds a crawl; pass --resume or use a fresh run_dir",
                cfg.run_dir.display()
            )));
        }
        Master::fresh(cfg, env, repo)
    };
    master.checkpoint()?;

    let fetcher = Arc::new(Fetcher::new(cfg.fetch.clone(), env.hosts.clone(), env.clock.clone())?);
    let hook = Arc::new(Analyze {
        topic: Arc::new(cfg.topic.clone()),
    });
    let (work_tx, work_rx) = async_channel::bounded(cfg.downloaders);
    let (done_tx, mut done_rx) = mpsc::unbounded_channel();
    let pool = run_downloader_pool(cfg.downloaders, work_rx, done_tx, fetcher, hook, env.clock.clone());

    let outcome = master.run(&work_tx, &mut done_rx).await;
    drop(work_tx);
    let reason = match outcome {
        Ok(reason) => reason,
        Err(e) => {
            if let Err(ce) = master.checkpoint() {
                warn!("best-effort checkpoint failed: {ce}");
            }
            return Err(e);
        }
    };
    if reason == StopReason::Halted {
        // Simulated crash: in-flight work is abandoned and no final
        // checkpoint is written.
        drop(done_rx);
        drop(pool);
    } else {
        master.checkpoint()?;
        drop(done_rx);
        pool.join().await;
    }
    master.repo.flush()?;
    let report = master.report(reason);
    if reason != StopReason::Halted {
        report.write_csv(&cfg.run_dir)?;
    }
    info!(
        "crawl stopped ({}): {} pages, {} unique",
        reason, report.pages_fetched, report.unique_fingerprints
    );
    Ok(report)
}

/// A fetch result plus the page analysis, computed on the downloader.
#[derive(Debug)]
struct Completed {
    request: CrawlRequest,
    result: FetchResult,
    analysis: Option<PageAnalysis>,
}

struct Analyze {
    topic: Arc<Vec<String>>,
}

impl PostFetch for Analyze {
    type Output = Completed;

    async fn after_fetch(&self, request: CrawlRequest, result: FetchResult) -> Completed {
        let analysis = match (&result.outcome, &result.body) {
            (Outcome::Success, Some(body)) => Some(analyze(body, result.final_url(), &self.topic)),
            _ => None,
        };
        Completed {
            request,
            result,
            analysis,
        }
    }
}

#[derive(Debug)]
struct InFlight {
    request: CrawlRequest,
    index: u64,
    at: Seconds,
}

struct Master<'a> {
    cfg: &'a CrawlConfig,
    clock: Arc<dyn Clock>,
    repo: PageRepo,
    frontier: Frontier,
    seen: SeenSet,
    ledger: HostLedger,
    seq: SeqCounter,
    bucket: TokenBucket,
    in_flight: HashMap<u64, InFlight>,
    retried: BTreeSet<CanonicalUrl>,
    fingerprints: HashSet<Fingerprint>,
    fail_streak: HashMap<String, u32>,
    quarantined: BTreeSet<String>,
    last_end: HashMap<String, Seconds>,
    recrawl_watch: HashSet<CanonicalUrl>,

    pages: u64,
    duplicates: u64,
    outcomes: BTreeMap<String, u64>,
    max_depth: u32,
    retries: u64,
    violations: u64,
    recrawled: u64,
    dispatched: u64,
    elapsed_base: Seconds,

    ckpt_version: u64,
    ckpt_pages: u64,
    ckpt_time: Seconds,
    checkpoints_written: u64,
    halt_at: Option<u64>,
    session_pages: u64,
    started: Seconds,
    wall: Instant,
    resumed: bool,
    log: Vec<FetchLogRow>,
}

impl<'a> Master<'a> {
    fn base(cfg: &'a CrawlConfig, env: &CrawlEnv, repo: PageRepo) -> Self {
        let now = env.clock.now();
        Master {
            cfg,
            clock: env.clock.clone(),
            repo,
            frontier: Frontier::new(cfg.frontier_capacity),
            seen: SeenSet::new(),
            ledger: HostLedger::new(),
            seq: SeqCounter::default(),
            bucket: TokenBucket::new(cfg.rate_profile.current_rate(now, cfg.timezone_offset)),
            in_flight: HashMap::new(),
            retried: BTreeSet::new(),
            fingerprints: HashSet::new(),
            fail_streak: HashMap::new(),
            quarantined: BTreeSet::new(),
            last_end: HashMap::new(),
            recrawl_watch: HashSet::new(),
            pages: 0,
            duplicates: 0,
            outcomes: BTreeMap::new(),
            max_depth: 0,
            retries: 0,
            violations: 0,
            recrawled: 0,
            dispatched: 0,
            elapsed_base: 0.0,
            ckpt_version: 0,
            ckpt_pages: 0,
            ckpt_time: now,
            checkpoints_written: 0,
            halt_at: cfg.halt_after_pages,
            session_pages: 0,
            started: now,
            wall: Instant::now(),
            resumed: false,
            log: Vec::new(),
        }
    }

    fn fresh(cfg: &'a CrawlConfig, env: &CrawlEnv, repo: PageRepo) -> Self {
        let m = Self::base(cfg, env, repo);
        for url in &cfg.seeds {
            if m.seen.check_insert(url) {
                m.frontier.dispatch.push(CrawlRequest::new(url.clone(), 1.0, 0, m.seq.next()));
            }
        }
        m
    }

    fn resumed(cfg: &'a CrawlConfig, env: &CrawlEnv, repo: PageRepo) -> Result<Self, CrawlError> {
        let loaded = load_latest(&cfg.run_dir)?
            .ok_or_else(|| CrawlError::RunDir(format!("{} has no checkpoint to resume from", cfg.run_dir.display())))?;
        for skipped in &loaded.skipped {
            warn!("skipping unusable checkpoint: {skipped}");
        }
        let ck = loaded.checkpoint;
        if ck.config_digest != cfg.digest {
            return Err(CrawlError::ConfigMismatch {
                found: ck.config_digest_hex(),
                expected: cfg.digest_hex(),
            });
        }
        let state = recover(&ck, &repo, cfg.frontier_capacity);
        info!(
            "resuming from {} (version {}): {} queued, {} to recrawl, {} pages stored since",
            loaded.path.display(),
            ck.version,
            state.frontier.len(),
            state.recrawl.len(),
            state.records_after_checkpoint
        );
        let records = repo.records();
        let split = (ck.repo_records as usize).min(records.len());
        let fingerprints = records[..split]
            .iter()
            .filter(|r| (200..300).contains(&r.status))
            .map(|r| r.fingerprint)
            .collect();
        let recrawl_watch = records[split..].iter().map(|r| r.url.clone()).collect();
        let mut resume_at = ck.created_at;
        for r in &records[split..] {
            state.ledger.note_contact(r.url.host(), r.fetched_at);
            resume_at = resume_at.max(r.fetched_at);
        }
        if env.clock.is_simulated() {
            // Requests dispatched after the last stored page are unknown, so
            // leave every host one full interval of quiet.
            env.clock.advance_to(resume_at + cfg.host_interval);
        }
        state.frontier.dispatch.push_all(state.recrawl.iter().cloned());

        let mut m = Self::base(cfg, env, repo);
        m.frontier = state.frontier;
        m.seen = state.seen;
        m.ledger = state.ledger;
        m.seq = SeqCounter::starting_at(state.next_seq);
        m.retried = state.retried;
        m.fingerprints = fingerprints;
        m.recrawl_watch = recrawl_watch;
        m.ckpt_version = ck.version;
        m.resumed = true;
        let counter = |name: &str| ck.counter(name);
        m.pages = counter("pages");
        m.duplicates = counter("duplicates");
        m.max_depth = counter("max_depth") as u32;
        m.retries = counter("retries");
        m.violations = counter("violations");
        m.recrawled = counter("recrawled");
        m.dispatched = counter("dispatched");
        m.elapsed_base = counter("elapsed_ms") as f64 / 1000.0;
        m.ckpt_pages = m.pages;
        for (name, v) in &ck.counters {
            if let Some(label) = name.strip_prefix("outcome:") {
                m.outcomes.insert(label.to_string(), *v);
            }
        }
        Ok(m)
    }

    fn elapsed(&self) -> Seconds {
        self.elapsed_base + (self.clock.now() - self.started).max(0.0)
    }

    /// Shallowest pending depth. Without a depth limit only emptiness
    /// matters, so the queues are not scanned.
    fn min_depth(&self) -> Option<u32> {
        if self.cfg.stop.max_depth.is_none() {
            let empty = self.frontier.is_empty() && self.in_flight.is_empty();
            return (!empty).then_some(0);
        }
        let queued = self.frontier.dispatch.min_depth();
        let intake = self.frontier.intake.min_of(|r| r.depth);
        let flying = self.in_flight.values().map(|f| f.request.depth).min();
        [queued, intake, flying].into_iter().flatten().min()
    }

    async fn run(
        &mut self,
        work: &async_channel::Sender<CrawlRequest>,
        done: &mut mpsc::UnboundedReceiver<Completed>,
    ) -> Result<StopReason, CrawlError> {
        let simulated = self.clock.is_simulated();
        loop {
            self.frontier.promote();
            let progress = Progress {
                pages_fetched: self.pages,
                elapsed: self.elapsed(),
                frontier_min_depth: self.min_depth(),
            };
            if let StopDecision::Stop(reason) = should_stop(&progress, &self.cfg.stop) {
                if self.drain(done).await? {
                    return Ok(StopReason::Halted);
                }
                return Ok(reason);
            }

            let round = self.dispatch(work).await;
            if self.in_flight.is_empty() {
                match round.wake {
                    Some(t) => {
                        let wait = self.clock.advance_to(t);
                        if !wait.is_zero() {
                            tokio::time::sleep(wait).await;
                        }
                    }
                    None if round.dropped > 0 => {}
                    None => {
                        warn!("no dispatchable work and nothing to wait for");
                        return Ok(StopReason::FrontierExhausted);
                    }
                }
                continue;
            }

            if simulated {
                // The clock stands still while fetches run, so finishing the
                // whole batch before acting keeps the run deterministic.
                if self.absorb_batch(done).await? {
                    return Ok(StopReason::Halted);
                }
            } else {
                let first = match round.wake {
                    Some(t) => {
                        let d = Duration::from_secs_f64((t - self.clock.now()).max(0.0));
                        tokio::select! {
                            r = done.recv() => Some(r),
                            _ = tokio::time::sleep(d) => None,
                        }
                    }
                    None => Some(done.recv().await),
                };
                let Some(first) = first else { continue };
                let first = first.ok_or_else(pool_gone)?;
                if self.absorb(first)? {
                    return Ok(StopReason::Halted);
                }
                while let Ok(more) = done.try_recv() {
                    if self.absorb(more)? {
                        return Ok(StopReason::Halted);
                    }
                }
            }
        }
    }

    /// Waits for every in-flight fetch and absorbs the results in dispatch
    /// order. Returns true if the run halted part-way.
    async fn absorb_batch(&mut self, done: &mut mpsc::UnboundedReceiver<Completed>) -> Result<bool, CrawlError> {
        let mut batch = Vec::with_capacity(self.in_flight.len());
        while batch.len() < self.in_flight.len() {
            batch.push(done.recv().await.ok_or_else(pool_gone)?);
        }
        batch.sort_by_key(|c| self.in_flight.get(&c.request.seq).map_or(u64::MAX, |f| f.index));
        for c in batch {
            if self.absorb(c)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    async fn drain(&mut self, done: &mut mpsc::UnboundedReceiver<Completed>) -> Result<bool, CrawlError> {
        if self.clock.is_simulated() {
            return self.absorb_batch(done).await;
        }
        while !self.in_flight.is_empty() {
            let c = done.recv().await.ok_or_else(pool_gone)?;
            if self.absorb(c)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    async fn dispatch(&mut self, work: &async_channel::Sender<CrawlRequest>) -> Round {
        let mut round = Round::default();
        let mut room = self.cfg.downloaders.saturating_sub(self.in_flight.len()) as u64;
        if let Some(max) = self.cfg.stop.max_pages {
            room = room.min(max.saturating_sub(self.pages + self.in_flight.len() as u64));
        }
        if room == 0 {
            return round;
        }
        let now = self.clock.now();
        let interval = self.cfg.host_interval;
        self.bucket
            .set_rate(self.cfg.rate_profile.current_rate(now, self.cfg.timezone_offset), now);
        let mut parked = Vec::new();
        let mut blocked: HashSet<String> = HashSet::new();
        let mut scanned = 0;
        while round.sent < room && scanned < SCAN_LIMIT {
            let Some(req) = self.frontier.dispatch.pop() else { break };
            scanned += 1;
            let host = req.url.host();
            if self.quarantined.contains(host) {
                debug!("dropping {} (host quarantined)", req.url);
                round.dropped += 1;
                continue;
            }
            if self.cfg.stop.max_depth.is_some_and(|m| req.depth > m) || blocked.contains(host) {
                parked.push(req);
                continue;
            }
            let wait = self.bucket.ready_in(now);
            if wait > 0.0 {
                round.wake = earliest(round.wake, now + wait);
                parked.push(req);
                break;
            }
            match self.ledger.acquire(host, now, interval) {
                SlotDecision::Granted => {
                    let gate = self.bucket.gate(now);
                    debug_assert_eq!(gate, RateGate::Proceed);
                    if self.last_end.get(host).is_some_and(|end| now + EPS < end + interval) {
                        self.violations += 1;
                    }
                    self.in_flight.insert(
                        req.seq,
                        InFlight {
                            request: req.clone(),
                            index: self.dispatched,
                            at: now,
                        },
                    );
                    self.dispatched += 1;
                    round.sent += 1;
                    if work.send(req).await.is_err() {
                        break;
                    }
                }
                SlotDecision::RetryAt(t) => {
                    round.wake = earliest(round.wake, t);
                    blocked.insert(host.to_string());
                    parked.push(req);
                }
                SlotDecision::Busy => {
                    blocked.insert(host.to_string());
                    parked.push(req);
                }
            }
        }
        self.frontier.dispatch.push_all(parked);
        round
    }

    /// Handles one finished fetch. Returns true when the run should halt.
    fn absorb(&mut self, done: Completed) -> Result<bool, CrawlError> {
        let Completed {
            request,
            result,
            analysis,
        } = done;
        let Some(flight) = self.in_flight.remove(&request.seq) else {
            warn!("result for unknown request {}", request.url);
            return Ok(false);
        };
        let now = self.clock.now();
        let host = request.url.host().to_string();
        self.ledger.release(&host, now);
        self.last_end.insert(host.clone(), now);

        self.pages += 1;
        self.session_pages += 1;
        *self.outcomes.entry(result.outcome.label().to_string()).or_default() += 1;
        self.max_depth = self.max_depth.max(request.depth);
        if self.recrawl_watch.remove(&request.url) {
            self.recrawled += 1;
        }

        let empty: &[u8] = &[];
        let (body, fp, relevance) = match (&analysis, &result.body) {
            (Some(a), Some(body)) => (body.as_slice(), a.fingerprint, a.relevance),
            _ => (empty, fingerprint(empty), 0.0),
        };
        let duplicate = analysis.is_some() && !self.fingerprints.insert(fp);
        if duplicate {
            self.duplicates += 1;
        }
        let stored_url = if analysis.is_some() {
            result.final_url().clone()
        } else {
            request.url.clone()
        };
        let status = match result.outcome {
            Outcome::Success | Outcome::Redirect(_) | Outcome::ClientError(_) | Outcome::ServerError(_) => {
                result.status.unwrap_or(0)
            }
            _ => 0,
        };
        self.repo.put_page(
            PageMeta {
                url: stored_url,
                fetched_at: result.fetched_at,
                status,
                fingerprint: fp,
                relevance,
                depth: request.depth,
            },
            body,
        )?;

        for hop in &result.redirects {
            self.seen.check_insert(hop);
        }
        let mut children = Vec::new();
        if let Some(a) = &analysis {
            for link in &a.links {
                if self.seen.check_insert(link) {
                    children.push(CrawlRequest::new(link.clone(), a.relevance, request.depth + 1, self.seq.next()));
                }
            }
        }
        if let Outcome::Redirect(target) = &result.outcome {
            if self.seen.check_insert(target) {
                children.push(CrawlRequest::new(target.clone(), request.priority, request.depth, self.seq.next()));
            }
        }
        let new_links = children.len();
        self.deposit(children);

        let transient = result.outcome.is_transient();
        if transient && self.retried.insert(request.url.clone()) {
            self.retries += 1;
            self.frontier
                .dispatch
                .push(CrawlRequest::new(request.url.clone(), 0.0, request.depth, self.seq.next()));
        }
        if transient || matches!(result.outcome, Outcome::NetworkError(_)) {
            let streak = self.fail_streak.entry(host.clone()).or_default();
            *streak += 1;
            if *streak >= self.cfg.quarantine_after && self.quarantined.insert(host.clone()) {
                warn!("quarantining {host} after {streak} consecutive failures");
            }
        } else {
            self.fail_streak.remove(&host);
        }

        self.log.push(FetchLogRow {
            dispatch_index: flight.index,
            url: request.url.render(),
            host,
            depth: request.depth,
            priority: request.priority,
            seq: request.seq,
            dispatched_at: flight.at,
            completed_at: now,
            outcome: result.outcome.label().to_string(),
            status,
            bytes: body.len(),
            relevance,
            duplicate,
            new_links,
        });

        if self.pages - self.ckpt_pages >= self.cfg.checkpoint_pages
            || now - self.ckpt_time >= self.cfg.checkpoint_seconds
        {
            self.checkpoint()?;
        }
        Ok(self.halt_at.is_some_and(|h| self.session_pages >= h))
    }

    /// Moves new requests into the intake queue, promoting when it fills.
    fn deposit(&mut self, mut children: Vec<CrawlRequest>) {
        while !children.is_empty() {
            let room = self.frontier.intake.capacity() - self.frontier.intake.len();
            if room == 0 {
                self.frontier.promote();
                continue;
            }
            let rest = children.split_off(room.min(children.len()));
            if let Err((_, back)) = self.frontier.intake.enqueue_batch(children) {
                self.frontier.promote();
                children = back;
                children.extend(rest);
                continue;
            }
            children = rest;
        }
    }

    fn counters(&self) -> Vec<(String, u64)> {
        let mut c = vec![
            ("pages".to_string(), self.pages),
            ("duplicates".into(), self.duplicates),
            ("max_depth".into(), u64::from(self.max_depth)),
            ("retries".into(), self.retries),
            ("violations".into(), self.violations),
            ("recrawled".into(), self.recrawled),
            ("dispatched".into(), self.dispatched),
            ("elapsed_ms".into(), (self.elapsed() * 1000.0).round() as u64),
        ];
        for (label, n) in &self.outcomes {
            c.push((format!("outcome:{label}"), *n));
        }
        c
    }

    fn checkpoint(&mut self) -> Result<(), CrawlError> {
        self.repo.flush()?;
        let now = self.clock.now();
        let mut in_flight: Vec<CrawlRequest> = self.in_flight.values().map(|f| f.request.clone()).collect();
        in_flight.sort_by_key(|r| r.seq);
        let ckpt = Checkpoint {
            version: self.ckpt_version + 1,
            created_at: now,
            crawl_seq: self.pages,
            config_digest: self.cfg.digest,
            next_seq: self.seq.peek(),
            repo_records: self.repo.len() as u64,
            frontier: self.frontier.snapshot(),
            seen: self.seen.listing(),
            hosts: self.ledger.listing(),
            in_flight,
            retried: self.retried.iter().cloned().collect(),
            counters: self.counters(),
        };
        let path = write_checkpoint(&self.cfg.run_dir, &ckpt, KEEP_CHECKPOINTS)?;
        debug!("checkpoint {} at {} pages", path.display(), self.pages);
        self.ckpt_version += 1;
        self.ckpt_pages = self.pages;
        self.ckpt_time = now;
        self.checkpoints_written += 1;
        Ok(())
    }

    fn report(&self, reason: StopReason) -> CrawlReport {
        let wall = self.wall.elapsed().as_secs_f64();
        CrawlReport {
            pages_fetched: self.pages,
            unique_fingerprints: self.fingerprints.len() as u64,
            duplicates: self.duplicates,
            outcomes: self.outcomes.clone(),
            max_depth: self.max_depth,
            duration: self.elapsed(),
            wall_seconds: wall,
            stop_reason: reason,
            politeness_violations: self.violations,
            throughput: if wall > 0.0 { self.session_pages as f64 / wall } else { 0.0 },
            retries: self.retries,
            recrawled: self.recrawled,
            quarantined_hosts: self.quarantined.iter().cloned().collect(),
            stored_urls: self.repo.url_count(),
            checkpoints_written: self.checkpoints_written,
            resumed: self.resumed,
            log: self.log.clone(),
        }
    }
}

#[derive(Debug, Default)]
struct Round {
    sent: u64,
    dropped: usize,
    wake: Option<Seconds>,
}

fn earliest(a: Option<Seconds>, b: Seconds) -> Option<Seconds> {
    Some(a.map_or(b, |a| a.min(b)))
}

fn pool_gone() -> CrawlError {
    CrawlError::Report("downloader pool stopped unexpectedly".into())
}

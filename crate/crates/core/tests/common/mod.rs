//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epow::crawlctl::{parse_config, CrawlConfig, CrawlEnv, CrawlReport};
use epow::frontier::{CircularQueue, CrawlRequest, PriorityQueue};
use epow::simweb::{LoggedRequest, SimServer, SiteGraph};
use epow::store::PageRepo;
use epow::urlkit::parse_url;

pub const ALLOWED_SLACK: f64 = 1e-6;

/// Parses `text` as a config whose run directory is `dir`.
pub fn config(text: &str, dir: &Path) -> CrawlConfig {
    let mut cfg = parse_config(text, dir).expect("test config parses");
    cfg.run_dir = dir.to_path_buf();
    cfg
}

pub struct Crawled {
    pub report: CrawlReport,
    pub env: CrawlEnv,
    pub server: Option<SimServer>,
    pub dir: tempfile::TempDir,
}

impl Crawled {
    pub fn graph(&self) -> &SiteGraph {
        self.env.web.as_ref().expect("simweb").graph()
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.env.web.as_ref().expect("simweb").requests()
    }

    pub fn stored_urls(&self) -> BTreeSet<String> {
        stored_urls(self.dir.path())
    }
}

/// Runs a fresh crawl of the config text in a temporary directory.
pub async fn crawl(text: &str) -> Crawled {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(text, dir.path());
    let (env, server) = CrawlEnv::start(&cfg).await.unwrap();
    let report = epow::crawlctl::run_crawl_in(&cfg, &env, false).await.unwrap();
    Crawled {
        report,
        env,
        server,
        dir,
    }
}

pub fn stored_urls(dir: &Path) -> BTreeSet<String> {
    let repo = PageRepo::open(dir).unwrap();
    repo.records().iter().map(|r| r.url.render()).collect()
}

/// URLs reachable from page 0 by walking the generator's link lists.
pub fn reachable_urls(graph: &SiteGraph) -> BTreeSet<String> {
    let mut seen = vec![false; graph.pages.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &graph.pages[i].links {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..graph.pages.len())
        .filter(|&i| seen[i])
        .map(|i| parse_url(&format!("http://{}{}", graph.pages[i].host, graph.pages[i].path)).unwrap().render())
        .collect()
}

/// Consecutive same-host arrivals closer than `interval`, from the server's
/// own request log.
pub fn politeness_breaches(log: &[LoggedRequest], interval: f64) -> Vec<(String, f64)> {
    let mut by_host: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in log {
        by_host.entry(r.host.as_str()).or_default().push(r.arrival);
    }
    let mut out = Vec::new();
    for (host, mut times) in by_host {
        times.sort_by(f64::total_cmp);
        for w in times.windows(2) {
            if w[1] - w[0] < interval - ALLOWED_SLACK {
                out.push((host.to_string(), w[1] - w[0]));
            }
        }
    }
    out
}

/// Monte-Carlo estimate of freshness and age for one page changing at rate
/// `lambda` and synced every `interval`: within each cycle the first change
/// lands at T ~ Exp(λ). Returns ((F, se), (A, se)).
pub fn mc_freshness_age(lambda: f64, interval: f64, trials: usize, seed: u64) -> ((f64, f64), (f64, f64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fs, mut fs2, mut ag, mut ag2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..trials {
        let t = -(1.0 - rng.gen::<f64>()).ln() / lambda;
        let f = t.min(interval) / interval;
        let a = if t < interval { (interval - t).powi(2) / (2.0 * interval) } else { 0.0 };
        fs += f;
        fs2 += f * f;
        ag += a;
        ag2 += a * a;
    }
    let n = trials as f64;
    let stats = |s: f64, s2: f64| {
        let m = s / n;
        (m, ((s2 / n - m * m).max(0.0) / (n - 1.0)).sqrt())
    };
    (stats(fs, fs2), stats(ag, ag2))
}

/// Freshness of a page at rate λ synced `f` times per unit, straight from
/// the integral (1/I)∫₀ᴵ e^{-λt} dt.
pub fn freshness_oracle(lambda: f64, f: f64) -> f64 {
    if f == 0.0 {
        return if lambda == 0.0 { 1.0 } else { 0.0 };
    }
    if lambda == 0.0 {
        return 1.0;
    }
    let i = 1.0 / f;
    simpson(|t| (-lambda * t).exp(), 0.0, i, 2000) / i
}

/// Age of a page at rate λ synced every `interval`, from the integral
/// (1/I)∫₀ᴵ (t - E[change time | changed by t]) P(changed by t) dt.
pub fn age_oracle(lambda: f64, interval: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    // Age at t is ∫₀ᵗ λe^{-λs}(t-s) ds.
    let age_at = |t: f64| simpson(|s| lambda * (-lambda * s).exp() * (t - s), 0.0, t, 200);
    simpson(age_at, 0.0, interval, 400) / interval
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Every way to hand out `units` indivisible budget units to `pages` pages.
pub fn all_allocations(pages: usize, units: usize) -> Vec<Vec<usize>> {
    fn rec(pages: usize, units: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pages == 1 {
            prefix.push(units);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=units {
            prefix.push(k);
            rec(pages - 1, units - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(pages, units, &mut Vec::new(), &mut out);
    out
}

/// Best objective over every allocation, by brute force. `score(i, k)` is the
/// value of giving page `i` exactly `k` units; higher is better.
pub fn exhaustive_best(pages: usize, units: usize, score: impl Fn(usize, usize) -> f64) -> (f64, Vec<Vec<usize>>) {
    let mut best = f64::NEG_INFINITY;
    let mut winners = Vec::new();
    for alloc in all_allocations(pages, units) {
        let v: f64 = alloc.iter().enumerate().map(|(i, &k)| score(i, k)).sum();
        if v > best + 1e-12 {
            best = v;
            winners = vec![alloc];
        } else if (v - best).abs() <= 1e-12 {
            winners.push(alloc);
        }
    }
    (best, winners)
}

/// Runs `ops` random operations against a circular queue and a VecDeque,
/// returning the number of disagreements.
pub fn circular_queue_stress(ops: usize, capacity: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = CircularQueue::with_capacity(capacity);
    let mut oracle: VecDeque<u64> = VecDeque::new();
    let mut bad = 0;
    let mut next = 0u64;
    for _ in 0..ops {
        match rng.gen_range(0..10) {
            0..=4 => {
                let ok = q.enqueue(next).is_ok();
                let fits = oracle.len() < capacity;
                if ok != fits {
                    bad += 1;
                }
                if fits {
                    oracle.push_back(next);
                }
                next += 1;
            }
            5..=8 => {
                if q.dequeue() != oracle.pop_front() {
                    bad += 1;
                }
            }
            _ => {
                let n = rng.gen_range(0..=capacity / 2);
                let batch: Vec<u64> = (next..next + n as u64).collect();
                next += n as u64;
                let ok = q.enqueue_batch(batch.clone()).is_ok();
                let fits = oracle.len() + n <= capacity;
                if ok != fits {
                    bad += 1;
                }
                if fits {
                    oracle.extend(batch);
                }
            }
        }
        if q.len() != oracle.len() {
            bad += 1;
        }
    }
    if !q.drain().into_iter().eq(oracle) {
        bad += 1;
    }
    bad
}

/// Runs `ops` random pushes and pops against the priority queue and a
/// stable-sort oracle, returning the number of disagreements. Priorities take
/// nine levels, so the stable sort by descending priority is one FIFO per
/// level, read highest level first.
pub fn priority_queue_stress(ops: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = PriorityQueue::new();
    let mut levels: Vec<VecDeque<u64>> = vec![VecDeque::new(); 9];
    let url = parse_url("http://stress.sim/").unwrap();
    let mut bad = 0;
    let mut seq = 0u64;
    let oracle_pop = |levels: &mut Vec<VecDeque<u64>>| levels.iter_mut().rev().find_map(|l| l.pop_front());
    for _ in 0..ops {
        if rng.gen_bool(0.55) {
            let level = rng.gen_range(0..=8u8);
            q.push(CrawlRequest::new(url.clone(), f64::from(level) / 8.0, rng.gen_range(0..5), seq));
            levels[level as usize].push_back(seq);
            seq += 1;
        } else if q.pop().map(|r| r.seq) != oracle_pop(&mut levels) {
            bad += 1;
        }
    }
    let rest: Vec<u64> = std::iter::from_fn(|| q.pop()).map(|r| r.seq).collect();
    let want: Vec<u64> = std::iter::from_fn(|| oracle_pop(&mut levels)).collect();
    if rest != want {
        bad += 1;
    }
    bad
}

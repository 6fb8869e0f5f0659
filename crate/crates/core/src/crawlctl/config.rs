//! Run configuration: plain `key value` lines, `#` comments.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Seconds;
use crate::fetchnet::{FetchPolicy, HostMap};
use crate::governor::{RateBucket, RateProfile, StopConditions, DEFAULT_HOST_INTERVAL, DEFAULT_PAGES_PER_SECOND};
use crate::revisit::{PlanGrid, RevisitPolicy};
use crate::simweb::{Fault, LambdaDist, SiteParams, TopicPlan, TreeShape};
use crate::urlkit::{parse_url, CanonicalUrl};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {key}: {message}")]
    Invalid { line: usize, key: String, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("{0}")]
    Missing(String),
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    Real,
    Simulated,
}

/// An embedded synthetic web started alongside the crawl.
#[derive(Debug, Clone, PartialEq)]
pub struct SimwebSpec {
    pub seed: u64,
    pub params: SiteParams,
    pub gallery: bool,
    pub port: u16,
    /// Seconds per change-rate unit.
    pub time_unit: Seconds,
    pub faults: Vec<(String, String, Fault)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSource {
    /// Plan with the simulator's true rates.
    True,
    /// Plan with rates estimated from an observation phase.
    Estimated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisitSettings {
    pub policy: RevisitPolicy,
    /// Total visits per time unit.
    pub budget: Option<f64>,
    /// Measured span, in time units.
    pub horizon: f64,
    /// Unmeasured lead-in, in time units.
    pub warmup: f64,
    pub sample_step: f64,
    pub grid: PlanGrid,
    pub lambda_source: LambdaSource,
    /// Visits per page in the observation phase of an estimated plan.
    pub observe_visits: u32,
    pub seed: u64,
}

impl Default for RevisitSettings {
    fn default() -> Self {
        RevisitSettings {
            policy: RevisitPolicy::OptimalFreshness,
            budget: None,
            horizon: 100.0,
            warmup: 5.0,
            sample_step: 0.1,
            grid: PlanGrid::default(),
            lambda_source: LambdaSource::True,
            observe_visits: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrawlConfig {
    pub seeds: Vec<CanonicalUrl>,
    pub topic: Vec<String>,
    pub downloaders: usize,
    pub frontier_capacity: usize,
    pub host_interval: Seconds,
    pub rate_profile: RateProfile,
    pub timezone_offset: Seconds,
    pub stop: StopConditions,
    pub checkpoint_pages: u64,
    pub checkpoint_seconds: Seconds,
    pub fetch: FetchPolicy,
    pub run_dir: PathBuf,
    /// Seed for every random draw in a run unless a more specific seed is set.
    pub rng_seed: u64,
    pub hosts: HostMap,
    pub clock: ClockKind,
    /// Simulated clock start, epoch seconds.
    pub clock_start: Seconds,
    pub simweb: Option<SimwebSpec>,
    /// Consecutive transient failures after which a host is skipped.
    pub quarantine_after: u32,
    /// Stop abruptly, without a final checkpoint, after this many pages.
    pub halt_after_pages: Option<u64>,
    pub revisit: RevisitSettings,
    /// SHA-256 over the normalized settings, excluding `halt_after_pages`.
    pub digest: [u8; 32],
}

impl Default for CrawlConfig {
    fn default() -> Self {
        CrawlConfig {
            seeds: Vec::new(),
            topic: Vec::new(),
            downloaders: 4,
            frontier_capacity: 10_000,
            host_interval: DEFAULT_HOST_INTERVAL,
            rate_profile: RateProfile::default(),
            timezone_offset: 0.0,
            stop: StopConditions::default(),
            checkpoint_pages: 100,
            checkpoint_seconds: 60.0,
            fetch: FetchPolicy::default(),
            run_dir: PathBuf::from("run"),
            rng_seed: 1,
            hosts: HostMap::new(),
            clock: ClockKind::Real,
            clock_start: 1_700_000_000.0,
            simweb: None,
            quarantine_after: 10,
            halt_after_pages: None,
            revisit: RevisitSettings::default(),
            digest: [0; 32],
        }
    }
}

impl CrawlConfig {
    pub fn digest_hex(&self) -> String {
        self.digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when every seed is served locally (simweb hosts or loopback).
    pub fn is_local(&self) -> bool {
        self.seeds.iter().all(|u| is_local_host(u.host()))
    }
}

pub fn is_local_host(host: &str) -> bool {
    host.ends_with(".sim")
        || host == "localhost"
        || host
            .trim_start_matches('[')
            .trim_end_matches(']')
            .parse::<IpAddr>()
            .is_ok_and(|ip| ip.is_loopback())
}

pub fn load_config(path: &Path) -> Result<CrawlConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

struct Line<'a> {
    no: usize,
    key: &'a str,
    args: Vec<&'a str>,
    rest: &'a str,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            line: self.no,
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn arity(&self, n: usize) -> Result<(), ConfigError> {
        if self.args.len() == n {
            Ok(())
        } else {
            Err(self.err(format!("expected {n} value(s), got {}", self.args.len())))
        }
    }

    fn one(&self) -> Result<&str, ConfigError> {
        self.arity(1)?;
        Ok(self.args[0])
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, ConfigError> {
        s.parse().map_err(|_| self.err(format!("{s:?} is not a valid number")))
    }

    fn f64_at_least(&self, min: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.num(self.one()?)?;
        if !v.is_finite() || v < min {
            return Err(self.err(format!("must be a finite number >= {min}")));
        }
        Ok(v)
    }

    fn positive_f64(&self) -> Result<f64, ConfigError> {
        let v: f64 = self.num(self.one()?)?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(self.err("must be a finite number > 0"));
        }
        Ok(v)
    }

    fn positive_int<T: std::str::FromStr + PartialOrd + Default>(&self) -> Result<T, ConfigError> {
        let v: T = self.num(self.one()?)?;
        if v <= T::default() {
            return Err(self.err("must be > 0"));
        }
        Ok(v)
    }

    fn rate(&self, s: &str) -> Result<f64, ConfigError> {
        if matches!(s, "inf" | "unlimited") {
            return Ok(f64::INFINITY);
        }
        let v: f64 = self.num(s)?;
        if !(v > 0.0) {
            return Err(self.err("rate must be > 0 or \"inf\""));
        }
        Ok(v)
    }
}

/// Parses config text. Relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<CrawlConfig, ConfigError> {
    let mut cfg = CrawlConfig::default();
    let mut clock: Option<ClockKind> = None;
    let mut buckets = Vec::new();
    let mut rate_default = DEFAULT_PAGES_PER_SECOND;
    let mut simweb: Option<(u64, usize, usize)> = None;
    let mut sim_gallery = false;
    let mut sim_port = 0u16;
    let mut sim_time_unit = 1.0;
    let mut sim_lambda = LambdaDist::Constant(0.0);
    let mut sim_topic = false;
    let mut sim_degree = None;
    let mut sim_star = false;
    let mut faults = Vec::new();
    let mut revisit_time_unit = None;
    let mut revisit_seed = None;
    let mut digest = Sha256::new();

    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let key = words.next().expect("nonempty line");
        let args: Vec<&str> = words.collect();
        let rest = content[key.len()..].trim();
        let l = Line {
            no: i + 1,
            key,
            args,
            rest,
        };
        if key != "halt_after_pages" {
            digest.update(key.as_bytes());
            digest.update(b"\x1f");
            digest.update(l.args.join(" ").as_bytes());
            digest.update(b"\n");
        }
        match key {
            "seed" => {
                for a in &l.args {
                    cfg.seeds.push(parse_url(a).map_err(|e| l.err(e.to_string()))?);
                }
                if l.args.is_empty() {
                    return Err(l.err("expected at least one URL"));
                }
            }
            "topic" => cfg.topic.extend(l.args.iter().map(|s| s.to_lowercase())),
            "downloaders" => cfg.downloaders = l.positive_int()?,
            "frontier_capacity" => cfg.frontier_capacity = l.positive_int()?,
            "host_interval_seconds" => cfg.host_interval = l.f64_at_least(0.0)?,
            "rate" => {
                l.arity(3)?;
                let start: u8 = l.num(l.args[0])?;
                let end: u8 = l.num(l.args[1])?;
                let pps = l.rate(l.args[2])?;
                buckets.push(RateBucket {
                    start_hour: start,
                    end_hour: end,
                    pages_per_second: pps,
                });
            }
            "rate_default" => rate_default = l.rate(l.one()?)?,
            "timezone_offset_seconds" => {
                let v: f64 = l.num(l.one()?)?;
                if !v.is_finite() || v.abs() > 86_400.0 {
                    return Err(l.err("must lie within one day"));
                }
                cfg.timezone_offset = v;
            }
            "max_pages" => cfg.stop.max_pages = Some(l.positive_int()?),
            "max_duration" => cfg.stop.max_duration = Some(l.positive_f64()?),
            "max_depth" => cfg.stop.max_depth = Some(l.num(l.one()?)?),
            "checkpoint_pages" => cfg.checkpoint_pages = l.positive_int()?,
            "checkpoint_seconds" => cfg.checkpoint_seconds = l.positive_f64()?,
            "user_agent" => {
                if l.rest.is_empty() {
                    return Err(l.err("user agent must not be empty"));
                }
                cfg.fetch.user_agent = l.rest.to_string();
            }
            "timeout_seconds" => cfg.fetch.timeout = l.positive_f64()?,
            "max_body_bytes" => cfg.fetch.max_body_bytes = l.positive_int()?,
            "max_redirects" => cfg.fetch.max_redirect_hops = l.num(l.one()?)?,
            "run_dir" => cfg.run_dir = base.join(l.rest),
            "rng_seed" => cfg.rng_seed = l.num(l.one()?)?,
            "resolve" => {
                l.arity(2)?;
                let ip: IpAddr = l.args[1].parse().map_err(|_| l.err("bad IP address"))?;
                cfg.hosts.insert(l.args[0], ip);
            }
            "route" => {
                l.arity(2)?;
                let ep: SocketAddr = l.args[1].parse().map_err(|_| l.err("expected ip:port"))?;
                cfg.hosts.route(l.args[0], ep);
            }
            "clock" => {
                clock = Some(match l.one()? {
                    "real" => ClockKind::Real,
                    "simulated" => ClockKind::Simulated,
                    other => return Err(l.err(format!("{other:?} is not real|simulated"))),
                })
            }
            "clock_start" => cfg.clock_start = l.f64_at_least(0.0)?,
            "simweb" => {
                l.arity(3)?;
                let n: usize = l.num(l.args[1])?;
                let h: usize = l.num(l.args[2])?;
                if n == 0 || h == 0 {
                    return Err(l.err("pages and hosts must be >= 1"));
                }
                simweb = Some((l.num(l.args[0])?, n, h));
            }
            "simweb_gallery" => sim_gallery = parse_bool(&l)?,
            "simweb_port" => sim_port = l.num(l.one()?)?,
            "simweb_time_unit" => sim_time_unit = l.positive_f64()?,
            "simweb_topic" => sim_topic = parse_bool(&l)?,
            "simweb_out_degree" => sim_degree = Some(l.f64_at_least(0.0)?),
            "simweb_star" => sim_star = parse_bool(&l)?,
            "simweb_lambda" => sim_lambda = parse_lambda(&l)?,
            "simweb_fault" => faults.push(parse_fault(&l)?),
            "quarantine_after" => cfg.quarantine_after = l.positive_int()?,
            "halt_after_pages" => cfg.halt_after_pages = Some(l.positive_int()?),
            "revisit_policy" => {
                cfg.revisit.policy = l.one()?.parse().map_err(|e: crate::revisit::RevisitError| l.err(e.to_string()))?
            }
            "revisit_budget" => cfg.revisit.budget = Some(l.positive_f64()?),
            "revisit_horizon" => cfg.revisit.horizon = l.positive_f64()?,
            "revisit_warmup" => cfg.revisit.warmup = l.f64_at_least(0.0)?,
            "revisit_sample_step" => cfg.revisit.sample_step = l.positive_f64()?,
            "revisit_grid_step" => cfg.revisit.grid.step = l.positive_f64()?,
            "revisit_age_horizon" => cfg.revisit.grid.age_horizon = l.positive_f64()?,
            "revisit_time_unit" => revisit_time_unit = Some(l.positive_f64()?),
            "revisit_seed" => revisit_seed = Some(l.num(l.one()?)?),
            "revisit_observe_visits" => cfg.revisit.observe_visits = l.positive_int()?,
            "revisit_lambda" => {
                cfg.revisit.lambda_source = match l.one()? {
                    "true" => LambdaSource::True,
                    "estimated" => LambdaSource::Estimated,
                    other => return Err(l.err(format!("{other:?} is not true|estimated"))),
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: l.no,
                    key: key.to_string(),
                })
            }
        }
    }

    cfg.revisit.seed = revisit_seed.unwrap_or(cfg.rng_seed);
    cfg.rate_profile = RateProfile::new(buckets, rate_default)
        .map_err(|e| ConfigError::Missing(format!("rate profile: {e}")))?;
    if let Some((seed, pages, hosts)) = simweb {
        let mut params = SiteParams::new(pages, hosts);
        params.lambda = sim_lambda;
        if sim_topic {
            params.topic = Some(TopicPlan::half_and_half());
        }
        if let Some(d) = sim_degree {
            params.out_degree_mean = d;
        }
        if sim_star {
            params.shape = TreeShape::Star;
        }
        let spec = SimwebSpec {
            seed,
            params,
            gallery: sim_gallery,
            port: sim_port,
            time_unit: revisit_time_unit.unwrap_or(sim_time_unit),
            faults,
        };
        if cfg.seeds.is_empty() {
            let root = if spec.gallery {
                crate::simweb::gallery_fixture().seed_url()
            } else {
                parse_url(&format!("http://{}/", crate::simweb::host_name(0))).expect("valid")
            };
            cfg.seeds.push(root);
        }
        cfg.simweb = Some(spec);
    } else if sim_gallery || !faults.is_empty() {
        return Err(ConfigError::Missing("simweb_* keys need a `simweb SEED PAGES HOSTS` line".into()));
    }
    cfg.clock = clock.unwrap_or(if cfg.simweb.is_some() {
        ClockKind::Simulated
    } else {
        ClockKind::Real
    });
    if cfg.seeds.is_empty() {
        return Err(ConfigError::Missing("at least one `seed URL` line is required".into()));
    }
    if !cfg.stop.is_bounded() && !cfg.is_local() {
        return Err(ConfigError::Missing(
            "a crawl of non-local hosts needs max_pages, max_duration or max_depth".into(),
        ));
    }
    cfg.fetch
        .validate()
        .map_err(|e| ConfigError::Missing(e.to_string()))?;
    cfg.digest = digest.finalize().into();
    Ok(cfg)
}

fn parse_bool(l: &Line<'_>) -> Result<bool, ConfigError> {
    match l.one()? {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        other => Err(l.err(format!("{other:?} is not on|off"))),
    }
}

fn parse_lambda(l: &Line<'_>) -> Result<LambdaDist, ConfigError> {
    let (kind, vals) = l.args.split_first().ok_or_else(|| l.err("expected const|choice|loguniform"))?;
    let nums: Vec<f64> = vals.iter().map(|v| l.num(v)).collect::<Result<_, _>>()?;
    if nums.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(l.err("rates must be finite and >= 0"));
    }
    match (*kind, nums.as_slice()) {
        ("const", [v]) => Ok(LambdaDist::Constant(*v)),
        ("choice", vs) if !vs.is_empty() => Ok(LambdaDist::Choice(vs.to_vec())),
        ("loguniform", [lo, hi]) if *lo > 0.0 && hi >= lo => Ok(LambdaDist::LogUniform { lo: *lo, hi: *hi }),
        _ => Err(l.err("expected `const X`, `choice X Y ...` or `loguniform LO HI`")),
    }
}

fn parse_fault(l: &Line<'_>) -> Result<(String, String, Fault), ConfigError> {
    if l.args.len() < 3 {
        return Err(l.err("expected HOST PATH KIND [VALUE]"));
    }
    let (host, path, kind) = (l.args[0], l.args[1], l.args[2]);
    let value = l.args.get(3).copied();
    let need = || value.ok_or_else(|| l.err(format!("{kind} needs a value")));
    let fault = match kind {
        "delay" => {
            let secs: f64 = l.num(need()?)?;
            if !(secs >= 0.0) || !secs.is_finite() {
                return Err(l.err("delay must be >= 0"));
            }
            Fault::Delay(Duration::from_secs_f64(secs))
        }
        "refuse" => Fault::Refuse,
        "redirect" => Fault::RedirectChain(l.num(need()?)?),
        "oversize" => Fault::Oversize(l.num(need()?)?),
        "status" => Fault::Status(l.num(need()?)?),
        other => return Err(l.err(format!("unknown fault {other:?}"))),
    };
    Ok((host.to_string(), path.to_string(), fault))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<CrawlConfig, ConfigError> {
        parse_config(text, Path::new("/tmp/cfg"))
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse("seed http://example.org/\nmax_pages 10\n").unwrap();
        assert_eq!(c.host_interval, 20.0);
        assert_eq!(c.checkpoint_pages, 100);
        assert_eq!(c.checkpoint_seconds, 60.0);
        assert_eq!(c.fetch.timeout, 10.0);
        assert_eq!(c.fetch.max_body_bytes, 2 * 1024 * 1024);
        assert_eq!(c.fetch.max_redirect_hops, 5);
        assert_eq!(c.clock, ClockKind::Real);
        assert_eq!(c.stop.max_pages, Some(10));
        assert!(c.topic.is_empty());
    }

    #[test]
    fn negative_interval_is_rejected() {
        let err = parse("seed http://a.sim/\nhost_interval_seconds -1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: 2, ref key, .. } if key == "host_interval_seconds"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("seed http://a.sim/\npolitenes 5\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "politenes".into() });
        assert!(err.to_string().contains("politenes"));
    }

    #[test]
    fn remote_crawl_needs_a_bound() {
        assert!(matches!(parse("seed http://example.org/\n"), Err(ConfigError::Missing(_))));
        assert!(parse("seed http://a.sim/\n").is_ok());
        assert!(parse("seed http://127.0.0.1:8080/\n").is_ok());
    }

    #[test]
    fn comments_rates_and_simweb() {
        let c = parse(
            "# demo\nsimweb 7 200 20   # site\nsimweb_topic on\ntopic Crawler spider\n\
             rate 9 17 2\nrate 22 6 inf\nrate_default 50\nrun_dir out\n\
             simweb_fault h1.sim /slow delay 3\nresolve www.test 10.0.0.1\n",
        )
        .unwrap();
        assert_eq!(c.clock, ClockKind::Simulated);
        assert_eq!(c.seeds[0].render(), "http://h0.sim/");
        assert_eq!(c.topic, vec!["crawler", "spider"]);
        assert_eq!(c.rate_profile.rate_for_hour(10), 2.0);
        assert_eq!(c.rate_profile.rate_for_hour(23), f64::INFINITY);
        assert_eq!(c.rate_profile.rate_for_hour(7), 50.0);
        assert_eq!(c.run_dir, PathBuf::from("/tmp/cfg/out"));
        let sim = c.simweb.unwrap();
        assert_eq!((sim.seed, sim.params.n_pages, sim.params.n_hosts), (7, 200, 20));
        assert!(sim.params.topic.is_some());
        assert_eq!(sim.faults[0].2, Fault::Delay(Duration::from_secs(3)));
        assert!(c.hosts.lookup("www.test").is_some());
    }

    #[test]
    fn digest_ignores_comments_and_halt() {
        let a = parse("seed http://a.sim/\nmax_pages 5\n").unwrap();
        let b = parse("# x\nseed   http://a.sim/   # y\nmax_pages 5\nhalt_after_pages 3\n").unwrap();
        let c = parse("seed http://a.sim/\nmax_pages 6\n").unwrap();
        assert_eq!(a.digest, b.digest);
        assert_ne!(a.digest, c.digest);
        assert_eq!(b.halt_after_pages, Some(3));
    }

    #[test]
    fn user_agent_needs_contact() {
        assert!(parse("seed http://a.sim/\nuser_agent mybot\n").is_err());
        let c = parse("seed http://a.sim/\nuser_agent mybot/2 (+http://me.example/bot)\n").unwrap();
        assert_eq!(c.fetch.user_agent, "mybot/2 (+http://me.example/bot)");
    }

    #[test]
    fn run_seed_feeds_the_revisit_loop() {
        assert_eq!(parse("seed http://a.sim/
").unwrap().revisit.seed, 1);
        assert_eq!(parse("seed http://a.sim/
rng_seed 9
").unwrap().revisit.seed, 9);
        let c = parse("seed http://a.sim/
revisit_seed 4
rng_seed 9
").unwrap();
        assert_eq!((c.rng_seed, c.revisit.seed), (9, 4));
    }
}

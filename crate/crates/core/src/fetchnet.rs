//! HTTP downloaders: a single-URL `Fetcher` and a pool of workers that
//! drain a shared work queue.

use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, warn};
use reqwest::header::{ACCEPT, CONTENT_LENGTH, CONTENT_TYPE, LOCATION, USER_AGENT};
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::clock::{Clock, Seconds};
use crate::frontier::CrawlRequest;
use crate::urlkit::{resolve, CanonicalUrl};

pub const DEFAULT_TIMEOUT: Seconds = 10.0;
pub const DEFAULT_MAX_BODY_BYTES: u64 = 2 * 1024 * 1024;
pub const DEFAULT_MAX_REDIRECT_HOPS: u32 = 5;
pub const DEFAULT_USER_AGENT: &str = "epow/0.1 (+https://example.org/epow-crawler)";

#[derive(Debug, Error, PartialEq)]
pub enum FetchError {
    #[error("status {0} is outside 100..=599")]
    OutOfRange(u16),
    #[error("invalid fetch policy: {0}")]
    BadPolicy(String),
    #[error("could not build HTTP client: {0}")]
    Client(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchPolicy {
    pub user_agent: String,
    pub timeout: Seconds,
    pub max_body_bytes: u64,
    pub max_redirect_hops: u32,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            user_agent: DEFAULT_USER_AGENT.to_string(),
            timeout: DEFAULT_TIMEOUT,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            max_redirect_hops: DEFAULT_MAX_REDIRECT_HOPS,
        }
    }
}

impl FetchPolicy {
    pub fn validate(&self) -> Result<(), FetchError> {
        let ua = self.user_agent.trim();
        if ua.is_empty() {
            return Err(FetchError::BadPolicy("user agent must not be empty".into()));
        }
        if !ua.contains("http://") && !ua.contains("https://") && !ua.contains('@') {
            return Err(FetchError::BadPolicy(
                "user agent must carry a contact URL or address".into(),
            ));
        }
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(FetchError::BadPolicy(format!("timeout {} must be > 0", self.timeout)));
        }
        if self.max_body_bytes == 0 {
            return Err(FetchError::BadPolicy("max_body_bytes must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Redirect(CanonicalUrl),
    ClientError(u16),
    ServerError(u16),
    Timeout,
    NetworkError(String),
    Oversize,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Redirect(_) => "redirect",
            Outcome::ClientError(_) => "client_error",
            Outcome::ServerError(_) => "server_error",
            Outcome::Timeout => "timeout",
            Outcome::NetworkError(_) => "network_error",
            Outcome::Oversize => "oversize",
        }
    }

    /// Failures that say something about the host rather than the page.
    pub fn is_transient(&self) -> bool {
        matches!(self, Outcome::ServerError(_) | Outcome::Timeout | Outcome::NetworkError(_))
    }
}

/// Status category, before any redirect target is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusClass {
    Success,
    Redirect,
    ClientError(u16),
    ServerError(u16),
    /// 1xx: not a final response.
    Informational,
}

pub fn classify_status(code: u16) -> Result<StatusClass, FetchError> {
    match code {
        100..=199 => Ok(StatusClass::Informational),
        200..=299 => Ok(StatusClass::Success),
        300..=399 => Ok(StatusClass::Redirect),
        400..=499 => Ok(StatusClass::ClientError(code)),
        500..=599 => Ok(StatusClass::ServerError(code)),
        _ => Err(FetchError::OutOfRange(code)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    /// The URL that was requested.
    pub url: CanonicalUrl,
    pub fetched_at: Seconds,
    pub outcome: Outcome,
    pub status: Option<u16>,
    /// Present exactly when the outcome is `Success`.
    pub body: Option<Vec<u8>>,
    pub content_type: Option<String>,
    /// Redirect targets followed, in order.
    pub redirects: Vec<CanonicalUrl>,
    /// Wall-clock time spent in the fetch.
    pub elapsed: Duration,
}

impl FetchResult {
    /// URL the body came from: the last redirect target, or the request URL.
    pub fn final_url(&self) -> &CanonicalUrl {
        self.redirects.last().unwrap_or(&self.url)
    }

    pub fn failed(url: CanonicalUrl, fetched_at: Seconds, outcome: Outcome, elapsed: Duration) -> Self {
        FetchResult {
            url,
            fetched_at,
            outcome,
            status: None,
            body: None,
            content_type: None,
            redirects: Vec::new(),
            elapsed,
        }
    }
}

/// Host-name overrides consulted before the system resolver, and hosts to
/// reach through a forwarding endpoint (an HTTP proxy such as the simweb
/// listener). A pattern of the form `*.suffix` matches any host ending in
/// `.suffix`.
#[derive(Debug, Clone, Default)]
pub struct HostMap {
    addresses: Vec<(String, IpAddr)>,
    routes: Vec<(String, SocketAddr)>,
}

fn pattern_matches(pattern: &str, host: &str) -> bool {
    match pattern.strip_prefix('*') {
        Some(suffix) => host.ends_with(suffix),
        None => pattern == host,
    }
}

fn first_match<T: Copy>(table: &[(String, T)], host: &str) -> Option<T> {
    let host = host.to_ascii_lowercase();
    // Exact entries beat wildcards.
    table
        .iter()
        .find(|(p, _)| !p.starts_with('*') && p == &host)
        .or_else(|| table.iter().find(|(p, _)| pattern_matches(p, &host)))
        .map(|(_, v)| *v)
}

impl HostMap {
    pub fn new() -> Self {
        HostMap::default()
    }

    pub fn insert(&mut self, pattern: &str, ip: IpAddr) {
        self.addresses.push((pattern.to_ascii_lowercase(), ip));
    }

    /// Send requests for matching hosts to `endpoint` as proxy requests,
    /// so URLs keep their own host and port.
    pub fn route(&mut self, pattern: &str, endpoint: SocketAddr) {
        self.routes.push((pattern.to_ascii_lowercase(), endpoint));
    }

    /// Map every `*.sim` host to the loopback interface.
    pub fn loopback_sim() -> Self {
        let mut m = HostMap::new();
        m.insert("*.sim", IpAddr::V4(Ipv4Addr::LOCALHOST));
        m
    }

    pub fn lookup(&self, host: &str) -> Option<IpAddr> {
        first_match(&self.addresses, host)
    }

    pub fn route_for(&self, host: &str) -> Option<SocketAddr> {
        first_match(&self.routes, host)
    }
}

#[derive(Debug)]
struct MapResolver(Arc<HostMap>);

impl reqwest::dns::Resolve for MapResolver {
    fn resolve(&self, name: reqwest::dns::Name) -> reqwest::dns::Resolving {
        let hit = self.0.lookup(name.as_str());
        let host = name.as_str().to_string();
        Box::pin(async move {
            // The connector substitutes the URL's port.
            let addrs: Vec<SocketAddr> = match hit {
                Some(ip) => vec![SocketAddr::new(ip, 0)],
                None => tokio::net::lookup_host((host.as_str(), 0)).await?.collect(),
            };
            Ok(Box::new(addrs.into_iter()) as reqwest::dns::Addrs)
        })
    }
}

/// Anything that turns a URL into a `FetchResult`. The pool is generic over
/// this so tests can inject misbehaving fetchers.
pub trait Fetch: Send + Sync + 'static {
    fn fetch(&self, url: CanonicalUrl) -> impl Future<Output = FetchResult> + Send;
}

#[derive(Debug, Clone)]
pub struct Fetcher {
    client: reqwest::Client,
    policy: FetchPolicy,
    clock: Arc<dyn Clock>,
}

impl Fetcher {
    pub fn new(policy: FetchPolicy, hosts: HostMap, clock: Arc<dyn Clock>) -> Result<Self, FetchError> {
        policy.validate()?;
        let hosts = Arc::new(hosts);
        let routes = hosts.clone();
        let proxy = reqwest::Proxy::custom(move |url| {
            url.host_str()
                .and_then(|h| routes.route_for(h))
                .map(|ep| format!("http://{ep}"))
        });
        let client = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .no_proxy()
            .proxy(proxy)
            .dns_resolver(Arc::new(MapResolver(hosts)))
            .connect_timeout(Duration::from_secs_f64(policy.timeout))
            .pool_idle_timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| FetchError::Client(e.to_string()))?;
        Ok(Fetcher { client, policy, clock })
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    async fn fetch_inner(&self, url: &CanonicalUrl, redirects: &mut Vec<CanonicalUrl>) -> (Outcome, Option<u16>, Option<Vec<u8>>, Option<String>) {
        let mut current = url.clone();
        let mut hops = 0u32;
        loop {
            let response = match self
                .client
                .get(current.as_url())
                .header(USER_AGENT, &self.policy.user_agent)
                .header(ACCEPT, "text/html")
                .send()
                .await
            {
                Ok(r) => r,
                Err(e) => return (Outcome::NetworkError(error_chain(&e)), None, None, None),
            };
            let code = response.status().as_u16();
            let content_type = response
                .headers()
                .get(CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string);
            let class = match classify_status(code) {
                Ok(c) => c,
                Err(e) => return (Outcome::NetworkError(e.to_string()), Some(code), None, content_type),
            };
            match class {
                StatusClass::Success => {
                    return match self.read_body(response).await {
                        Ok(body) => (Outcome::Success, Some(code), Some(body), content_type),
                        Err(outcome) => (outcome, Some(code), None, content_type),
                    };
                }
                StatusClass::Redirect => {
                    let target = response
                        .headers()
                        .get(LOCATION)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|loc| resolve(&current, loc).ok());
                    let Some(target) = target else {
                        return (
                            Outcome::NetworkError(format!("{code} without a usable Location")),
                            Some(code),
                            None,
                            content_type,
                        );
                    };
                    if hops >= self.policy.max_redirect_hops {
                        return (Outcome::Redirect(target), Some(code), None, content_type);
                    }
                    hops += 1;
                    redirects.push(target.clone());
                    current = target;
                }
                StatusClass::ClientError(c) => return (Outcome::ClientError(c), Some(code), None, content_type),
                StatusClass::ServerError(c) => return (Outcome::ServerError(c), Some(code), None, content_type),
                StatusClass::Informational => {
                    return (
                        Outcome::NetworkError(format!("unexpected interim status {code}")),
                        Some(code),
                        None,
                        content_type,
                    )
                }
            }
        }
    }

    async fn read_body(&self, mut response: reqwest::Response) -> Result<Vec<u8>, Outcome> {
        let limit = self.policy.max_body_bytes;
        let declared = response
            .headers()
            .get(CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok());
        if declared.is_some_and(|n| n > limit) {
            return Err(Outcome::Oversize);
        }
        let mut body = Vec::with_capacity(declared.unwrap_or(0) as usize);
        loop {
            match response.chunk().await {
                Ok(Some(chunk)) => {
                    if body.len() as u64 + chunk.len() as u64 > limit {
                        return Err(Outcome::Oversize);
                    }
                    body.extend_from_slice(&chunk);
                }
                Ok(None) => return Ok(body),
                Err(e) => return Err(Outcome::NetworkError(error_chain(&e))),
            }
        }
    }
}

impl Fetch for Fetcher {
    /// One GET (plus bounded redirect follow-ups) under the policy timeout.
    /// Never fails: every problem is reported in the outcome.
    async fn fetch(&self, url: CanonicalUrl) -> FetchResult {
        let fetched_at = self.clock.now();
        let started = Instant::now();
        let mut redirects = Vec::new();
        let limit = Duration::from_secs_f64(self.policy.timeout);
        let (outcome, status, body, content_type) =
            match tokio::time::timeout(limit, self.fetch_inner(&url, &mut redirects)).await {
                Ok(r) => r,
                Err(_) => (Outcome::Timeout, None, None, None),
            };
        debug!("fetched {url}: {}", outcome.label());
        FetchResult {
            url,
            fetched_at,
            outcome,
            status,
            body,
            content_type,
            redirects,
            elapsed: started.elapsed(),
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        src = s.source();
    }
    msg
}

/// Work run by a downloader after each fetch, before the result reaches the
/// sink. The crawler uses this to parse pages and queue links off the master.
pub trait PostFetch: Send + Sync + 'static {
    type Output: Send + 'static;
    fn after_fetch(&self, request: CrawlRequest, result: FetchResult) -> impl Future<Output = Self::Output> + Send;
}

/// Hands `(request, result)` to the sink unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl PostFetch for PassThrough {
    type Output = (CrawlRequest, FetchResult);

    async fn after_fetch(&self, request: CrawlRequest, result: FetchResult) -> Self::Output {
        (request, result)
    }
}

#[derive(Debug)]
pub struct PoolHandle {
    workers: Vec<JoinHandle<()>>,
}

impl PoolHandle {
    pub fn size(&self) -> usize {
        self.workers.len()
    }

    /// Waits for every worker to exit. Workers stop once the work channel
    /// is closed and drained, or the sink is dropped.
    pub async fn join(self) {
        for w in self.workers {
            let _ = w.await;
        }
    }
}

/// Starts `n` workers that take requests from `work`, fetch them, run the
/// hook, and send its output to `sink`. Each fetch runs in its own task so a
/// panic there turns into a `NetworkError` result instead of a dead worker.
pub fn run_downloader_pool<F, H>(
    n: usize,
    work: async_channel::Receiver<CrawlRequest>,
    sink: tokio::sync::mpsc::UnboundedSender<H::Output>,
    fetcher: Arc<F>,
    hook: Arc<H>,
    clock: Arc<dyn Clock>,
) -> PoolHandle
where
    F: Fetch,
    H: PostFetch,
{
    assert!(n >= 1, "a pool needs at least one downloader");
    let workers = (0..n)
        .map(|id| {
            let work = work.clone();
            let sink = sink.clone();
            let fetcher = fetcher.clone();
            let hook = hook.clone();
            let clock = clock.clone();
            tokio::spawn(async move {
                while let Ok(request) = work.recv().await {
                    let url = request.url.clone();
                    let started = Instant::now();
                    let f = fetcher.clone();
                    let result = match tokio::spawn(async move { f.fetch(url).await }).await {
                        Ok(r) => r,
                        Err(e) => {
                            warn!("downloader {id}: fetch of {} crashed: {e}", request.url);
                            FetchResult::failed(
                                request.url.clone(),
                                clock.now(),
                                Outcome::NetworkError(format!("downloader crashed: {e}")),
                                started.elapsed(),
                            )
                        }
                    };
                    let out = hook.after_fetch(request, result).await;
                    if sink.send(out).is_err() {
                        break;
                    }
                }
            })
        })
        .collect();
    PoolHandle { workers }
}

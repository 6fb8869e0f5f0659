//! Deterministic synthetic web for tests and demos.
//!
//! A [`SiteGraph`] is a seeded set of pages spread over virtual hosts
//! (`h0.sim`, `h1.sim`, …). [`SimWeb`] adds mutable state (page versions
//! driven by Poisson change processes, fault directives, a request log) and
//! [`serve`] exposes it over one loopback listener, routing on the `Host`
//! header. Crawlers reach it by treating the listener as an HTTP proxy for
//! `*.sim`, so URLs carry no port and bodies are byte-identical across runs.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http_body_util::Full;
use hyper::body::Incoming;
use hyper::header::{HeaderValue, CONTENT_TYPE, HOST, LOCATION};
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{Clock, Seconds};
use crate::fetchnet::HostMap;
use crate::urlkit::{parse_url, CanonicalUrl};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad site parameters: {0}")]
    BadParams(String),
    #[error("could not bind loopback listener: {0}")]
    BindFailure(std::io::Error),
    #[error("could not write request log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaDist {
    Constant(f64),
    /// Uniform choice among the listed rates.
    Choice(Vec<f64>),
    /// Log-uniform between the bounds.
    LogUniform { lo: f64, hi: f64 },
}

impl LambdaDist {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            LambdaDist::Constant(l) => *l,
            LambdaDist::Choice(ls) => *ls.choose(rng).unwrap_or(&0.0),
            LambdaDist::LogUniform { lo, hi } => (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            LambdaDist::Constant(l) => *l >= 0.0 && l.is_finite(),
            LambdaDist::Choice(ls) => !ls.is_empty() && ls.iter().all(|l| *l >= 0.0 && l.is_finite()),
            LambdaDist::LogUniform { lo, hi } => *lo > 0.0 && hi >= lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::BadParams(format!("invalid change-rate distribution {self:?}")))
        }
    }
}

/// Plants topic terms so that a fraction of pages is highly relevant, and
/// makes links prefer pages of the same class.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicPlan {
    pub terms: Vec<String>,
    pub high_fraction: f64,
    /// Distinct terms placed on a high-relevance page.
    pub high_hits: usize,
    /// Distinct terms placed on a low-relevance page.
    pub low_hits: usize,
    /// Probability that a link stays within the page's own class.
    pub locality: f64,
}

impl TopicPlan {
    /// Ten terms; half the pages carry eight of them, the rest two.
    pub fn half_and_half() -> Self {
        TopicPlan {
            terms: [
                "crawler", "frontier", "politeness", "freshness", "relevance", "harvest", "spider", "indexing",
                "hyperlink", "bandwidth",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            high_fraction: 0.5,
            high_hits: 8,
            low_hits: 2,
            locality: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeShape {
    /// Each page hangs off a random earlier page.
    Random,
    /// Every page hangs off page 0.
    Star,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams {
    pub n_pages: usize,
    pub n_hosts: usize,
    /// Mean number of links per page on top of the spanning tree.
    pub out_degree_mean: f64,
    pub lambda: LambdaDist,
    pub topic: Option<TopicPlan>,
    pub shape: TreeShape,
}

impl SiteParams {
    pub fn new(n_pages: usize, n_hosts: usize) -> Self {
        SiteParams {
            n_pages,
            n_hosts,
            out_degree_mean: 4.0,
            lambda: LambdaDist::Constant(0.0),
            topic: None,
            shape: TreeShape::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitePage {
    pub id: usize,
    pub host: String,
    /// Path plus query, as linked.
    pub path: String,
    pub links: Vec<usize>,
    pub lambda: f64,
    /// Set when a topic plan was used.
    pub high_relevance: Option<bool>,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGraph {
    pub seed: u64,
    pub pages: Vec<SitePage>,
    pub hosts: Vec<String>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "du", "ba", "fe", "go", "hu", "ji", "zo",
];

fn filler_word(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

fn page_text(rng: &mut impl Rng, terms: &[String]) -> String {
    let mut words: Vec<String> = (0..40).map(|_| filler_word(rng)).collect();
    for t in terms {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, t.clone());
    }
    words.join(" ")
}

pub fn host_name(i: usize) -> String {
    format!("h{i}.sim")
}

pub fn generate_site(seed: u64, params: &SiteParams) -> Result<SiteGraph, SimError> {
    let n = params.n_pages;
    if n == 0 || params.n_hosts == 0 {
        return Err(SimError::BadParams("need at least one page and one host".into()));
    }
    if !(params.out_degree_mean >= 0.0) || !params.out_degree_mean.is_finite() {
        return Err(SimError::BadParams("out_degree_mean must be finite and >= 0".into()));
    }
    params.lambda.validate()?;
    if let Some(t) = &params.topic {
        if t.high_hits > t.terms.len() || t.low_hits > t.terms.len() {
            return Err(SimError::BadParams("topic plan places more terms than it has".into()));
        }
        if !(0.0..=1.0).contains(&t.high_fraction) || !(0.0..=1.0).contains(&t.locality) {
            return Err(SimError::BadParams("topic fractions must lie in [0, 1]".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hosts: Vec<String> = (0..params.n_hosts).map(host_name).collect();

    let class: Vec<bool> = (0..n)
        .map(|i| match &params.topic {
            Some(t) => i == 0 || rng.gen_bool(t.high_fraction),
            None => true,
        })
        .collect();
    let locality = params.topic.as_ref().map(|t| t.locality).unwrap_or(0.0);
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); n];

    // Picks from `same` (pages of the wanted class) with probability
    // `locality`, otherwise from `pool`.
    let pick = |rng: &mut ChaCha8Rng, pool: &[usize], same: &[usize]| -> usize {
        if !same.is_empty() && rng.gen_bool(locality) {
            return same[rng.gen_range(0..same.len())];
        }
        pool[rng.gen_range(0..pool.len())]
    };

    let mut earlier: Vec<usize> = vec![0];
    let mut earlier_by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    earlier_by_class[class[0] as usize].push(0);
    for i in 1..n {
        let parent = match params.shape {
            TreeShape::Star => 0,
            TreeShape::Random => pick(&mut rng, &earlier, &earlier_by_class[class[i] as usize]),
        };
        links[parent].push(i);
        earlier.push(i);
        earlier_by_class[class[i] as usize].push(i);
    }
    if n > 1 {
        let max_extra = (2.0 * params.out_degree_mean).round() as usize;
        for i in 0..n {
            let extra = if max_extra == 0 { 0 } else { rng.gen_range(0..=max_extra) };
            for _ in 0..extra {
                let t = pick(&mut rng, &earlier, &earlier_by_class[class[i] as usize]);
                if t != i && !links[i].contains(&t) {
                    links[i].push(t);
                }
            }
        }
    }

    let mut pages = Vec::with_capacity(n);
    for (i, out) in links.into_iter().enumerate() {
        let lambda = params.lambda.sample(&mut rng);
        let (terms, high) = match &params.topic {
            Some(t) => {
                let k = if class[i] { t.high_hits } else { t.low_hits };
                let chosen: Vec<String> = t.terms.choose_multiple(&mut rng, k).cloned().collect();
                (chosen, Some(class[i]))
            }
            None => (Vec::new(), None),
        };
        let text = page_text(&mut rng, &terms);
        pages.push(SitePage {
            id: i,
            host: hosts[i % hosts.len()].clone(),
            path: if i == 0 { "/".to_string() } else { format!("/p/{i}") },
            links: out,
            lambda,
            high_relevance: high,
            title: format!("Page {i}"),
            text,
        });
    }
    Ok(SiteGraph { seed, pages, hosts })
}

pub const GALLERY_HOST: &str = "gallery.sim";

/// One host serving the same image gallery under every combination of four
/// sort orders, three thumbnail sizes, two formats and a user-content switch.
pub fn gallery_fixture() -> SiteGraph {
    let mut paths = Vec::with_capacity(48);
    for sort in ["name", "date", "size", "rating"] {
        for thumb in ["small", "medium", "large"] {
            for format in ["jpg", "png"] {
                for ugc in ["on", "off"] {
                    // Alternate parameter order; canonicalization must not care.
                    let path = if paths.len() % 2 == 0 {
                        format!("/gallery?sort={sort}&thumb={thumb}&format={format}&ugc={ugc}")
                    } else {
                        format!("/gallery?ugc={ugc}&format={format}&thumb={thumb}&sort={sort}")
                    };
                    paths.push(path);
                }
            }
        }
    }
    let all: Vec<usize> = (0..paths.len()).collect();
    let pages = paths
        .into_iter()
        .enumerate()
        .map(|(id, path)| SitePage {
            id,
            host: GALLERY_HOST.to_string(),
            path,
            links: all.clone(),
            lambda: 0.0,
            high_relevance: None,
            title: "Photo gallery".to_string(),
            text: "Twelve photographs from the harbour at dawn.".to_string(),
        })
        .collect();
    SiteGraph {
        seed: 0,
        pages,
        hosts: vec![GALLERY_HOST.to_string()],
    }
}

impl SiteGraph {
    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn url(&self, id: usize) -> CanonicalUrl {
        let p = &self.pages[id];
        parse_url(&format!("http://{}{}", p.host, p.path)).expect("generated URLs are valid")
    }

    pub fn seed_url(&self) -> CanonicalUrl {
        self.url(0)
    }

    /// Page ids reachable from page 0.
    pub fn reachable(&self) -> Vec<usize> {
        let mut seen = vec![false; self.pages.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut out = Vec::new();
        while let Some(p) = queue.pop_front() {
            out.push(p);
            for &q in &self.pages[p].links {
                if !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out
    }

    pub fn body(&self, id: usize, version: u64) -> Vec<u8> {
        let page = &self.pages[id];
        let mut html = format!(
            "<!DOCTYPE html>\n<html><head><title>{}</title>\
             <meta name=\"simweb-version\" content=\"{version}\"></head>\n<body>\n<p>{}</p>\n<ul>\n",
            page.title, page.text
        );
        for &t in &page.links {
            let target = &self.pages[t];
            let href = if target.host == page.host {
                target.path.replace('&', "&amp;")
            } else {
                format!("http://{}{}", target.host, target.path.replace('&', "&amp;"))
            };
            html.push_str(&format!("<li><a href=\"{href}\">{}</a></li>\n", target.title));
        }
        html.push_str("</ul>\n</body></html>\n");
        html.into_bytes()
    }
}

/// Version stamp of a served body.
pub fn body_version(body: &[u8]) -> Option<u64> {
    const KEY: &[u8] = b"name=\"simweb-version\" content=\"";
    let at = body.windows(KEY.len()).position(|w| w == KEY)? + KEY.len();
    let end = body[at..].iter().position(|&b| b == b'"')? + at;
    std::str::from_utf8(&body[at..end]).ok()?.parse().ok()
}

/// Misbehaviour attached to a `(host, path)` pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Wait this long in real time before answering normally.
    Delay(Duration),
    /// Drop the connection without a response.
    Refuse,
    /// `301` to `path?hop=k+1` until `hop` reaches this length, then 200.
    RedirectChain(u32),
    /// A 200 whose body has this many bytes.
    Oversize(usize),
    /// Answer with this status and a short body.
    Status(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub arrival: Seconds,
    pub host: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
}

impl LoggedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Default)]
struct PageState {
    versions: Vec<u64>,
    /// `changes[i][v]` is when page `i` moved from version `v` to `v + 1`.
    changes: Vec<Vec<Seconds>>,
}

/// A site plus its live state.
#[derive(Debug)]
pub struct SimWeb {
    graph: SiteGraph,
    index: HashMap<String, usize>,
    clock: Arc<dyn Clock>,
    /// Clock seconds per unit of `λ`.
    time_unit: Seconds,
    state: Mutex<PageState>,
    faults: Mutex<HashMap<(String, String), Fault>>,
    log: Mutex<Vec<LoggedRequest>>,
}

impl SimWeb {
    pub fn new(graph: SiteGraph, clock: Arc<dyn Clock>) -> Arc<Self> {
        Self::with_time_unit(graph, clock, 1.0)
    }

    /// Like `new`, with change rates counted per `time_unit` clock seconds.
    pub fn with_time_unit(graph: SiteGraph, clock: Arc<dyn Clock>, time_unit: Seconds) -> Arc<Self> {
        assert!(time_unit > 0.0, "time unit must be positive");
        let index = (0..graph.len()).map(|i| (graph.url(i).render(), i)).collect();
        let n = graph.len();
        Arc::new(SimWeb {
            graph,
            index,
            clock,
            time_unit,
            state: Mutex::new(PageState {
                versions: vec![0; n],
                changes: vec![Vec::new(); n],
            }),
            faults: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn graph(&self) -> &SiteGraph {
        &self.graph
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn page_id(&self, url: &CanonicalUrl) -> Option<usize> {
        let key = if url.port().is_some() {
            format!("http://{}{}", url.host(), url.path_and_query())
        } else {
            url.render()
        };
        self.index.get(&key).copied()
    }

    pub fn set_fault(&self, host: &str, path: &str, fault: Fault) {
        self.faults
            .lock()
            .expect("fault table poisoned")
            .insert((host.to_ascii_lowercase(), path.to_string()), fault);
    }

    pub fn clear_faults(&self) {
        self.faults.lock().expect("fault table poisoned").clear();
    }

    pub fn version(&self, id: usize) -> u64 {
        self.state.lock().expect("page state poisoned").versions[id]
    }

    pub fn change_times(&self, id: usize) -> Vec<Seconds> {
        self.state.lock().expect("page state poisoned").changes[id].clone()
    }

    pub fn time_unit(&self) -> Seconds {
        self.time_unit
    }

    pub fn current_body(&self, id: usize) -> Vec<u8> {
        self.graph.body(id, self.version(id))
    }

    /// Applies the change processes over `(now - dt, now]`: each page
    /// changes with probability `1 - e^(-λ·dt/unit)`, at the time of its first
    /// change in the window. Returns the ids that changed.
    pub fn advance_changes(&self, dt: Seconds, rng_seed: u64) -> Vec<usize> {
        assert!(dt > 0.0, "dt must be positive");
        let now = self.clock.now();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut state = self.state.lock().expect("page state poisoned");
        let mut changed = Vec::new();
        for (id, page) in self.graph.pages.iter().enumerate() {
            if page.lambda <= 0.0 {
                continue;
            }
            let first = -(1.0 - rng.gen::<f64>()).ln() * self.time_unit / page.lambda;
            if first < dt {
                state.versions[id] += 1;
                state.changes[id].push(now - dt + first);
                changed.push(id);
            }
        }
        changed
    }

    /// Freshness and age at time `t` of a copy of page `id` taken at
    /// version `held`, given that changes up to `t` have been applied.
    pub fn probe(&self, id: usize, held: u64, t: Seconds) -> (bool, Seconds) {
        let state = self.state.lock().expect("page state poisoned");
        if state.versions[id] == held {
            return (true, 0.0);
        }
        match state.changes[id].get(held as usize) {
            Some(&diverged) => (false, (t - diverged).max(0.0)),
            None => (false, 0.0),
        }
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.log.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("request log poisoned").len()
    }

    /// Smallest gap between consecutive arrivals for each host that saw at
    /// least two requests.
    pub fn min_gaps(&self) -> HashMap<String, Seconds> {
        let mut by_host: HashMap<String, Vec<Seconds>> = HashMap::new();
        for r in self.log.lock().expect("request log poisoned").iter() {
            by_host.entry(r.host.clone()).or_default().push(r.arrival);
        }
        by_host
            .into_iter()
            .filter_map(|(h, mut ts)| {
                ts.sort_by(f64::total_cmp);
                ts.windows(2).map(|w| w[1] - w[0]).min_by(f64::total_cmp).map(|g| (h, g))
            })
            .collect()
    }

    /// `arrival,host,path,user_agent,headers` with headers joined by `|`.
    pub fn write_log_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Log(e.to_string()))?;
        w.write_record(["arrival", "host", "path", "user_agent", "headers"])
            .map_err(|e| SimError::Log(e.to_string()))?;
        for r in self.requests() {
            let headers: Vec<String> = r.headers.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            w.write_record([
                format!("{:.6}", r.arrival),
                r.host.clone(),
                r.path.clone(),
                r.header("user-agent").unwrap_or("").to_string(),
                headers.join("|"),
            ])
            .map_err(|e| SimError::Log(e.to_string()))?;
        }
        w.flush().map_err(|e| SimError::Log(e.to_string()))
    }

    async fn respond(&self, req: Request<Incoming>) -> Result<Response<Full<Bytes>>, std::io::Error> {
        let host = req
            .headers()
            .get(HOST)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
            .or_else(|| req.uri().host().map(str::to_string))
            .unwrap_or_default();
        let host = host.rsplit_once(':').map(|(h, _)| h.to_string()).unwrap_or(host).to_ascii_lowercase();
        let path_q = req
            .uri()
            .path_and_query()
            .map(|p| p.as_str().to_string())
            .unwrap_or_else(|| "/".into());
        let headers = req
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
            .collect();
        self.log.lock().expect("request log poisoned").push(LoggedRequest {
            arrival: self.clock.now(),
            host: host.clone(),
            path: path_q.clone(),
            headers,
        });
        debug!("simweb {host}{path_q}");

        let fault = self
            .faults
            .lock()
            .expect("fault table poisoned")
            .get(&(host.clone(), req.uri().path().to_string()))
            .cloned();
        match fault {
            Some(Fault::Delay(d)) => tokio::time::sleep(d).await,
            Some(Fault::Refuse) => {
                return Err(std::io::Error::new(std::io::ErrorKind::ConnectionAborted, "refused by fault"));
            }
            Some(Fault::RedirectChain(len)) => {
                let hop: u32 = req
                    .uri()
                    .query()
                    .and_then(|q| q.strip_prefix("hop="))
                    .and_then(|h| h.parse().ok())
                    .unwrap_or(0);
                if hop < len {
                    let mut resp = Response::new(Full::new(Bytes::from_static(b"moved")));
                    *resp.status_mut() = StatusCode::MOVED_PERMANENTLY;
                    let loc = format!("{}?hop={}", req.uri().path(), hop + 1);
                    resp.headers_mut()
                        .insert(LOCATION, HeaderValue::from_str(&loc).expect("ascii location"));
                    return Ok(resp);
                }
                return Ok(html(StatusCode::OK, format!("<p>end of chain after {hop} hops</p>").into_bytes()));
            }
            Some(Fault::Oversize(n)) => return Ok(html(StatusCode::OK, vec![b'a'; n])),
            Some(Fault::Status(code)) => {
                let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                return Ok(html(status, format!("<p>status {code}</p>").into_bytes()));
            }
            None => {}
        }

        let id = parse_url(&format!("http://{host}{path_q}"))
            .ok()
            .and_then(|u| self.index.get(&u.render()).copied());
        Ok(match id {
            Some(id) => html(StatusCode::OK, self.current_body(id)),
            None if fault.is_some() => html(StatusCode::OK, b"<p>ok</p>".to_vec()),
            None => html(StatusCode::NOT_FOUND, b"<p>not found</p>".to_vec()),
        })
    }
}

fn html(status: StatusCode, body: Vec<u8>) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(body)));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(CONTENT_TYPE, HeaderValue::from_static("text/html; charset=utf-8"));
    resp
}

/// A running simweb listener.
#[derive(Debug)]
pub struct SimServer {
    addr: SocketAddr,
    web: Arc<SimWeb>,
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl SimServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn web(&self) -> &Arc<SimWeb> {
        &self.web
    }

    /// Routes every host of the site to this listener.
    pub fn host_map(&self) -> HostMap {
        let mut m = HostMap::new();
        m.route("*.sim", self.addr);
        m
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.task.await;
    }
}

/// Starts serving `web` on `127.0.0.1:port` (0 picks a free port).
pub async fn serve(web: Arc<SimWeb>, port: u16) -> Result<SimServer, SimError> {
    let listener = TcpListener::bind(("127.0.0.1", port)).await.map_err(SimError::BindFailure)?;
    let addr = listener.local_addr().map_err(SimError::BindFailure)?;
    let (stop, mut stopped) = watch::channel(false);
    let served = web.clone();
    let task = tokio::spawn(async move {
        loop {
            let stream = tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((s, _)) => s,
                    Err(_) => continue,
                },
                _ = stopped.changed() => break,
            };
            let _ = stream.set_nodelay(true);
            let web = served.clone();
            let mut conn_stop = stopped.clone();
            tokio::spawn(async move {
                let svc = service_fn(move |req| {
                    let web = web.clone();
                    async move { web.respond(req).await }
                });
                let conn = hyper::server::conn::http1::Builder::new().serve_connection(TokioIo::new(stream), svc);
                tokio::pin!(conn);
                tokio::select! {
                    _ = conn.as_mut() => {}
                    _ = conn_stop.changed() => conn.as_mut().graceful_shutdown(),
                }
            });
        }
    });
    Ok(SimServer { addr, web, stop, task })
}

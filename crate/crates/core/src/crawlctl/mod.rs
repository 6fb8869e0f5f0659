//! The master crawler: configuration, the crawl loop, reports and the
//! revisit driver.

mod config;
mod master;
mod report;
mod revisit_loop;

use std::sync::Arc;

use thiserror::Error;

use crate::clock::{Clock, SimClock, SystemClock};
use crate::fetchnet::{FetchError, HostMap};
use crate::revisit::RevisitError;
use crate::simweb::{generate_site, gallery_fixture, serve, SimError, SimServer, SimWeb};
use crate::store::StoreError;

pub use config::{
    is_local_host, load_config, parse_config, ClockKind, ConfigError, CrawlConfig, LambdaSource, RevisitSettings,
    SimwebSpec,
};
pub use master::{run_crawl, run_crawl_in, FetchLogRow};
pub use report::CrawlReport;
pub use revisit_loop::{run_revisit_loop, run_revisit_loop_in, RevisitReport};

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage failure: {0}")]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Revisit(#[from] RevisitError),
    #[error("run directory {0}")]
    RunDir(String),
    #[error("checkpoint belongs to a different configuration (digest {found}, expected {expected})")]
    ConfigMismatch { found: String, expected: String },
    #[error("no baseline crawl in the store")]
    NoBaseline,
    #[error("cannot write report: {0}")]
    Report(String),
}

/// What a crawl talks to: a clock, a host map, and optionally the simulated
/// web behind it.
#[derive(Debug, Clone)]
pub struct CrawlEnv {
    pub clock: Arc<dyn Clock>,
    pub hosts: HostMap,
    pub web: Option<Arc<SimWeb>>,
}

impl CrawlEnv {
    /// Builds the environment a config asks for, starting the embedded
    /// simweb listener when there is one. Keep the server alive for as long
    /// as the environment is used.
    pub async fn start(cfg: &CrawlConfig) -> Result<(CrawlEnv, Option<SimServer>), CrawlError> {
        let clock: Arc<dyn Clock> = match cfg.clock {
            ClockKind::Simulated => Arc::new(SimClock::new(cfg.clock_start)),
            ClockKind::Real => Arc::new(SystemClock),
        };
        let mut hosts = cfg.hosts.clone();
        let Some(spec) = &cfg.simweb else {
            return Ok((CrawlEnv { clock, hosts, web: None }, None));
        };
        let graph = if spec.gallery {
            gallery_fixture()
        } else {
            generate_site(spec.seed, &spec.params)?
        };
        let web = SimWeb::with_time_unit(graph, clock.clone(), spec.time_unit);
        for (host, path, fault) in &spec.faults {
            web.set_fault(host, path, fault.clone());
        }
        let server = serve(web.clone(), spec.port).await?;
        hosts.route("*.sim", server.addr());
        Ok((
            CrawlEnv {
                clock,
                hosts,
                web: Some(web),
            },
            Some(server),
        ))
    }
}

mod common;

use std::collections::HashSet;

use common::{crawl, politeness_breaches, reachable_urls};
use epow::crawlctl::{load_config, CrawlEnv, ConfigError};
use epow::governor::StopReason;
use epow::simweb::GALLERY_HOST;

const TOPIC: &str = "topic crawler frontier politeness freshness relevance harvest spider indexing hyperlink bandwidth";

#[tokio::test]
async fn star_graph_is_crawled_to_exhaustion() {
    let c = crawl("simweb 1 4 1\nsimweb_star on\n").await;
    assert_eq!(c.report.pages_fetched, 4);
    assert_eq!(c.report.stop_reason, StopReason::FrontierExhausted);
    assert_eq!(c.stored_urls(), reachable_urls(c.graph()));
}

#[tokio::test]
async fn page_budget_stops_exactly() {
    let c = crawl("simweb 1 4 1\nsimweb_star on\nmax_pages 2\n").await;
    assert_eq!(c.report.pages_fetched, 2);
    assert_eq!(c.report.stop_reason, StopReason::PageBudget);
    assert_eq!(c.requests().len(), 2);
}

#[tokio::test]
async fn depth_limit_exhausts_the_frontier_by_depth() {
    let c = crawl("simweb 3 60 6\nmax_depth 1\n").await;
    assert_eq!(c.report.stop_reason, StopReason::DepthExhausted);
    assert!(c.report.log.iter().all(|r| r.depth <= 1));
    let seed_links: HashSet<usize> = c.graph().pages[0].links.iter().copied().filter(|&j| j != 0).collect();
    assert_eq!(c.report.pages_fetched as usize, 1 + seed_links.len());
}

#[tokio::test]
async fn report_arithmetic_and_no_refetch() {
    let c = crawl("simweb 9 150 15\n").await;
    let r = &c.report;
    assert_eq!(r.pages_fetched, r.outcomes.values().sum::<u64>());
    assert!(r.unique_fingerprints <= r.pages_fetched);
    let urls: Vec<&str> = r.log.iter().map(|row| row.url.as_str()).collect();
    let distinct: HashSet<&str> = urls.iter().copied().collect();
    assert_eq!(urls.len(), distinct.len(), "a URL was fetched twice");
    assert_eq!(c.stored_urls(), reachable_urls(c.graph()));
}

#[tokio::test]
async fn focused_crawl_prefers_relevant_pages() {
    let c = crawl(&format!("simweb 7 200 20\nsimweb_topic on\n{TOPIC}\n")).await;
    let graph = c.graph();
    let web = c.env.web.as_ref().unwrap();
    let mut log = c.report.log.clone();
    log.sort_by_key(|r| r.dispatch_index);
    let first: Vec<_> = log.iter().filter(|r| r.depth > 0).take(50).collect();
    assert_eq!(first.len(), 50);
    let high = first
        .iter()
        .filter(|r| {
            let id = web.page_id(&epow::urlkit::parse_url(&r.url).unwrap()).unwrap();
            graph.pages[id].high_relevance == Some(true)
        })
        .count();
    assert!(high >= 35, "only {high}/50 of the first fetches were high-relevance");
}

#[tokio::test]
async fn topicless_crawl_is_breadth_first() {
    let c = crawl("simweb 4 80 1\nhost_interval_seconds 0\ndownloaders 1\n").await;
    let depths: Vec<u32> = c.report.log.iter().map(|r| r.depth).collect();
    assert!(depths.windows(2).all(|w| w[0] <= w[1]), "depths {depths:?}");
    assert!(c.report.log.iter().all(|r| r.priority == 1.0));
}

#[tokio::test]
async fn gallery_duplicates_are_counted() {
    let c = crawl("simweb 0 1 1\nsimweb_gallery on\n").await;
    assert_eq!(c.report.pages_fetched, 48);
    assert_eq!(c.report.unique_fingerprints, 1);
    assert_eq!(c.report.duplicates, 47);
    assert_eq!(c.report.log.iter().filter(|r| r.duplicate).count(), 47);
    assert!(c.requests().iter().all(|r| r.host == GALLERY_HOST));
}

#[tokio::test]
async fn default_interval_is_honoured_per_host() {
    let c = crawl("simweb 5 200 20\n").await;
    assert_eq!(c.report.politeness_violations, 0);
    let log = c.requests();
    assert_eq!(log.len(), 200);
    assert!(politeness_breaches(&log, 20.0).is_empty());
    assert!(c.report.duration >= 20.0 * (200.0 / 20.0 - 1.0));
}

#[tokio::test]
async fn configured_interval_and_rate_are_honoured() {
    let c = crawl("simweb 5 120 4\nhost_interval_seconds 45\nrate_default 0.05\n").await;
    let log = c.requests();
    assert!(politeness_breaches(&log, 45.0).is_empty());
    let mut times: Vec<f64> = log.iter().map(|r| r.arrival).collect();
    times.sort_by(f64::total_cmp);
    // One token per 20 s with a burst of one.
    assert!(times.windows(2).all(|w| w[1] - w[0] >= 20.0 - 1e-6));
}

#[tokio::test]
async fn user_agent_reaches_the_server() {
    let c = crawl("simweb 2 10 2\nuser_agent testbot/3.1 (+http://tests.example/bot)\n").await;
    assert!(c
        .requests()
        .iter()
        .all(|r| r.header("user-agent") == Some("testbot/3.1 (+http://tests.example/bot)")));
}

#[tokio::test]
async fn server_errors_are_retried_once_and_hosts_quarantined() {
    let text = "simweb 8 40 2\nsimweb_star on\nhost_interval_seconds 1\n\
                simweb_fault h1.sim /p/1 status 503\nquarantine_after 3\n";
    let c = crawl(text).await;
    let hits: Vec<_> = c.requests().into_iter().filter(|r| r.path == "/p/1").collect();
    assert_eq!(hits.len(), 2, "one attempt plus one retry");
    assert_eq!(c.report.outcome("server_error"), 2);
    assert!(c.report.retries >= 1);

    let text = "simweb 8 40 2\nsimweb_star on\nhost_interval_seconds 1\nquarantine_after 3\n\
                simweb_fault h1.sim /p/1 status 500\nsimweb_fault h1.sim /p/3 status 500\n\
                simweb_fault h1.sim /p/5 status 500\n";
    let c = crawl(text).await;
    // h1 serves the odd pages; three failures in a row end its crawl.
    assert_eq!(c.report.quarantined_hosts, vec!["h1.sim".to_string()]);
    let h1_hits = c.requests().iter().filter(|r| r.host == "h1.sim").count();
    assert_eq!(h1_hits, 3);
    assert_eq!(c.report.pages_fetched, 20 + 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let c = crawl("simweb 8 10 1\nsimweb_star on\nhost_interval_seconds 0\nsimweb_fault h0.sim /p/2 status 404\n").await;
    let hits = c.requests().iter().filter(|r| r.path == "/p/2").count();
    assert_eq!(hits, 1);
    assert_eq!(c.report.outcome("client_error"), 1);
    assert_eq!(c.report.retries, 0);
}

#[tokio::test]
async fn redirect_targets_are_queued_when_chain_is_too_long() {
    let c = crawl(
        "simweb 8 3 1\nsimweb_star on\nhost_interval_seconds 0\nmax_redirects 2\nsimweb_fault h0.sim /p/1 redirect 3\n",
    )
    .await;
    assert_eq!(c.report.outcome("redirect"), 1);
    let paths: Vec<String> = c.requests().iter().map(|r| r.path.clone()).collect();
    assert!(paths.contains(&"/p/1?hop=3".to_string()), "{paths:?}");
}

#[tokio::test]
async fn fresh_run_refuses_a_used_directory() {
    let c = crawl("simweb 1 4 1\n").await;
    let cfg = common::config("simweb 1 4 1\n", c.dir.path());
    let err = epow::crawlctl::run_crawl_in(&cfg, &c.env, false).await.unwrap_err();
    assert!(err.to_string().contains("--resume"), "{err}");
}

#[tokio::test]
async fn run_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crawl.conf");
    std::fs::write(&path, "simweb 3 30 3\nrun_dir out\n").unwrap();
    let cfg = load_config(&path).unwrap();
    let report = epow::crawlctl::run_crawl(&cfg, false).await.unwrap();
    let out = dir.path().join("out");
    for f in ["report.csv", "crawl_log.csv", "requests.csv", "pages.rec", "pages.body"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = std::fs::read_to_string(out.join("crawl_log.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, report.pages_fetched + 1);
    let summary = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(summary.contains("politeness_violations,0"));
}

#[test]
fn config_errors_carry_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "seed http://a.sim/\n# comment\npolitenes 5\n").unwrap();
    let err = load_config(&path).unwrap_err();
    assert_eq!(err, ConfigError::UnknownKey { line: 3, key: "politenes".into() });
    std::fs::write(&path, "seed http://a.sim/\nhost_interval_seconds -1\n").unwrap();
    assert!(matches!(load_config(&path), Err(ConfigError::Invalid { line: 2, .. })));
    assert!(matches!(
        load_config(&dir.path().join("missing.conf")),
        Err(ConfigError::Unreadable { .. })
    ));
}

#[tokio::test]
async fn env_without_simweb_has_no_web() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config("seed http://127.0.0.1:9/\nmax_pages 1\ntimeout_seconds 1\n", dir.path());
    let (env, server) = CrawlEnv::start(&cfg).await.unwrap();
    assert!(env.web.is_none() && server.is_none());
    let report = epow::crawlctl::run_crawl_in(&cfg, &env, false).await.unwrap();
    assert_eq!(report.pages_fetched, 1);
    assert_eq!(report.outcome("network_error"), 1);
}

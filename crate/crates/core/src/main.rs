use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use epow::clock::SystemClock;
use epow::crawlctl::{load_config, run_crawl, run_revisit_loop};
use epow::irmetrics::eval_report;
use epow::revisit::RevisitPolicy;
use epow::simweb::{gallery_fixture, generate_site, serve, SimWeb, SiteParams, TopicPlan};

#[derive(Parser)]
#[command(name = "epow", version, about = "Polite focused web crawler with revisit planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a crawl described by a config file.
    Crawl {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Serve a synthetic web on loopback until interrupted.
    Simulate {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        pages: usize,
        #[arg(long, default_value_t = 10)]
        hosts: usize,
        /// Serve the 48-URL duplicate gallery instead of a generated site.
        #[arg(long)]
        gallery: bool,
        /// Plant topic terms on the pages.
        #[arg(long)]
        topic: bool,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Where to write the request log on shutdown.
        #[arg(long, default_value = "requests.csv")]
        log: PathBuf,
    },
    /// Re-fetch a crawled collection under a revisit policy.
    Revisit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: RevisitPolicy,
        /// Visits per time unit across the collection.
        #[arg(long)]
        budget: f64,
    },
    /// Precision and recall of a ranked run against a relevance list.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        relevant: PathBuf,
    },
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Crawl { config, resume } => {
            let cfg = load_config(&config)?;
            let report = run_crawl(&cfg, resume).await?;
            print!("{report}");
            println!("files written to {}", cfg.run_dir.display());
        }
        Command::Simulate {
            seed,
            pages,
            hosts,
            gallery,
            topic,
            port,
            log,
        } => simulate(seed, pages, hosts, gallery, topic, port, &log).await?,
        Command::Revisit { config, policy, budget } => {
            let cfg = load_config(&config)?;
            let mut settings = cfg.revisit.clone();
            settings.policy = policy;
            settings.budget = Some(budget);
            let report = run_revisit_loop(&cfg, &settings).await?;
            print!("{report}");
            println!("files written to {}", cfg.run_dir.display());
        }
        Command::Eval { run, relevant } => {
            let ranking = read_run(&run)?;
            let relevant: HashSet<String> = read_lines(&relevant)?.into_iter().collect();
            print!("{}", eval_report(&ranking, &relevant)?);
        }
    }
    Ok(())
}

async fn simulate(seed: u64, pages: usize, hosts: usize, gallery: bool, topic: bool, port: u16, log: &Path) -> Result<()> {
    let graph = if gallery {
        gallery_fixture()
    } else {
        let mut params = SiteParams::new(pages, hosts);
        if topic {
            params.topic = Some(TopicPlan::half_and_half());
        }
        generate_site(seed, &params)?
    };
    let n_hosts = graph.hosts.len();
    let seed_url = graph.seed_url();
    let web = SimWeb::new(graph, Arc::new(SystemClock));
    let server = serve(web.clone(), port).await?;
    println!("simweb listening on {} ({} pages, {} hosts)", server.addr(), web.graph().len(), n_hosts);
    println!("hosts resolve through the listener as an HTTP proxy, e.g.");
    println!("  curl -x http://{} {}", server.addr(), seed_url);
    println!("crawl config line: route *.sim {}", server.addr());
    println!("press Ctrl-C to stop and write {}", log.display());
    tokio::signal::ctrl_c().await.context("waiting for Ctrl-C")?;
    let web = server.web().clone();
    server.shutdown().await;
    web.write_log_csv(log)?;
    println!("{} requests logged to {}", web.request_count(), log.display());
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// A run file is either one id per line or a CSV with a `url` column, such
/// as `crawl_log.csv`.
fn read_run(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    let Some(header) = lines.first() else {
        bail!("{} is empty", path.display());
    };
    if !header.contains(',') {
        return Ok(lines);
    }
    let mut reader = csv::Reader::from_path(path)?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == "url")
        .with_context(|| format!("{} has no url column", path.display()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        if let Some(v) = row?.get(col) {
            out.push(v.to_string());
        }
    }
    Ok(out)
}

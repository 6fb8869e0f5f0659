use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::clock::Seconds;
use crate::governor::StopReason;

use super::master::FetchLogRow;
use super::CrawlError;

#[derive(Debug, Clone, PartialEq)]
pub struct CrawlReport {
    /// Every completed fetch attempt, retries included.
    pub pages_fetched: u64,
    pub unique_fingerprints: u64,
    /// Successful fetches whose body fingerprint was already stored.
    pub duplicates: u64,
    /// Outcome label to count; sums to `pages_fetched`.
    pub outcomes: BTreeMap<String, u64>,
    pub max_depth: u32,
    /// Clock time covered by the crawl.
    pub duration: Seconds,
    pub wall_seconds: f64,
    pub stop_reason: StopReason,
    pub politeness_violations: u64,
    /// Pages per wall-clock second.
    pub throughput: f64,
    pub retries: u64,
    /// Fetches of pages that were already stored before a resume.
    pub recrawled: u64,
    pub quarantined_hosts: Vec<String>,
    pub stored_urls: usize,
    pub checkpoints_written: u64,
    pub resumed: bool,
    /// This session's fetches, in completion order.
    pub log: Vec<FetchLogRow>,
}

impl CrawlReport {
    pub fn outcome(&self, label: &str) -> u64 {
        self.outcomes.get(label).copied().unwrap_or(0)
    }

    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("pages_fetched".to_string(), self.pages_fetched.to_string()),
            ("unique_fingerprints".into(), self.unique_fingerprints.to_string()),
            ("duplicates".into(), self.duplicates.to_string()),
        ];
        for (k, v) in &self.outcomes {
            rows.push((format!("outcome_{k}"), v.to_string()));
        }
        rows.extend([
            ("max_depth".to_string(), self.max_depth.to_string()),
            ("duration_seconds".into(), format!("{:.3}", self.duration)),
            ("wall_seconds".into(), format!("{:.3}", self.wall_seconds)),
            ("stop_reason".into(), self.stop_reason.to_string()),
            ("politeness_violations".into(), self.politeness_violations.to_string()),
            ("throughput_pages_per_second".into(), format!("{:.1}", self.throughput)),
            ("retries".into(), self.retries.to_string()),
            ("recrawled".into(), self.recrawled.to_string()),
            ("quarantined_hosts".into(), self.quarantined_hosts.join(" ")),
            ("stored_urls".into(), self.stored_urls.to_string()),
            ("checkpoints_written".into(), self.checkpoints_written.to_string()),
            ("resumed".into(), self.resumed.to_string()),
        ]);
        rows
    }

    /// Writes `report.csv` and `crawl_log.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(), CrawlError> {
        let err = |e: csv::Error| CrawlError::Report(e.to_string());
        let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(err)?;
        w.write_record(["key", "value"]).map_err(err)?;
        for (k, v) in self.rows() {
            w.write_record([k, v]).map_err(err)?;
        }
        w.flush().map_err(|e| CrawlError::Report(e.to_string()))?;

        let mut w = csv::Writer::from_path(dir.join("crawl_log.csv")).map_err(err)?;
        for row in &self.log {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| CrawlError::Report(e.to_string()))
    }
}

impl fmt::Display for CrawlReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "crawl report")?;
        for (k, v) in self.rows() {
            writeln!(f, "  {k:<28} {v}")?;
        }
        Ok(())
    }
}

//! Precision and recall over the four-way split of a document space.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{0} id(s) are outside the corpus")]
    NotInCorpus(usize),
    #[error("nothing was retrieved; precision is undefined")]
    EmptyRetrieval,
    #[error("no relevant items; recall is undefined")]
    NoRelevantItems,
    #[error("ranking lists {0:?} more than once")]
    DuplicateInRanking(String),
    #[error("ideal curve needs 0 < N <= M (N={n}, M={m})")]
    BadShape { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPartition<T: Ord> {
    pub relevant_retrieved: BTreeSet<T>,
    pub nonrelevant_retrieved: BTreeSet<T>,
    pub relevant_not_retrieved: BTreeSet<T>,
    pub nonrelevant_not_retrieved: BTreeSet<T>,
}

pub fn partition<T: Ord + Clone>(
    retrieved: &BTreeSet<T>,
    relevant: &BTreeSet<T>,
    corpus: &BTreeSet<T>,
) -> Result<SegmentPartition<T>, MetricsError> {
    let stray = retrieved
        .iter()
        .chain(relevant.iter())
        .filter(|id| !corpus.contains(id))
        .collect::<BTreeSet<_>>()
        .len();
    if stray > 0 {
        return Err(MetricsError::NotInCorpus(stray));
    }
    let mut p = SegmentPartition {
        relevant_retrieved: BTreeSet::new(),
        nonrelevant_retrieved: BTreeSet::new(),
        relevant_not_retrieved: BTreeSet::new(),
        nonrelevant_not_retrieved: BTreeSet::new(),
    };
    for id in corpus {
        let seg = match (retrieved.contains(id), relevant.contains(id)) {
            (true, true) => &mut p.relevant_retrieved,
            (true, false) => &mut p.nonrelevant_retrieved,
            (false, true) => &mut p.relevant_not_retrieved,
            (false, false) => &mut p.nonrelevant_not_retrieved,
        };
        seg.insert(id.clone());
    }
    Ok(p)
}

pub fn precision<T: Ord>(p: &SegmentPartition<T>) -> Result<f64, MetricsError> {
    let retrieved = p.relevant_retrieved.len() + p.nonrelevant_retrieved.len();
    if retrieved == 0 {
        return Err(MetricsError::EmptyRetrieval);
    }
    Ok(p.relevant_retrieved.len() as f64 / retrieved as f64)
}

pub fn recall<T: Ord>(p: &SegmentPartition<T>) -> Result<f64, MetricsError> {
    let relevant = p.relevant_retrieved.len() + p.relevant_not_retrieved.len();
    if relevant == 0 {
        return Err(MetricsError::NoRelevantItems);
    }
    Ok(p.relevant_retrieved.len() as f64 / relevant as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn precisions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.precision).collect()
    }

    pub fn recalls(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.recall).collect()
    }
}

/// Precision and recall after each rank of `ranking`.
pub fn pr_curve<T: Eq + Hash + std::fmt::Debug>(ranking: &[T], relevant: &HashSet<T>) -> Result<PrCurve, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::NoRelevantItems);
    }
    let mut seen = HashSet::with_capacity(ranking.len());
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(ranking.len());
    for (i, id) in ranking.iter().enumerate() {
        if !seen.insert(id) {
            return Err(MetricsError::DuplicateInRanking(format!("{id:?}")));
        }
        if relevant.contains(id) {
            hits += 1;
        }
        let k = i + 1;
        points.push(PrPoint {
            rank: k,
            recall: hits as f64 / relevant.len() as f64,
            precision: hits as f64 / k as f64,
        });
    }
    Ok(PrCurve { points })
}

/// Curve of a system that returns all `n_relevant` items before any of the
/// other `n_total - n_relevant`.
pub fn ideal_pr_curve(n_relevant: usize, n_total: usize) -> Result<PrCurve, MetricsError> {
    if n_relevant == 0 || n_relevant > n_total {
        return Err(MetricsError::BadShape {
            n: n_relevant,
            m: n_total,
        });
    }
    let points = (1..=n_total)
        .map(|k| {
            let hits = k.min(n_relevant) as f64;
            PrPoint {
                rank: k,
                recall: hits / n_relevant as f64,
                precision: hits / k as f64,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Report for the `eval` command: one `k,recall,precision` row per rank,
/// then summary precision and recall of the whole run.
pub fn eval_report(ranking: &[String], relevant: &HashSet<String>) -> Result<String, MetricsError> {
    let curve = pr_curve(ranking, relevant)?;
    let mut out = String::from("k,recall,precision\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.rank, p.recall, p.precision);
    }
    let hits = ranking.iter().filter(|id| relevant.contains(*id)).count();
    if ranking.is_empty() {
        return Err(MetricsError::EmptyRetrieval);
    }
    let precision = hits as f64 / ranking.len() as f64;
    let _ = writeln!(out, "summary_precision,{precision:.6}");
    let _ = writeln!(out, "summary_recall,{:.6}", hits as f64 / relevant.len() as f64);
    let _ = writeln!(out, "overhead,{:.1}%", (1.0 - precision) * 100.0);
    Ok(out)
}

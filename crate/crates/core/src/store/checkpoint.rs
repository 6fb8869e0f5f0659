//! Self-validating checkpoint files, published atomically as
//! `checkpoint.N.ckpt` and verified before older ones are pruned.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use sha2::{Digest, Sha256};

use super::codec::{DecodeError, Decoder, Encoder};
use super::repo::PageRepo;
use super::StoreError;
use crate::clock::Seconds;
use crate::frontier::{CrawlRequest, Frontier, QueueTag, SnapshotEntry};
use crate::governor::HostLedger;
use crate::urlkit::{parse_url, CanonicalUrl, SeenSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EPOWCKP1";
pub const CHECKPOINT_FORMAT: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Monotonic checkpoint number; also the `N` in the file name.
    pub version: u64,
    pub created_at: Seconds,
    /// Pages fetched so far.
    pub crawl_seq: u64,
    /// SHA-256 of the crawl configuration.
    pub config_digest: [u8; 32],
    /// Next sequence number the frontier will hand out.
    pub next_seq: u64,
    /// Records in the page repository when the checkpoint was taken.
    pub repo_records: u64,
    pub frontier: Vec<SnapshotEntry>,
    pub seen: Vec<CanonicalUrl>,
    pub hosts: Vec<(String, Seconds)>,
    /// Dispatched but not yet confirmed; these are fetched again on recovery.
    pub in_flight: Vec<CrawlRequest>,
    /// URLs that already used their single retry.
    pub retried: Vec<CanonicalUrl>,
    /// Named counters carried across a restart.
    pub counters: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn config_digest_hex(&self) -> String {
        self.config_digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .unwrap_or(0)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(CHECKPOINT_MAGIC)
            .u32(CHECKPOINT_FORMAT)
            .u64(self.version)
            .f64(self.created_at)
            .u64(self.crawl_seq)
            .raw(&self.config_digest)
            .u64(self.next_seq)
            .u64(self.repo_records);
        e.u32(self.frontier.len() as u32);
        for entry in &self.frontier {
            encode_request(&mut e, &entry.request);
            e.u8(match entry.tag {
                QueueTag::Cq => 0,
                QueueTag::Pq => 1,
            });
        }
        e.u32(self.seen.len() as u32);
        for url in &self.seen {
            e.str(&url.render());
        }
        e.u32(self.hosts.len() as u32);
        for (host, t) in &self.hosts {
            e.str(host).f64(*t);
        }
        e.u32(self.in_flight.len() as u32);
        for r in &self.in_flight {
            encode_request(&mut e, r);
        }
        e.u32(self.retried.len() as u32);
        for url in &self.retried {
            e.str(&url.render());
        }
        e.u32(self.counters.len() as u32);
        for (k, v) in &self.counters {
            e.str(k).u64(*v);
        }
        let digest = Sha256::digest(e.as_slice());
        e.raw(&digest);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST_LEN {
            return Err(DecodeError::Truncated(bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(DecodeError::BadValue {
                at: body.len(),
                what: "integrity digest mismatch".into(),
            });
        }
        let mut d = Decoder::new(body);
        if d.take(8)? != CHECKPOINT_MAGIC {
            return Err(d.bad("not a checkpoint file"));
        }
        let format = d.u32()?;
        if format != CHECKPOINT_FORMAT {
            return Err(d.bad(format!("unsupported format {format}")));
        }
        let version = d.u64()?;
        let created_at = d.f64()?;
        let crawl_seq = d.u64()?;
        let config_digest = d.fixed()?;
        let next_seq = d.u64()?;
        let repo_records = d.u64()?;
        let mut frontier = Vec::new();
        for _ in 0..d.u32()? {
            let request = decode_request(&mut d)?;
            let tag = match d.u8()? {
                0 => QueueTag::Cq,
                1 => QueueTag::Pq,
                _ => return Err(d.bad("bad queue tag")),
            };
            frontier.push(SnapshotEntry { request, tag });
        }
        let mut seen = Vec::new();
        for _ in 0..d.u32()? {
            seen.push(decode_url(&mut d)?);
        }
        let mut hosts = Vec::new();
        for _ in 0..d.u32()? {
            hosts.push((d.str()?.to_string(), d.f64()?));
        }
        let mut in_flight = Vec::new();
        for _ in 0..d.u32()? {
            in_flight.push(decode_request(&mut d)?);
        }
        let mut retried = Vec::new();
        for _ in 0..d.u32()? {
            retried.push(decode_url(&mut d)?);
        }
        let mut counters = Vec::new();
        for _ in 0..d.u32()? {
            counters.push((d.str()?.to_string(), d.u64()?));
        }
        if d.remaining() != 0 {
            return Err(d.bad("trailing bytes"));
        }
        Ok(Checkpoint {
            version,
            created_at,
            crawl_seq,
            config_digest,
            next_seq,
            repo_records,
            frontier,
            seen,
            hosts,
            in_flight,
            retried,
            counters,
        })
    }
}

fn encode_request(e: &mut Encoder, r: &CrawlRequest) {
    e.str(&r.url.render()).f64(r.priority).u32(r.depth).u64(r.seq);
}

fn decode_url(d: &mut Decoder<'_>) -> Result<CanonicalUrl, DecodeError> {
    let text = d.str()?;
    parse_url(text).map_err(|e| d.bad(e.to_string()))
}

fn decode_request(d: &mut Decoder<'_>) -> Result<CrawlRequest, DecodeError> {
    let url = decode_url(d)?;
    let priority = d.f64()?;
    let depth = d.u32()?;
    let seq = d.u64()?;
    Ok(CrawlRequest::new(url, priority, depth, seq))
}

pub fn checkpoint_path(dir: &Path, version: u64) -> PathBuf {
    dir.join(format!("checkpoint.{version}.ckpt"))
}

/// Checkpoint files in `dir`, newest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(n) = name
            .strip_prefix("checkpoint.")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        out.push((n, entry.path()));
    }
    out.sort_by_key(|e| std::cmp::Reverse(e.0));
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    let bytes = fs::read(path)?;
    Checkpoint::decode(&bytes).map_err(|e| StoreError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `ckpt` as `checkpoint.{version}.ckpt`: temp file, fsync, rename,
/// directory fsync, read-back verification. Only after that are checkpoints
/// beyond the newest `keep` removed.
pub fn write_checkpoint(dir: &Path, ckpt: &Checkpoint, keep: usize) -> Result<PathBuf, StoreError> {
    fs::create_dir_all(dir)?;
    let path = checkpoint_path(dir, ckpt.version);
    let tmp = dir.join(format!(".checkpoint.{}.tmp", ckpt.version));
    let bytes = ckpt.encode();
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    File::open(dir)?.sync_all()?;
    let back = read_checkpoint(&path)?;
    if &back != ckpt {
        return Err(StoreError::CorruptCheckpoint {
            path,
            reason: "read-back differs from what was written".into(),
        });
    }
    for (_, old) in list_checkpoints(dir)?.into_iter().skip(keep.max(1)) {
        if let Err(e) = fs::remove_file(&old) {
            warn!("could not prune {}: {e}", old.display());
        }
    }
    Ok(path)
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
    /// Newer files that failed validation and were passed over.
    pub skipped: Vec<StoreError>,
}

/// Newest checkpoint in `dir` that validates. `Ok(None)` when there are no
/// checkpoint files at all; `CorruptCheckpoint` when none of them validate.
pub fn load_latest(dir: &Path) -> Result<Option<LoadedCheckpoint>, StoreError> {
    let mut skipped = Vec::new();
    for (_, path) in list_checkpoints(dir)? {
        match read_checkpoint(&path) {
            Ok(checkpoint) => {
                for e in &skipped {
                    warn!("{e}");
                }
                return Ok(Some(LoadedCheckpoint {
                    checkpoint,
                    path,
                    skipped,
                }));
            }
            Err(e @ StoreError::CorruptCheckpoint { .. }) => skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    match skipped.into_iter().next() {
        Some(first) => Err(first),
        None => Ok(None),
    }
}

/// Crawl state rebuilt from a checkpoint.
#[derive(Debug)]
pub struct RecoveredState {
    pub frontier: Frontier,
    pub seen: SeenSet,
    pub ledger: HostLedger,
    /// Requests that were in flight at checkpoint time; they must be fetched
    /// again.
    pub recrawl: Vec<CrawlRequest>,
    pub retried: BTreeSet<CanonicalUrl>,
    pub next_seq: u64,
    pub crawl_seq: u64,
    pub counters: Vec<(String, u64)>,
    /// Records written to the repository after the checkpoint. Their pages
    /// are fetched again, so this is the work lost to the crash.
    pub records_after_checkpoint: u64,
}

impl RecoveredState {
    /// Re-expresses the recovered state as a checkpoint, so that
    /// `recover(to_checkpoint(recover(c)))` is a fixed point.
    pub fn to_checkpoint(&self, template: &Checkpoint) -> Checkpoint {
        Checkpoint {
            version: template.version,
            created_at: template.created_at,
            crawl_seq: self.crawl_seq,
            config_digest: template.config_digest,
            next_seq: self.next_seq,
            repo_records: template.repo_records,
            frontier: self.frontier.snapshot(),
            seen: self.seen.listing(),
            hosts: self.ledger.listing(),
            in_flight: self.recrawl.clone(),
            retried: self.retried.iter().cloned().collect(),
            counters: self.counters.clone(),
        }
    }
}

pub fn recover(ckpt: &Checkpoint, repo: &PageRepo, intake_capacity: usize) -> RecoveredState {
    RecoveredState {
        frontier: Frontier::restore(intake_capacity, &ckpt.frontier),
        seen: ckpt.seen.iter().cloned().collect(),
        ledger: HostLedger::restore(&ckpt.hosts),
        recrawl: ckpt.in_flight.clone(),
        retried: ckpt.retried.iter().cloned().collect(),
        next_seq: ckpt.next_seq,
        crawl_seq: ckpt.crawl_seq,
        counters: ckpt.counters.clone(),
        records_after_checkpoint: (repo.len() as u64).saturating_sub(ckpt.repo_records),
    }
}

//! Append-only page repository: `pages.rec` holds checksummed records,
//! `pages.body` holds raw bodies they point into.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use log::warn;

use super::codec::{DecodeError, Decoder, Encoder};
use super::StoreError;
use crate::clock::Seconds;
use crate::parsekit::{fingerprint, Fingerprint};
use crate::urlkit::{parse_url, CanonicalUrl};

pub const RECORD_MAGIC: &[u8; 8] = b"EPOWREC1";
pub const BODY_MAGIC: &[u8; 8] = b"EPOWBDY1";
pub const RECORD_FILE: &str = "pages.rec";
pub const BODY_FILE: &str = "pages.body";

const KIND_PAGE: u8 = 1;

/// Everything about a fetch except where its body lives.
#[derive(Debug, Clone, PartialEq)]
pub struct PageMeta {
    pub url: CanonicalUrl,
    pub fetched_at: Seconds,
    /// HTTP status, or 0 when the fetch produced none.
    pub status: u16,
    pub fingerprint: Fingerprint,
    pub relevance: f64,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRecord {
    pub url: CanonicalUrl,
    pub fetched_at: Seconds,
    pub status: u16,
    pub fingerprint: Fingerprint,
    pub body_offset: u64,
    pub body_length: u64,
    pub relevance: f64,
    pub depth: u32,
}

impl PageRecord {
    fn encode(&self) -> Vec<u8> {
        let mut payload = Encoder::new();
        payload
            .u8(KIND_PAGE)
            .str(&self.url.render())
            .f64(self.fetched_at)
            .u16(self.status)
            .raw(&self.fingerprint.0)
            .u64(self.body_offset)
            .u64(self.body_length)
            .f64(self.relevance)
            .u32(self.depth);
        let payload = payload.finish();
        let mut out = Encoder::new();
        out.bytes(&payload).u32(crc32fast::hash(&payload));
        out.finish()
    }

    fn decode(payload: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(payload);
        if d.u8()? != KIND_PAGE {
            return Err(d.bad("unknown record kind"));
        }
        let url = parse_url(d.str()?).map_err(|e| d.bad(e.to_string()))?;
        let rec = PageRecord {
            url,
            fetched_at: d.f64()?,
            status: d.u16()?,
            fingerprint: Fingerprint(d.fixed()?),
            body_offset: d.u64()?,
            body_length: d.u64()?,
            relevance: d.f64()?,
            depth: d.u32()?,
        };
        if d.remaining() != 0 {
            return Err(d.bad("trailing bytes in record"));
        }
        Ok(rec)
    }
}

/// Result of scanning the record log on open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpenReport {
    pub records: usize,
    /// Bytes cut from the end of `pages.rec` because they did not form a
    /// valid record.
    pub truncated_bytes: u64,
}

#[derive(Debug)]
pub struct PageRepo {
    dir: PathBuf,
    rec: File,
    body: File,
    body_len: u64,
    records: Vec<PageRecord>,
    index: HashMap<String, Vec<usize>>,
    report: OpenReport,
}

fn io(e: std::io::Error) -> StoreError {
    StoreError::from(e)
}

impl PageRepo {
    /// Opens or creates the repository in `dir`, dropping any torn or
    /// corrupt tail of the record log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(io)?;
        let mut body = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(dir.join(BODY_FILE))
            .map_err(io)?;
        let mut body_len = body.metadata().map_err(io)?.len();
        if body_len < BODY_MAGIC.len() as u64 {
            body.set_len(0).map_err(io)?;
            body.write_all(BODY_MAGIC).map_err(io)?;
            body.sync_all().map_err(io)?;
            body_len = BODY_MAGIC.len() as u64;
        } else {
            let mut magic = [0u8; 8];
            body.read_exact_at(&mut magic, 0).map_err(io)?;
            if &magic != BODY_MAGIC {
                return Err(StoreError::CorruptRecord {
                    offset: 0,
                    reason: format!("{BODY_FILE} has a foreign header"),
                });
            }
        }

        let mut rec = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(dir.join(RECORD_FILE))
            .map_err(io)?;
        let mut bytes = Vec::new();
        rec.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() < RECORD_MAGIC.len() {
            rec.set_len(0).map_err(io)?;
            rec.seek(SeekFrom::Start(0)).map_err(io)?;
            rec.write_all(RECORD_MAGIC).map_err(io)?;
            rec.sync_all().map_err(io)?;
            bytes = RECORD_MAGIC.to_vec();
        } else if &bytes[..8] != RECORD_MAGIC {
            return Err(StoreError::CorruptRecord {
                offset: 0,
                reason: format!("{RECORD_FILE} has a foreign header"),
            });
        }

        let mut records = Vec::new();
        let mut pos = RECORD_MAGIC.len();
        while pos < bytes.len() {
            match Self::scan_one(&bytes[pos..], body_len) {
                Ok((record, used)) => {
                    records.push(record);
                    pos += used;
                }
                Err(reason) => {
                    warn!("{RECORD_FILE}: dropping {} bytes at offset {pos}: {reason}", bytes.len() - pos);
                    break;
                }
            }
        }
        let truncated_bytes = (bytes.len() - pos) as u64;
        if truncated_bytes > 0 {
            rec.set_len(pos as u64).map_err(io)?;
            rec.sync_all().map_err(io)?;
        }
        rec.seek(SeekFrom::End(0)).map_err(io)?;
        body.seek(SeekFrom::End(0)).map_err(io)?;

        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(r.url.render()).or_default().push(i);
        }
        let report = OpenReport {
            records: records.len(),
            truncated_bytes,
        };
        Ok(PageRepo {
            dir,
            rec,
            body,
            body_len,
            records,
            index,
            report,
        })
    }

    fn scan_one(bytes: &[u8], body_len: u64) -> Result<(PageRecord, usize), String> {
        let mut d = Decoder::new(bytes);
        let payload = d.bytes().map_err(|e| e.to_string())?;
        let crc = d.u32().map_err(|e| e.to_string())?;
        if crc32fast::hash(payload) != crc {
            return Err("checksum mismatch".into());
        }
        let record = PageRecord::decode(payload).map_err(|e| e.to_string())?;
        if record.body_offset < BODY_MAGIC.len() as u64 || record.body_offset + record.body_length > body_len {
            return Err("body extent outside the body log".into());
        }
        Ok((record, d.position()))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn open_report(&self) -> OpenReport {
        self.report
    }

    /// Appends `body` and a record describing it. The body must hash to
    /// `meta.fingerprint`.
    pub fn put_page(&mut self, meta: PageMeta, body: &[u8]) -> Result<PageRecord, StoreError> {
        if fingerprint(body) != meta.fingerprint {
            return Err(StoreError::FingerprintMismatch(meta.url.render()));
        }
        let record = PageRecord {
            url: meta.url,
            fetched_at: meta.fetched_at,
            status: meta.status,
            fingerprint: meta.fingerprint,
            body_offset: self.body_len,
            body_length: body.len() as u64,
            relevance: meta.relevance,
            depth: meta.depth,
        };
        self.body.write_all(body).map_err(io)?;
        self.body_len += body.len() as u64;
        self.rec.write_all(&record.encode()).map_err(io)?;
        self.index
            .entry(record.url.render())
            .or_default()
            .push(self.records.len());
        self.records.push(record.clone());
        Ok(record)
    }

    /// Forces both logs to stable storage.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.body.sync_data().map_err(io)?;
        self.rec.sync_data().map_err(io)?;
        Ok(())
    }

    /// Latest record for `url` with its body, checked against the stored
    /// fingerprint.
    pub fn get_page(&self, url: &CanonicalUrl) -> Result<(PageRecord, Vec<u8>), StoreError> {
        let record = self.latest(url).ok_or_else(|| StoreError::Missing(url.render()))?;
        let body = self.read_body(record)?;
        Ok((record.clone(), body))
    }

    pub fn read_body(&self, record: &PageRecord) -> Result<Vec<u8>, StoreError> {
        let mut body = vec![0u8; record.body_length as usize];
        self.body.read_exact_at(&mut body, record.body_offset).map_err(io)?;
        if fingerprint(&body) != record.fingerprint {
            return Err(StoreError::CorruptRecord {
                offset: record.body_offset,
                reason: format!("body of {} does not match its fingerprint", record.url),
            });
        }
        Ok(body)
    }

    pub fn latest(&self, url: &CanonicalUrl) -> Option<&PageRecord> {
        self.index
            .get(&url.render())
            .and_then(|ids| ids.last())
            .map(|&i| &self.records[i])
    }

    /// Every stored version of `url`, oldest first.
    pub fn history(&self, url: &CanonicalUrl) -> Vec<PageRecord> {
        self.index
            .get(&url.render())
            .map(|ids| ids.iter().map(|&i| self.records[i].clone()).collect())
            .unwrap_or_default()
    }

    /// All records in append order.
    pub fn records(&self) -> &[PageRecord] {
        &self.records
    }

    /// Latest record per URL, in order of first appearance.
    pub fn live_records(&self) -> Vec<&PageRecord> {
        let mut out: Vec<(usize, &PageRecord)> = self
            .index
            .values()
            .map(|ids| (ids[0], &self.records[*ids.last().unwrap()]))
            .collect();
        out.sort_by_key(|(first, _)| *first);
        out.into_iter().map(|(_, r)| r).collect()
    }

    pub fn url_count(&self) -> usize {
        self.index.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(url: &str, body: &[u8], t: f64) -> PageMeta {
        PageMeta {
            url: parse_url(url).unwrap(),
            fetched_at: t,
            status: 200,
            fingerprint: fingerprint(body),
            relevance: 0.25,
            depth: 3,
        }
    }

    #[test]
    fn empty_repo_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let repo = PageRepo::open(dir.path()).unwrap();
        let url = parse_url("http://a.sim/").unwrap();
        assert!(matches!(repo.get_page(&url), Err(StoreError::Missing(_))));
    }

    #[test]
    fn put_get_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = PageRepo::open(dir.path()).unwrap();
        let url = parse_url("http://a.sim/x").unwrap();
        let first = repo.put_page(meta("http://a.sim/x", b"one", 1.0), b"one").unwrap();
        let (r, b) = repo.get_page(&url).unwrap();
        assert_eq!((r, b.as_slice()), (first.clone(), &b"one"[..]));
        let second = repo.put_page(meta("http://a.sim/x", b"two!", 2.0), b"two!").unwrap();
        assert_eq!(repo.get_page(&url).unwrap(), (second.clone(), b"two!".to_vec()));
        assert_eq!(repo.history(&url), vec![first, second]);
        assert_eq!(repo.url_count(), 1);
    }

    #[test]
    fn fingerprint_must_match_body() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = PageRepo::open(dir.path()).unwrap();
        let err = repo.put_page(meta("http://a.sim/", b"x", 0.0), b"y").unwrap_err();
        assert!(matches!(err, StoreError::FingerprintMismatch(_)));
        assert!(repo.is_empty());
    }

    #[test]
    fn reopen_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut repo = PageRepo::open(dir.path()).unwrap();
            repo.put_page(meta("http://a.sim/1", b"a", 0.0), b"a").unwrap();
            repo.put_page(meta("http://a.sim/2", b"bb", 0.0), b"bb").unwrap();
            repo.flush().unwrap();
        }
        let repo = PageRepo::open(dir.path()).unwrap();
        assert_eq!(repo.open_report(), OpenReport { records: 2, truncated_bytes: 0 });
        let (_, body) = repo.get_page(&parse_url("http://a.sim/2").unwrap()).unwrap();
        assert_eq!(body, b"bb");
    }

    #[test]
    fn torn_tail_is_truncated_at_every_cut() {
        let dir = tempfile::tempdir().unwrap();
        let (full, one_record_len) = {
            let mut repo = PageRepo::open(dir.path()).unwrap();
            repo.put_page(meta("http://a.sim/1", b"a", 0.0), b"a").unwrap();
            let one = std::fs::metadata(dir.path().join(RECORD_FILE)).unwrap().len();
            repo.put_page(meta("http://a.sim/2", b"bb", 0.0), b"bb").unwrap();
            (std::fs::read(dir.path().join(RECORD_FILE)).unwrap(), one)
        };
        for cut in one_record_len as usize..full.len() {
            std::fs::write(dir.path().join(RECORD_FILE), &full[..cut]).unwrap();
            let repo = PageRepo::open(dir.path()).unwrap();
            assert_eq!(repo.len(), 1, "cut {cut}");
            assert_eq!(repo.open_report().truncated_bytes, (cut as u64) - one_record_len);
            assert_eq!(std::fs::metadata(dir.path().join(RECORD_FILE)).unwrap().len(), one_record_len);
        }
    }

    #[test]
    fn flipped_byte_is_caught_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut repo = PageRepo::open(dir.path()).unwrap();
            repo.put_page(meta("http://a.sim/1", b"a", 0.0), b"a").unwrap();
        }
        let path = dir.path().join(RECORD_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(PageRepo::open(dir.path()).unwrap().len(), 0);
    }

    #[test]
    fn ten_thousand_random_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut expected = Vec::new();
        {
            let mut repo = PageRepo::open(dir.path()).unwrap();
            for i in 0..10_000u32 {
                let len = rng.gen_range(0..200);
                let body: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let url = format!("http://h{}.sim/p/{}", i % 37, rng.gen::<u32>() % 3000);
                let mut m = meta(&url, &body, rng.gen_range(0.0..1e9));
                m.status = rng.gen_range(0..600);
                m.relevance = rng.gen();
                m.depth = rng.gen_range(0..50);
                let rec = repo.put_page(m, &body).unwrap();
                expected.push((rec, body));
            }
            repo.flush().unwrap();
        }
        let repo = PageRepo::open(dir.path()).unwrap();
        assert_eq!(repo.records().len(), expected.len());
        for (got, (rec, body)) in repo.records().iter().zip(&expected) {
            assert_eq!(got, rec);
            assert_eq!(&repo.read_body(got).unwrap(), body);
        }
        for (rec, _) in &expected {
            let latest = expected.iter().rev().find(|(r, _)| r.url == rec.url).unwrap();
            assert_eq!(repo.latest(&rec.url).unwrap(), &latest.0);
        }
    }

    #[test]
    fn published_bytes_never_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = PageRepo::open(dir.path()).unwrap();
        let mut before_rec = Vec::new();
        let mut before_body = Vec::new();
        for i in 0..50 {
            let body = format!("body {i}").into_bytes();
            repo.put_page(meta(&format!("http://a.sim/{}", i % 7), &body, i as f64), &body).unwrap();
            let rec = std::fs::read(dir.path().join(RECORD_FILE)).unwrap();
            let bod = std::fs::read(dir.path().join(BODY_FILE)).unwrap();
            assert!(rec.starts_with(&before_rec));
            assert!(bod.starts_with(&before_body));
            before_rec = rec;
            before_body = bod;
        }
    }
}

//! The two-queue crawl frontier.
//!
//! Downloaders deposit newly discovered requests into a bounded
//! [`CircularQueue`]; the master drains it into the [`PriorityQueue`], which the
//! dispatcher pops in (priority desc, seq asc) order. A full circular queue
//! rejects instead of overwriting, which is how backpressure reaches the
//! downloaders.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::urlkit::{parse_url, CanonicalUrl};

#[derive(Debug, Clone, PartialEq)]
pub struct CrawlRequest {
    pub url: CanonicalUrl,
    /// In `[0, 1]`.
    pub priority: f64,
    /// Hops from a seed.
    pub depth: u32,
    /// Global discovery sequence number.
    pub seq: u64,
}

impl CrawlRequest {
    pub fn new(url: CanonicalUrl, priority: f64, depth: u32, seq: u64) -> Self {
        let priority = if priority.is_nan() {
            0.0
        } else {
            priority.clamp(0.0, 1.0)
        };
        CrawlRequest {
            url,
            priority,
            depth,
            seq,
        }
    }
}

/// Hands out discovery sequence numbers, strictly increasing.
#[derive(Debug, Default)]
pub struct SeqCounter(AtomicU64);

impl SeqCounter {
    pub fn starting_at(next: u64) -> Self {
        SeqCounter(AtomicU64::new(next))
    }

    pub fn next(&self) -> u64 {
        self.0.fetch_add(1, AtomicOrdering::SeqCst)
    }

    /// The value the next call to [`SeqCounter::next`] will return.
    pub fn peek(&self) -> u64 {
        self.0.load(AtomicOrdering::SeqCst)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrontierError {
    #[error("circular queue is full")]
    FrontierFull,
    #[error("bad snapshot line {0:?}")]
    BadSnapshotLine(String),
}

struct Ring<T> {
    slots: Vec<Option<T>>,
    head: usize,
    len: usize,
}

impl<T> Ring<T> {
    fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn push(&mut self, item: T) {
        let tail = (self.head + self.len) % self.capacity();
        debug_assert!(self.slots[tail].is_none());
        self.slots[tail] = Some(item);
        self.len += 1;
    }

    fn pop(&mut self) -> Option<T> {
        if self.len == 0 {
            return None;
        }
        let item = self.slots[self.head].take();
        self.head = (self.head + 1) % self.capacity();
        self.len -= 1;
        item
    }

    fn iter(&self) -> impl Iterator<Item = &T> {
        (0..self.len).filter_map(move |i| self.slots[(self.head + i) % self.capacity()].as_ref())
    }
}

/// Fixed-capacity FIFO ring buffer, safe for many producers and consumers.
pub struct CircularQueue<T> {
    ring: Mutex<Ring<T>>,
}

impl<T> fmt::Debug for CircularQueue<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CircularQueue")
            .field("capacity", &self.capacity())
            .field("len", &self.len())
            .finish()
    }
}

impl<T> CircularQueue<T> {
    /// # Panics
    /// If `capacity` is zero.
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "circular queue capacity must be positive");
        CircularQueue {
            ring: Mutex::new(Ring {
                slots: (0..capacity).map(|_| None).collect(),
                head: 0,
                len: 0,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Ring<T>> {
        self.ring.lock().expect("circular queue poisoned")
    }

    pub fn capacity(&self) -> usize {
        self.lock().capacity()
    }

    pub fn len(&self) -> usize {
        self.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends at the tail. On a full queue the item is handed back untouched.
    pub fn enqueue(&self, item: T) -> Result<(), (FrontierError, T)> {
        let mut ring = self.lock();
        if ring.len == ring.capacity() {
            return Err((FrontierError::FrontierFull, item));
        }
        ring.push(item);
        Ok(())
    }

    /// All-or-nothing append of a batch. A batch larger than the capacity can
    /// never be accepted; callers split it first.
    pub fn enqueue_batch(&self, items: Vec<T>) -> Result<(), (FrontierError, Vec<T>)> {
        let mut ring = self.lock();
        if ring.len + items.len() > ring.capacity() {
            return Err((FrontierError::FrontierFull, items));
        }
        for item in items {
            ring.push(item);
        }
        Ok(())
    }

    pub fn dequeue(&self) -> Option<T> {
        self.lock().pop()
    }

    /// Smallest key over the queued items, without copying them.
    pub fn min_of<K: Ord>(&self, key: impl Fn(&T) -> K) -> Option<K> {
        self.lock().iter().map(key).min()
    }

    pub fn drain(&self) -> Vec<T> {
        let mut ring = self.lock();
        let mut out = Vec::with_capacity(ring.len);
        while let Some(item) = ring.pop() {
            out.push(item);
        }
        out
    }
}

impl<T: Clone> CircularQueue<T> {
    /// Head-to-tail copy of the contents.
    pub fn to_vec(&self) -> Vec<T> {
        self.lock().iter().cloned().collect()
    }
}

/// Heap entry ordered so that `BinaryHeap::pop` yields the highest priority,
/// and among equal priorities the smallest seq.
#[derive(Debug, Clone)]
struct Ranked(CrawlRequest);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .priority
            .total_cmp(&other.0.priority)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Unbounded max-priority queue with FIFO tie-breaking.
#[derive(Debug, Default)]
pub struct PriorityQueue {
    heap: Mutex<BinaryHeap<Ranked>>,
}

impl PriorityQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BinaryHeap<Ranked>> {
        self.heap.lock().expect("priority queue poisoned")
    }

    pub fn push(&self, request: CrawlRequest) {
        self.lock().push(Ranked(request));
    }

    pub fn push_all(&self, requests: impl IntoIterator<Item = CrawlRequest>) {
        let mut heap = self.lock();
        heap.extend(requests.into_iter().map(Ranked));
    }

    pub fn pop(&self) -> Option<CrawlRequest> {
        self.lock().pop().map(|r| r.0)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contents in dispatch order.
    pub fn to_sorted_vec(&self) -> Vec<CrawlRequest> {
        let heap = self.lock();
        let mut all: Vec<Ranked> = heap.iter().cloned().collect();
        all.sort_by(|a, b| b.cmp(a));
        all.into_iter().map(|r| r.0).collect()
    }

    pub fn min_depth(&self) -> Option<u32> {
        self.lock().iter().map(|r| r.0.depth).min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueTag {
    Cq,
    Pq,
}

impl fmt::Display for QueueTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueTag::Cq => "CQ",
            QueueTag::Pq => "PQ",
        })
    }
}

/// One pending request in a frontier snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub request: CrawlRequest,
    pub tag: QueueTag,
}

impl SnapshotEntry {
    /// `url,priority,depth,seq,tag` with the priority at six decimal places.
    /// The URL may itself contain commas, so parsing splits from the right.
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.6},{},{},{}",
            self.request.url, self.request.priority, self.request.depth, self.request.seq, self.tag
        )
    }
}

impl FromStr for SnapshotEntry {
    type Err = FrontierError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || FrontierError::BadSnapshotLine(line.to_string());
        let mut parts = line.rsplitn(5, ',');
        let tag = match parts.next().ok_or_else(bad)? {
            "CQ" => QueueTag::Cq,
            "PQ" => QueueTag::Pq,
            _ => return Err(bad()),
        };
        let seq: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let depth: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let priority: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let url = parse_url(parts.next().ok_or_else(bad)?).map_err(|_| bad())?;
        Ok(SnapshotEntry {
            request: CrawlRequest::new(url, priority, depth, seq),
            tag,
        })
    }
}

/// Both queues, plus the consistent snapshot over them.
#[derive(Debug)]
pub struct Frontier {
    pub intake: CircularQueue<CrawlRequest>,
    pub dispatch: PriorityQueue,
}

impl Frontier {
    pub fn new(intake_capacity: usize) -> Self {
        Frontier {
            intake: CircularQueue::with_capacity(intake_capacity),
            dispatch: PriorityQueue::new(),
        }
    }

    /// Moves everything waiting in the circular queue into the priority
    /// queue. Returns how many were moved.
    pub fn promote(&self) -> usize {
        let moved = self.intake.drain();
        let n = moved.len();
        self.dispatch.push_all(moved);
        n
    }

    pub fn len(&self) -> usize {
        self.intake.len() + self.dispatch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point-in-time listing of every pending request: intake in FIFO order
    /// followed by dispatch in pop order. Both queues are locked for the
    /// duration, so no request can move between them mid-listing.
    pub fn snapshot(&self) -> Vec<SnapshotEntry> {
        let ring = self.intake.lock();
        let heap = self.dispatch.lock();
        let mut out: Vec<SnapshotEntry> = ring
            .iter()
            .cloned()
            .map(|request| SnapshotEntry {
                request,
                tag: QueueTag::Cq,
            })
            .collect();
        let mut ranked: Vec<Ranked> = heap.iter().cloned().collect();
        ranked.sort_by(|a, b| b.cmp(a));
        out.extend(ranked.into_iter().map(|r| SnapshotEntry {
            request: r.0,
            tag: QueueTag::Pq,
        }));
        out
    }

    /// Rebuilds a frontier from a snapshot. Intake entries beyond the
    /// capacity spill into the dispatch queue rather than being dropped.
    pub fn restore(intake_capacity: usize, entries: &[SnapshotEntry]) -> Self {
        let frontier = Frontier::new(intake_capacity);
        for e in entries {
            match e.tag {
                QueueTag::Cq => {
                    if let Err((_, r)) = frontier.intake.enqueue(e.request.clone()) {
                        frontier.dispatch.push(r);
                    }
                }
                QueueTag::Pq => frontier.dispatch.push(e.request.clone()),
            }
        }
        frontier
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;
    use std::sync::Arc;

    fn req(name: &str, priority: f64, seq: u64) -> CrawlRequest {
        CrawlRequest::new(
            parse_url(&format!("http://h/{name}")).unwrap(),
            priority,
            0,
            seq,
        )
    }

    fn names(v: &[CrawlRequest]) -> Vec<String> {
        v.iter().map(|r| r.url.path()[1..].to_string()).collect()
    }

    #[test]
    fn full_queue_rejects_and_is_unchanged() {
        let q = CircularQueue::with_capacity(4);
        for (i, n) in ["a", "b", "c", "d"].iter().enumerate() {
            q.enqueue(req(n, 0.5, i as u64)).unwrap();
        }
        let (err, back) = q.enqueue(req("e", 0.5, 9)).unwrap_err();
        assert_eq!(err, FrontierError::FrontierFull);
        assert_eq!(back.seq, 9);
        assert_eq!(names(&q.to_vec()), ["a", "b", "c", "d"]);
    }

    #[test]
    fn fifo_order() {
        let q = CircularQueue::with_capacity(4);
        assert!(q.dequeue().is_none());
        q.enqueue(req("a", 0.1, 0)).unwrap();
        q.enqueue(req("b", 0.9, 1)).unwrap();
        assert_eq!(names(&[q.dequeue().unwrap()]), ["a"]);
    }

    #[test]
    fn wraparound_keeps_order() {
        let q = CircularQueue::with_capacity(4);
        for (i, n) in ["a", "b", "c"].iter().enumerate() {
            q.enqueue(req(n, 0.5, i as u64)).unwrap();
        }
        q.dequeue().unwrap();
        q.dequeue().unwrap();
        for (i, n) in ["d", "e", "f"].iter().enumerate() {
            q.enqueue(req(n, 0.5, 10 + i as u64)).unwrap();
        }
        assert_eq!(names(&q.drain()), ["c", "d", "e", "f"]);
    }

    #[test]
    fn batch_enqueue_is_all_or_nothing() {
        let q = CircularQueue::with_capacity(3);
        q.enqueue(1).unwrap();
        let (_, back) = q.enqueue_batch(vec![2, 3, 4]).unwrap_err();
        assert_eq!(back, vec![2, 3, 4]);
        assert_eq!(q.to_vec(), vec![1]);
        q.enqueue_batch(vec![2, 3]).unwrap();
        assert_eq!(q.drain(), vec![1, 2, 3]);
    }

    #[test]
    fn priority_max_first_then_fifo() {
        let pq = PriorityQueue::new();
        assert!(pq.pop().is_none());
        pq.push(req("low", 0.2, 1));
        pq.push(req("high", 0.9, 2));
        assert_eq!(pq.pop().unwrap().priority, 0.9);

        let pq = PriorityQueue::new();
        pq.push(req("x", 0.5, 3));
        pq.push(req("y", 0.5, 1));
        assert_eq!(pq.pop().unwrap().seq, 1);

        let pq = PriorityQueue::new();
        pq.push(req("only", 0.3, 7));
        assert_eq!(pq.pop().unwrap().seq, 7);
        assert!(pq.pop().is_none());
    }

    #[test]
    fn random_pushes_drain_in_sorted_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pq = PriorityQueue::new();
        let mut oracle = Vec::new();
        for seq in 0..1000u64 {
            // Coarse priorities so ties are frequent.
            let p = rng.gen_range(0..10) as f64 / 10.0;
            let r = req(&format!("p{seq}"), p, seq);
            oracle.push((p, seq));
            pq.push(r);
        }
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let drained: Vec<(f64, u64)> =
            std::iter::from_fn(|| pq.pop()).map(|r| (r.priority, r.seq)).collect();
        assert_eq!(drained, oracle);
    }

    #[test]
    fn snapshot_lines_round_trip() {
        let e = SnapshotEntry {
            request: CrawlRequest::new(parse_url("http://h/a,b?x=1,2").unwrap(), 0.8, 3, 42),
            tag: QueueTag::Pq,
        };
        let line = e.to_line();
        assert_eq!(line, "http://h/a,b?x=1,2,0.800000,3,42,PQ");
        assert_eq!(line.parse::<SnapshotEntry>().unwrap(), e);
        assert!("http://h/,x,1,2,ZZ".parse::<SnapshotEntry>().is_err());
    }

    #[test]
    fn snapshot_lists_both_queues() {
        let f = Frontier::new(4);
        assert!(f.snapshot().is_empty());
        f.intake.enqueue(req("a", 0.5, 0)).unwrap();
        f.dispatch.push(req("b", 0.5, 1));
        let snap = f.snapshot();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[0].tag, QueueTag::Cq);
        assert_eq!(snap[0].request.url.path(), "/a");
        assert_eq!(snap[1].tag, QueueTag::Pq);
        assert_eq!(snap[1].request.url.path(), "/b");
    }

    #[test]
    fn concurrent_conservation_and_snapshot_restore() {
        let f = Arc::new(Frontier::new(64));
        let producers: Vec<_> = (0..4)
            .map(|t| {
                let f = Arc::clone(&f);
                std::thread::spawn(move || {
                    let mut accepted = Vec::new();
                    for i in 0..2000u64 {
                        let seq = t * 10_000 + i;
                        let mut r = req(&format!("t{t}/{i}"), (i % 5) as f64 / 4.0, seq);
                        loop {
                            match f.intake.enqueue(r) {
                                Ok(()) => break,
                                Err((_, back)) => {
                                    r = back;
                                    std::thread::yield_now();
                                }
                            }
                        }
                        accepted.push(seq);
                    }
                    accepted
                })
            })
            .collect();
        let consumer = {
            let f = Arc::clone(&f);
            std::thread::spawn(move || {
                let mut got = Vec::new();
                let mut snapshot = None;
                while got.len() < 8000 {
                    f.promote();
                    if let Some(r) = f.dispatch.pop() {
                        got.push(r.seq);
                    }
                    if got.len() == 3000 && snapshot.is_none() {
                        snapshot = Some(f.snapshot());
                    }
                }
                (got, snapshot.unwrap())
            })
        };
        let mut accepted: Vec<u64> = producers.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let (mut got, snap) = consumer.join().unwrap();
        f.promote();
        got.extend(std::iter::from_fn(|| f.dispatch.pop()).map(|r| r.seq));
        accepted.sort_unstable();
        got.sort_unstable();
        assert_eq!(accepted, got);

        let restored = Frontier::restore(64, &snap);
        let mut expected: Vec<u64> = snap.iter().map(|e| e.request.seq).collect();
        restored.promote();
        let mut drained: Vec<u64> =
            std::iter::from_fn(|| restored.dispatch.pop()).map(|r| r.seq).collect();
        expected.sort_unstable();
        drained.sort_unstable();
        assert_eq!(expected, drained);
    }

    proptest! {
        #[test]
        fn circular_queue_matches_vecdeque(ops in prop::collection::vec(any::<Option<u8>>(), 0..400), cap in 1usize..9) {
            let q = CircularQueue::with_capacity(cap);
            let mut oracle = VecDeque::new();
            for op in ops {
                match op {
                    Some(v) => {
                        let res = q.enqueue(v);
                        if oracle.len() < cap {
                            prop_assert!(res.is_ok());
                            oracle.push_back(v);
                        } else {
                            prop_assert!(res.is_err());
                        }
                    }
                    None => prop_assert_eq!(q.dequeue(), oracle.pop_front()),
                }
                prop_assert!(q.len() <= cap);
            }
            prop_assert_eq!(q.to_vec(), oracle.into_iter().collect::<Vec<_>>());
        }
    }
}

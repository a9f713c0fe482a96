//! In-process simulated cluster: `n` lock-step worker contexts joined by
//! reliable FIFO channels, with the collectives the trainer needs.
//!
//! Every collective stamps its messages with the caller's epoch (a per-worker
//! count of collective calls) and primitive kind. A receiver that sees a
//! different epoch or kind reports a fault with both epoch numbers instead
//! of silently mixing payloads from two different calls.
//!
//! Traffic is counted in payload elements, never headers:
//! * ring all-reduce: elements each worker sends (`2K(n-1)/n` when `n | K`)
//! * gather: elements the root receives (`K(n-1)`)
//! * all-to-all: elements in buckets addressed to other workers; the bucket
//!   a worker addresses to itself is delivered locally and not counted.

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    AllToAll,
    AllReduce,
    Gather,
    Broadcast,
    Barrier,
    /// Small metric reductions (loss averages, stop votes).
    Control,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::AllToAll => "all_to_all",
            Primitive::AllReduce => "ring_all_reduce",
            Primitive::Gather => "gather",
            Primitive::Broadcast => "broadcast",
            Primitive::Barrier => "barrier",
            Primitive::Control => "control",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("{kind}: expected {expected} buckets, got {got}")]
    BucketCount {
        kind: Primitive,
        expected: usize,
        got: usize,
    },
    #[error("{kind}: worker {me} expected epoch {expected} ({expected_kind}) but worker {peer} sent epoch {got} ({got_kind})")]
    EpochMismatch {
        kind: Primitive,
        me: usize,
        peer: usize,
        expected: u64,
        expected_kind: Primitive,
        got: u64,
        got_kind: Primitive,
    },
    #[error("{kind}: worker {me} has length {mine}, worker {peer} has length {theirs}")]
    LengthMismatch {
        kind: Primitive,
        me: usize,
        peer: usize,
        mine: usize,
        theirs: usize,
    },
    #[error("{kind}: root {root} out of range for {n} workers")]
    BadRoot {
        kind: Primitive,
        root: usize,
        n: usize,
    },
    #[error("{kind}: worker {me} timed out at epoch {epoch} waiting for worker {peer}")]
    Timeout {
        kind: Primitive,
        me: usize,
        peer: usize,
        epoch: u64,
    },
    #[error("{kind}: worker {peer} left the group (worker {me}, epoch {epoch})")]
    PeerGone {
        kind: Primitive,
        me: usize,
        peer: usize,
        epoch: u64,
    },
    #[error("{kind}: payload type mismatch from worker {peer}")]
    PayloadType { kind: Primitive, peer: usize },
}

/// Element count of a value sent through a collective.
pub trait Payload: Send + 'static {
    fn elements(&self) -> usize {
        1
    }
}

impl Payload for f64 {}
impl Payload for u64 {}
impl Payload for u32 {}

impl Payload for Vec<f64> {
    fn elements(&self) -> usize {
        self.len()
    }
}

impl Payload for (u64, Vec<f64>) {
    fn elements(&self) -> usize {
        1 + self.1.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub calls: u64,
    pub elements_sent: u64,
    pub elements_received: u64,
}

/// Counters of one worker, per primitive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerStats {
    by_kind: BTreeMap<Primitive, Counters>,
}

impl WorkerStats {
    pub fn get(&self, kind: Primitive) -> Counters {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    fn entry(&mut self, kind: Primitive) -> &mut Counters {
        self.by_kind.entry(kind).or_default()
    }

    /// `self - earlier`, per primitive.
    pub fn since(&self, earlier: &WorkerStats) -> WorkerStats {
        let mut out = WorkerStats::default();
        for (&k, c) in &self.by_kind {
            let e = earlier.get(k);
            out.by_kind.insert(
                k,
                Counters {
                    calls: c.calls - e.calls,
                    elements_sent: c.elements_sent - e.elements_sent,
                    elements_received: c.elements_received - e.elements_received,
                },
            );
        }
        out
    }
}

/// Exact traffic ledger of a whole group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    pub workers: Vec<WorkerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveReport {
    pub calls: u64,
    pub elements_sent: u64,
    pub elements_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub per_worker_sent: Vec<u64>,
    pub per_worker_received: Vec<u64>,
}

impl CommStats {
    pub fn worker(&self, i: usize) -> WorkerStats {
        self.workers.get(i).cloned().unwrap_or_default()
    }

    pub fn kinds(&self) -> Vec<Primitive> {
        let mut kinds: Vec<Primitive> = self
            .workers
            .iter()
            .flat_map(|w| w.by_kind.keys().copied())
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Calls are per collective invocation (every worker enters each call).
    pub fn summary(&self, kind: Primitive) -> PrimitiveReport {
        let per: Vec<Counters> = self.workers.iter().map(|w| w.get(kind)).collect();
        let sent: u64 = per.iter().map(|c| c.elements_sent).sum();
        let received: u64 = per.iter().map(|c| c.elements_received).sum();
        PrimitiveReport {
            calls: per.iter().map(|c| c.calls).max().unwrap_or(0),
            elements_sent: sent,
            elements_received: received,
            bytes_sent: sent * 8,
            bytes_received: received * 8,
            per_worker_sent: per.iter().map(|c| c.elements_sent).collect(),
            per_worker_received: per.iter().map(|c| c.elements_received).collect(),
        }
    }

    /// JSON report: primitive name -> totals and per-worker counts.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for k in self.kinds() {
            map.insert(
                k.name().to_string(),
                serde_json::to_value(self.summary(k)).expect("report serializes"),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn merge(&mut self, other: &CommStats) {
        if self.workers.len() < other.workers.len() {
            self.workers
                .resize(other.workers.len(), WorkerStats::default());
        }
        for (mine, theirs) in self.workers.iter_mut().zip(&other.workers) {
            for (&k, c) in &theirs.by_kind {
                let e = mine.entry(k);
                e.calls += c.calls;
                e.elements_sent += c.elements_sent;
                e.elements_received += c.elements_received;
            }
        }
    }
}

struct Envelope {
    epoch: u64,
    kind: Primitive,
    /// Buffer length for collectives that require equal lengths.
    len: usize,
    body: Box<dyn Any + Send>,
}

/// One worker's endpoint into the group.
pub struct Communicator {
    me: usize,
    n: usize,
    epoch: u64,
    timeout: Duration,
    to: Vec<Sender<Envelope>>,
    from: Vec<Receiver<Envelope>>,
    stats: WorkerStats,
}

impl fmt::Debug for Communicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("me", &self.me)
            .field("n", &self.n)
            .field("epoch", &self.epoch)
            .finish()
    }
}

/// Factory and runner for `n` communicators.
pub struct WorkerGroup;

impl WorkerGroup {
    /// Fully connected endpoints; `comms[i].rank() == i`.
    pub fn connect(n: usize) -> Vec<Communicator> {
        Self::with_timeout(n, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(n: usize, timeout: Duration) -> Vec<Communicator> {
        assert!(n >= 1, "a group needs at least one worker");
        // channel (from i, to j)
        let mut senders: Vec<Vec<Option<Sender<Envelope>>>> = (0..n).map(|_| Vec::new()).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Envelope>>>> =
            (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
        for (i, row) in senders.iter_mut().enumerate() {
            for inbox in receivers.iter_mut() {
                let (tx, rx) = channel();
                row.push(Some(tx));
                inbox[i] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(me, (to, from))| Communicator {
                me,
                n,
                epoch: 0,
                timeout,
                to: to.into_iter().map(Option::unwrap).collect(),
                from: from.into_iter().map(Option::unwrap).collect(),
                stats: WorkerStats::default(),
            })
            .collect()
    }

    /// Runs `f` on `n` threads, one per worker, and returns results in
    /// worker order together with the merged traffic ledger.
    pub fn run<R, F>(n: usize, f: F) -> (Vec<R>, CommStats)
    where
        R: Send,
        F: Fn(&mut Communicator) -> R + Sync,
    {
        let comms = Self::connect(n);
        Self::run_with(comms, f)
    }

    pub fn run_with<R, F>(comms: Vec<Communicator>, f: F) -> (Vec<R>, CommStats)
    where
        R: Send,
        F: Fn(&mut Communicator) -> R + Sync,
    {
        let f = &f;
        let outputs: Vec<(R, WorkerStats)> = thread::scope(|s| {
            let handles: Vec<_> = comms
                .into_iter()
                .map(|mut comm| {
                    thread::Builder::new()
                        .name(format!("worker-{}", comm.me))
                        .spawn_scoped(s, move || {
                            let r = f(&mut comm);
                            (r, comm.stats.clone())
                        })
                        .expect("spawn worker thread")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        });
        let mut results = Vec::with_capacity(outputs.len());
        let mut stats = CommStats::default();
        for (r, w) in outputs {
            results.push(r);
            stats.workers.push(w);
        }
        (results, stats)
    }
}

impl Communicator {
    pub fn rank(&self) -> usize {
        self.me
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }

    fn send<T: Send + 'static>(&self, kind: Primitive, to: usize, len: usize, body: T) {
        let env = Envelope {
            epoch: self.epoch,
            kind,
            len,
            body: Box::new(body),
        };
        // A dropped receiver means the peer is gone; its absence surfaces on
        // the next receive in the group.
        let _ = self.to[to].send(env);
    }

    fn recv<T: 'static>(
        &self,
        kind: Primitive,
        from: usize,
        len: Option<usize>,
    ) -> Result<T, CollectiveError> {
        let env = self.from[from]
            .recv_timeout(self.timeout)
            .map_err(|e| match e {
                RecvTimeoutError::Timeout => CollectiveError::Timeout {
                    kind,
                    me: self.me,
                    peer: from,
                    epoch: self.epoch,
                },
                RecvTimeoutError::Disconnected => CollectiveError::PeerGone {
                    kind,
                    me: self.me,
                    peer: from,
                    epoch: self.epoch,
                },
            })?;
        if env.epoch != self.epoch || env.kind != kind {
            return Err(CollectiveError::EpochMismatch {
                kind,
                me: self.me,
                peer: from,
                expected: self.epoch,
                expected_kind: kind,
                got: env.epoch,
                got_kind: env.kind,
            });
        }
        if let Some(mine) = len {
            if env.len != mine {
                return Err(CollectiveError::LengthMismatch {
                    kind,
                    me: self.me,
                    peer: from,
                    mine,
                    theirs: env.len,
                });
            }
        }
        env.body
            .downcast::<T>()
            .map(|b| *b)
            .map_err(|_| CollectiveError::PayloadType { kind, peer: from })
    }

    fn finish(&mut self, kind: Primitive, sent: usize, received: usize) {
        let c = self.stats.entry(kind);
        c.calls += 1;
        c.elements_sent += sent as u64;
        c.elements_received += received as u64;
        self.epoch += 1;
    }

    /// `buckets[j]` goes to worker `j`; returns `received[j]`, the bucket
    /// worker `j` addressed to this worker.
    pub fn all_to_all<T: Payload>(
        &mut self,
        buckets: Vec<Vec<T>>,
    ) -> Result<Vec<Vec<T>>, CollectiveError> {
        let kind = Primitive::AllToAll;
        if buckets.len() != self.n {
            return Err(CollectiveError::BucketCount {
                kind,
                expected: self.n,
                got: buckets.len(),
            });
        }
        let mut own = None;
        let mut sent = 0;
        for (j, bucket) in buckets.into_iter().enumerate() {
            if j == self.me {
                own = Some(bucket);
            } else {
                sent += bucket.iter().map(Payload::elements).sum::<usize>();
                self.send(kind, j, 0, bucket);
            }
        }
        let mut received = Vec::with_capacity(self.n);
        let mut got = 0;
        for j in 0..self.n {
            if j == self.me {
                received.push(own.take().unwrap_or_default());
            } else {
                let bucket: Vec<T> = self.recv(kind, j, None)?;
                got += bucket.iter().map(Payload::elements).sum::<usize>();
                received.push(bucket);
            }
        }
        self.finish(kind, sent, got);
        Ok(received)
    }

    /// Chunk `c` of a length-`k` buffer split over `n` ring positions; the
    /// last non-empty chunk is the short one when `n` does not divide `k`.
    fn chunk(k: usize, n: usize, c: usize) -> std::ops::Range<usize> {
        let size = k.div_ceil(n);
        let start = (c * size).min(k);
        let end = ((c + 1) * size).min(k);
        start..end
    }

    /// Element-wise sum over all workers by reduce-scatter then all-gather
    /// around the ring `0 -> 1 -> ... -> n-1 -> 0`. The addition order is
    /// fixed by chunk index and ring position, and each reduced chunk is
    /// computed once and copied, so every worker ends with identical bits.
    pub fn ring_all_reduce(&mut self, mut buf: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        let kind = Primitive::AllReduce;
        let (n, me, k) = (self.n, self.me, buf.len());
        if n == 1 {
            self.finish(kind, 0, 0);
            return Ok(buf);
        }
        let right = (me + 1) % n;
        let left = (me + n - 1) % n;
        let mut sent = 0;
        let mut got = 0;

        for step in 0..n - 1 {
            let send_c = (me + n - step) % n;
            let recv_c = (me + 2 * n - step - 1) % n;
            let out = buf[Self::chunk(k, n, send_c)].to_vec();
            sent += out.len();
            self.send(kind, right, k, out);
            let incoming: Vec<f64> = self.recv(kind, left, Some(k))?;
            got += incoming.len();
            for (dst, v) in buf[Self::chunk(k, n, recv_c)].iter_mut().zip(&incoming) {
                *dst += v;
            }
        }
        for step in 0..n - 1 {
            let send_c = (me + 1 + n - step) % n;
            let recv_c = (me + n - step) % n;
            let out = buf[Self::chunk(k, n, send_c)].to_vec();
            sent += out.len();
            self.send(kind, right, k, out);
            let incoming: Vec<f64> = self.recv(kind, left, Some(k))?;
            got += incoming.len();
            buf[Self::chunk(k, n, recv_c)].copy_from_slice(&incoming);
        }
        self.finish(kind, sent, got);
        Ok(buf)
    }

    /// Central-node pattern: the root receives every buffer, in worker order.
    pub fn gather(
        &mut self,
        root: usize,
        buf: Vec<f64>,
    ) -> Result<Option<Vec<Vec<f64>>>, CollectiveError> {
        let kind = Primitive::Gather;
        if root >= self.n {
            return Err(CollectiveError::BadRoot {
                kind,
                root,
                n: self.n,
            });
        }
        let k = buf.len();
        if self.me != root {
            self.send(kind, root, k, buf);
            self.finish(kind, k, 0);
            return Ok(None);
        }
        let mut own = Some(buf);
        let mut all = Vec::with_capacity(self.n);
        let mut got = 0;
        for j in 0..self.n {
            if j == root {
                all.push(own.take().unwrap_or_default());
            } else {
                let b: Vec<f64> = self.recv(kind, j, Some(k))?;
                got += b.len();
                all.push(b);
            }
        }
        self.finish(kind, 0, got);
        Ok(Some(all))
    }

    /// Delivers the root's buffer to everyone; other workers' `buf` is ignored.
    pub fn broadcast(&mut self, root: usize, buf: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        let kind = Primitive::Broadcast;
        if root >= self.n {
            return Err(CollectiveError::BadRoot {
                kind,
                root,
                n: self.n,
            });
        }
        if self.me == root {
            let mut sent = 0;
            for j in (0..self.n).filter(|&j| j != root) {
                sent += buf.len();
                self.send(kind, j, 0, buf.clone());
            }
            self.finish(kind, sent, 0);
            Ok(buf)
        } else {
            let b: Vec<f64> = self.recv(kind, root, None)?;
            let got = b.len();
            self.finish(kind, 0, got);
            Ok(b)
        }
    }

    /// Returns once every worker has entered the same barrier epoch.
    pub fn barrier(&mut self) -> Result<(), CollectiveError> {
        let kind = Primitive::Barrier;
        for j in (0..self.n).filter(|&j| j != self.me) {
            self.send(kind, j, 0, ());
        }
        for j in (0..self.n).filter(|&j| j != self.me) {
            self.recv::<()>(kind, j, None)?;
        }
        self.finish(kind, 0, 0);
        Ok(())
    }

    /// Sums a short metric vector over workers in worker order; the result
    /// is identical on every worker. Accounted under [`Primitive::Control`].
    pub fn sum_metrics(&mut self, values: Vec<f64>) -> Result<Vec<f64>, CollectiveError> {
        let kind = Primitive::Control;
        let k = values.len();
        let mut sent = 0;
        for j in (0..self.n).filter(|&j| j != self.me) {
            sent += k;
            self.send(kind, j, k, values.clone());
        }
        let mut total = vec![0.0; k];
        let mut got = 0;
        for j in 0..self.n {
            let v = if j == self.me {
                values.clone()
            } else {
                let v: Vec<f64> = self.recv(kind, j, Some(k))?;
                got += v.len();
                v
            };
            for (t, x) in total.iter_mut().zip(&v) {
                *t += x;
            }
        }
        self.finish(kind, sent, got);
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_buffer() {
        for k in 0..20 {
            for n in 1..6 {
                let mut covered = 0;
                for c in 0..n {
                    let r = Communicator::chunk(k, n, c);
                    assert_eq!(r.start, covered);
                    covered = r.end;
                }
                assert_eq!(covered, k);
            }
        }
    }

    #[test]
    fn single_worker_all_to_all() {
        let (out, stats) = WorkerGroup::run(1, |c| c.all_to_all(vec![vec![1u64, 2]]).unwrap());
        assert_eq!(out[0], vec![vec![1u64, 2]]);
        assert_eq!(stats.summary(Primitive::AllToAll).elements_sent, 0);
    }

    #[test]
    fn wrong_bucket_count() {
        let (out, _) = WorkerGroup::run(2, |c| c.all_to_all::<u64>(vec![vec![]]));
        assert!(out.iter().all(|r| matches!(
            r,
            Err(CollectiveError::BucketCount {
                expected: 2,
                got: 1,
                ..
            })
        )));
    }

    #[test]
    fn epoch_mismatch_is_reported() {
        let comms = WorkerGroup::with_timeout(2, Duration::from_millis(500));
        let (out, _) = WorkerGroup::run_with(comms, |c| {
            if c.rank() == 0 {
                c.barrier().unwrap_or(());
                c.broadcast(0, vec![1.0]).map(|_| ())
            } else {
                c.broadcast(0, vec![]).map(|_| ())
            }
        });
        let fault = out.into_iter().find_map(Result::err).unwrap();
        assert!(matches!(
            fault,
            CollectiveError::EpochMismatch { .. } | CollectiveError::Timeout { .. }
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let comms = WorkerGroup::with_timeout(2, Duration::from_millis(500));
        let (out, _) = WorkerGroup::run_with(comms, |c| {
            let len = 2 + c.rank();
            c.ring_all_reduce(vec![1.0; len])
        });
        assert!(out
            .iter()
            .all(|r| matches!(r, Err(CollectiveError::LengthMismatch { .. }))));
    }

    #[test]
    fn bad_root_rejected() {
        let (out, _) = WorkerGroup::run(2, |c| c.gather(5, vec![1.0]));
        assert!(out
            .iter()
            .all(|r| matches!(r, Err(CollectiveError::BadRoot { root: 5, .. }))));
    }
}

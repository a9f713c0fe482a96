use std::fs::File;
use std::io::{BufReader, Seek, SeekFrom};
use std::iter::Peekable;
use std::ops::Range;

use super::format::decode_record;
use super::{MetaIoError, MetaSample, PreprocessedRecord, RecordFile, TaskBatch};

/// Batches `[start, end)` of worker `i` out of `n`: contiguous, sizes differ
/// by at most one, the first `count % n` workers take the extra batch.
pub fn worker_batch_range(batch_count: usize, i: usize, n: usize) -> Range<usize> {
    let base = batch_count / n;
    let extra = batch_count % n;
    let start = i * base + i.min(extra);
    let len = base + usize::from(i < extra);
    start..start + len
}

/// Sequential reader over one worker's slice of the body.
pub struct RangeReader {
    reader: BufReader<File>,
    pos: u64,
    end: u64,
    dense_width: usize,
    batches: Range<usize>,
    trace: Option<Vec<u64>>,
    failed: bool,
}

impl RangeReader {
    pub fn batches(&self) -> Range<usize> {
        self.batches.clone()
    }

    /// Record the start offset of every record read.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn positions(&self) -> &[u64] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

impl Iterator for RangeReader {
    type Item = Result<PreprocessedRecord, MetaIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos >= self.end {
            return None;
        }
        if let Some(t) = self.trace.as_mut() {
            debug_assert!(t.last().is_none_or(|&p| p <= self.pos));
            t.push(self.pos);
        }
        match decode_record(&mut self.reader, self.dense_width) {
            Ok((rec, len)) => {
                self.pos += len;
                if self.pos > self.end {
                    self.failed = true;
                    return Some(Err(MetaIoError::Corrupt(format!(
                        "record crosses range end {}",
                        self.end
                    ))));
                }
                Some(Ok(rec))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Opens worker `i`'s contiguous batch slice: one seek, then forward reads.
pub fn load_worker_range(
    file: &RecordFile,
    i: usize,
    n: usize,
) -> Result<RangeReader, MetaIoError> {
    if n == 0 || i >= n {
        return Err(MetaIoError::WorkerIndex { worker: i, n });
    }
    let batches = worker_batch_range(file.batch_count(), i, n);
    if batches.is_empty() {
        log::warn!(
            "worker {i} of {n} gets no batches ({} in file)",
            file.batch_count()
        );
    }
    let (start, end) = file.byte_range(batches.clone());
    let mut f = File::open(file.path())?;
    f.seek(SeekFrom::Start(start))?;
    Ok(RangeReader {
        reader: BufReader::with_capacity(1 << 16, f),
        pos: start,
        end,
        dense_width: file.header().dense_width as usize,
        batches,
        trace: None,
        failed: false,
    })
}

/// One task-uniform group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub task_id: u64,
    pub batch_id: u64,
    pub samples: Vec<MetaSample>,
}

/// Groups consecutive records by `batch_id`.
pub struct GroupBatches<I: Iterator> {
    inner: Peekable<I>,
    failed: bool,
}

pub fn group_batch<I>(records: I) -> GroupBatches<I::IntoIter>
where
    I: IntoIterator<Item = Result<PreprocessedRecord, MetaIoError>>,
{
    GroupBatches {
        inner: records.into_iter().peekable(),
        failed: false,
    }
}

impl<I> Iterator for GroupBatches<I>
where
    I: Iterator<Item = Result<PreprocessedRecord, MetaIoError>>,
{
    type Item = Result<GroupBatch, MetaIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let first = match self.inner.next()? {
            Ok(r) => r,
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        let mut group = GroupBatch {
            task_id: first.sample.task_id,
            batch_id: first.batch_id,
            samples: vec![first.sample],
        };
        while let Some(Ok(next)) = self.inner.peek() {
            if next.batch_id != group.batch_id {
                break;
            }
            if next.sample.task_id != group.task_id {
                self.failed = true;
                return Some(Err(MetaIoError::MixedTasks {
                    batch_id: group.batch_id,
                    first: group.task_id,
                    other: next.sample.task_id,
                }));
            }
            let Some(Ok(rec)) = self.inner.next() else {
                unreachable!()
            };
            group.samples.push(rec.sample);
        }
        Some(Ok(group))
    }
}

/// First `ceil(ratio * len)` samples become support, clamped so that both
/// sides are nonempty.
pub fn split_support_query(group: GroupBatch, ratio: f64) -> Result<TaskBatch, MetaIoError> {
    let len = group.samples.len();
    if len < 2 {
        return Err(MetaIoError::Singleton {
            task_id: group.task_id,
            len,
        });
    }
    let wanted = (ratio * len as f64).ceil();
    let cut = if wanted.is_nan() {
        1
    } else {
        (wanted.max(1.0) as usize).min(len - 1)
    };
    let mut support = group.samples;
    let query = support.split_off(cut);
    TaskBatch::new(group.task_id, support, query)
}

/// Splits groups, counting singletons that cannot be used for training.
#[derive(Debug, Clone)]
pub struct Splitter {
    pub ratio: f64,
    pub skipped: usize,
}

impl Splitter {
    pub fn new(ratio: f64) -> Self {
        Self { ratio, skipped: 0 }
    }

    pub fn split(&mut self, group: GroupBatch) -> Option<TaskBatch> {
        match split_support_query(group, self.ratio) {
            Ok(b) => Some(b),
            Err(_) => {
                self.skipped += 1;
                None
            }
        }
    }
}

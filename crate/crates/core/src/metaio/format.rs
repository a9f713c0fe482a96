//! Binary record container, little-endian throughout.
//!
//! ```text
//! header  magic "GMIO" | version u32 = 1 | batch_size u32 | dense_width u32
//!         | record_count u64 | batch_count u64                    (32 bytes)
//! body    per record: task_id u64 | batch_id u64 | n_ids u32 | ids u64 x n_ids
//!         | dense f64 x dense_width | label f64
//! index   per batch: batch_id u64 | byte_offset u64 | record_count u32
//! footer  CRC32 of the body, u32
//! ```
//!
//! Index offsets are absolute file positions of each batch's first record,
//! listed in body order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{MetaIoError, MetaSample, Preprocessed, PreprocessedRecord};

pub const MAGIC: [u8; 4] = *b"GMIO";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
const INDEX_ENTRY_LEN: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub batch_size: u32,
    pub dense_width: u32,
    pub record_count: u64,
    pub batch_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub batch_id: u64,
    pub byte_offset: u64,
    pub record_count: u32,
}

/// An opened, checksum-verified record file. Immutable; readers open their
/// own handles.
#[derive(Debug, Clone)]
pub struct RecordFile {
    path: PathBuf,
    header: Header,
    index: Vec<IndexEntry>,
    body_end: u64,
}

pub(super) fn encode_record(buf: &mut Vec<u8>, sample: &MetaSample, batch_id: u64) {
    buf.extend_from_slice(&sample.task_id.to_le_bytes());
    buf.extend_from_slice(&batch_id.to_le_bytes());
    buf.extend_from_slice(&(sample.feature_ids.len() as u32).to_le_bytes());
    for id in &sample.feature_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for v in &sample.dense_features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.label.to_le_bytes());
}

pub(super) fn decode_record<R: Read>(
    r: &mut R,
    dense_width: usize,
) -> Result<(PreprocessedRecord, u64), MetaIoError> {
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8)?;
    let task_id = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let batch_id = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let n_ids = u32::from_le_bytes(b4) as usize;
    let mut feature_ids = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        r.read_exact(&mut b8)?;
        feature_ids.push(u64::from_le_bytes(b8));
    }
    let mut dense_features = Vec::with_capacity(dense_width);
    for _ in 0..dense_width {
        r.read_exact(&mut b8)?;
        dense_features.push(f64::from_le_bytes(b8));
    }
    r.read_exact(&mut b8)?;
    let label = f64::from_le_bytes(b8);
    let len = 8 + 8 + 4 + 8 * (n_ids + dense_width + 1);
    Ok((
        PreprocessedRecord {
            sample: MetaSample {
                task_id,
                feature_ids,
                dense_features,
                label,
            },
            batch_id,
        },
        len as u64,
    ))
}

impl Preprocessed {
    /// Serializes the whole container.
    pub fn write_to<W: Write>(&self, out: W) -> Result<(), MetaIoError> {
        let mut w = BufWriter::new(out);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.batch_size as u32).to_le_bytes())?;
        w.write_all(&(self.dense_width as u32).to_le_bytes())?;
        w.write_all(&(self.record_count() as u64).to_le_bytes())?;
        w.write_all(&(self.batches.len() as u64).to_le_bytes())?;

        let mut crc = crc32fast::Hasher::new();
        let mut offset = HEADER_LEN;
        let mut index = Vec::with_capacity(self.batches.len());
        let mut buf = Vec::new();
        for b in &self.batches {
            index.push(IndexEntry {
                batch_id: b.batch_id,
                byte_offset: offset,
                record_count: b.samples.len() as u32,
            });
            for s in &b.samples {
                buf.clear();
                encode_record(&mut buf, s, b.batch_id);
                crc.update(&buf);
                w.write_all(&buf)?;
                offset += buf.len() as u64;
            }
        }
        for e in &index {
            w.write_all(&e.batch_id.to_le_bytes())?;
            w.write_all(&e.byte_offset.to_le_bytes())?;
            w.write_all(&e.record_count.to_le_bytes())?;
        }
        w.write_all(&crc.finalize().to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<RecordFile, MetaIoError> {
        self.write_to(File::create(path.as_ref())?)?;
        RecordFile::open(path)
    }
}

impl RecordFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MetaIoError> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path)?;
        let file_len = f.metadata()?.len();
        if file_len < HEADER_LEN + 4 {
            return Err(MetaIoError::Corrupt(format!(
                "file is only {file_len} bytes"
            )));
        }
        let mut head = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut head)?;
        let magic: [u8; 4] = head[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(MetaIoError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        let header = Header {
            version: u32_at(4),
            batch_size: u32_at(8),
            dense_width: u32_at(12),
            record_count: u64_at(16),
            batch_count: u64_at(24),
        };
        if header.version != VERSION {
            return Err(MetaIoError::BadVersion(header.version));
        }
        let tail = header
            .batch_count
            .checked_mul(INDEX_ENTRY_LEN)
            .and_then(|t| t.checked_add(4))
            .filter(|&t| t <= file_len - HEADER_LEN)
            .ok_or_else(|| MetaIoError::Corrupt("index does not fit in file".into()))?;
        let body_end = file_len - tail;

        f.seek(SeekFrom::Start(body_end))?;
        let mut raw = vec![0u8; tail as usize];
        f.read_exact(&mut raw)?;
        let mut index = Vec::with_capacity(header.batch_count as usize);
        for e in raw[..raw.len() - 4].chunks_exact(INDEX_ENTRY_LEN as usize) {
            index.push(IndexEntry {
                batch_id: u64::from_le_bytes(e[0..8].try_into().unwrap()),
                byte_offset: u64::from_le_bytes(e[8..16].try_into().unwrap()),
                record_count: u32::from_le_bytes(e[16..20].try_into().unwrap()),
            });
        }
        let expected = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());

        let mut prev = None;
        for e in &index {
            if e.byte_offset < HEADER_LEN || e.byte_offset >= body_end {
                return Err(MetaIoError::Corrupt(format!(
                    "batch {} offset {} outside body",
                    e.batch_id, e.byte_offset
                )));
            }
            if prev.is_some_and(|p| e.byte_offset <= p) {
                return Err(MetaIoError::Corrupt("index offsets not increasing".into()));
            }
            prev = Some(e.byte_offset);
        }
        if index.first().is_some_and(|e| e.byte_offset != HEADER_LEN) {
            return Err(MetaIoError::Corrupt(
                "first batch does not start the body".into(),
            ));
        }
        let indexed: u64 = index.iter().map(|e| e.record_count as u64).sum();
        if indexed != header.record_count {
            return Err(MetaIoError::Corrupt(format!(
                "index lists {indexed} records, header {}",
                header.record_count
            )));
        }

        f.seek(SeekFrom::Start(HEADER_LEN))?;
        let mut body = BufReader::new(f).take(body_end - HEADER_LEN);
        let mut crc = crc32fast::Hasher::new();
        let mut chunk = vec![0u8; 1 << 16];
        loop {
            let n = body.read(&mut chunk)?;
            if n == 0 {
                break;
            }
            crc.update(&chunk[..n]);
        }
        let actual = crc.finalize();
        if actual != expected {
            return Err(MetaIoError::Checksum { expected, actual });
        }

        Ok(Self {
            path,
            header,
            index,
            body_end,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn batch_count(&self) -> usize {
        self.index.len()
    }

    pub fn body_end(&self) -> u64 {
        self.body_end
    }

    /// Byte range `[start, end)` covering index entries `batches`.
    pub fn byte_range(&self, batches: std::ops::Range<usize>) -> (u64, u64) {
        if batches.is_empty() {
            return (self.body_end, self.body_end);
        }
        let start = self.index[batches.start].byte_offset;
        let end = self
            .index
            .get(batches.end)
            .map_or(self.body_end, |e| e.byte_offset);
        (start, end)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{preprocess, MetaSample};
    use super::*;

    fn data() -> Preprocessed {
        let samples = (0..9u64)
            .map(|i| MetaSample {
                task_id: i % 3,
                feature_ids: (0..=i % 2).collect(),
                dense_features: vec![i as f64, -(i as f64)],
                label: (i % 2) as f64,
            })
            .collect();
        preprocess(samples, 2, 1).unwrap()
    }

    #[test]
    fn header_bytes_are_exact() {
        let p = data();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"GMIO");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..24], &9u64.to_le_bytes());
        assert_eq!(&buf[24..32], &(p.batches.len() as u64).to_le_bytes());
        // first record of the first batch
        let first = &p.batches[0].samples[0];
        assert_eq!(&buf[32..40], &first.task_id.to_le_bytes());
        assert_eq!(&buf[40..48], &p.batches[0].batch_id.to_le_bytes());
        let body_len: usize = p
            .batches
            .iter()
            .flat_map(|b| &b.samples)
            .map(|s| 20 + 8 * (s.feature_ids.len() + 3))
            .sum();
        assert_eq!(buf.len(), 32 + body_len + 20 * p.batches.len() + 4);
        let crc = crc32fast::hash(&buf[32..32 + body_len]);
        assert_eq!(&buf[buf.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn open_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gmio");
        let p = data();
        let f = p.write_file(&path).unwrap();
        assert_eq!(f.header().record_count, 9);
        assert_eq!(f.batch_count(), p.batches.len());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RecordFile::open(&path),
            Err(MetaIoError::Checksum { .. })
        ));

        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RecordFile::open(&path),
            Err(MetaIoError::BadMagic(_))
        ));
    }
}

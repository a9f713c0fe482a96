use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetaIoError, MetaSample};

/// Up to `batch_size` samples of a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub task_id: u64,
    pub samples: Vec<MetaSample>,
}

impl Batch {
    /// Short trailing batch of a task.
    pub fn is_partial(&self, batch_size: usize) -> bool {
        self.samples.len() < batch_size
    }
}

/// Preprocessor output, batches in their final (shuffled) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub batch_size: usize,
    pub dense_width: usize,
    pub batches: Vec<Batch>,
}

impl Preprocessed {
    pub fn record_count(&self) -> usize {
        self.batches.iter().map(|b| b.samples.len()).sum()
    }

    pub fn partial_batches(&self) -> usize {
        self.batches
            .iter()
            .filter(|b| b.is_partial(self.batch_size))
            .count()
    }
}

fn validate(samples: &[MetaSample], batch_size: usize) -> Result<usize, MetaIoError> {
    if batch_size < 2 {
        return Err(MetaIoError::BatchSize(batch_size));
    }
    let first = samples.first().ok_or(MetaIoError::EmptyInput)?;
    let width = first.dense_features.len();
    for (index, s) in samples.iter().enumerate() {
        if s.feature_ids.is_empty() {
            return Err(MetaIoError::BadSample {
                index,
                reason: "no feature ids".into(),
            });
        }
        if s.dense_features.len() != width {
            return Err(MetaIoError::BadSample {
                index,
                reason: format!("dense width {} != {}", s.dense_features.len(), width),
            });
        }
    }
    Ok(width)
}

/// Stable sort by task, then cut each task into consecutive runs of
/// `batch_size`. Batch ids are global and increase in this order; a task's
/// last batch may be short.
pub fn assign_batches(
    mut samples: Vec<MetaSample>,
    batch_size: usize,
) -> Result<Vec<Batch>, MetaIoError> {
    validate(&samples, batch_size)?;
    samples.sort_by_key(|s| s.task_id);
    let mut batches: Vec<Batch> = Vec::new();
    for s in samples {
        match batches.last_mut() {
            Some(b) if b.task_id == s.task_id && b.samples.len() < batch_size => b.samples.push(s),
            _ => batches.push(Batch {
                batch_id: batches.len() as u64,
                task_id: s.task_id,
                samples: vec![s],
            }),
        }
    }
    Ok(batches)
}

/// Fisher-Yates over whole batches; records never leave their batch.
pub fn shuffle_batches(batches: &mut [Batch], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
}

pub fn preprocess(
    samples: Vec<MetaSample>,
    batch_size: usize,
    seed: u64,
) -> Result<Preprocessed, MetaIoError> {
    let dense_width = validate(&samples, batch_size)?;
    let mut batches = assign_batches(samples, batch_size)?;
    shuffle_batches(&mut batches, seed);
    let out = Preprocessed {
        batch_size,
        dense_width,
        batches,
    };
    let partial = out.partial_batches();
    if partial > 0 {
        log::info!("{partial} partial batch(es) kept and flagged");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(task: u64, n: u64) -> MetaSample {
        MetaSample {
            task_id: task,
            feature_ids: vec![n],
            dense_features: vec![n as f64],
            label: 0.0,
        }
    }

    #[test]
    fn one_task_two_batches() {
        let s: Vec<_> = (0..4).map(|i| sample(7, i)).collect();
        let b = assign_batches(s, 2).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.task_id == 7 && b.samples.len() == 2));
    }

    #[test]
    fn partial_batch_kept_and_flagged() {
        // interleaved input: stable sort must keep per-task order
        let s = vec![
            sample(1, 0),
            sample(2, 1),
            sample(1, 2),
            sample(2, 3),
            sample(1, 4),
        ];
        let b = assign_batches(s, 2).unwrap();
        let shape: Vec<(u64, u64, usize)> = b
            .iter()
            .map(|b| (b.batch_id, b.task_id, b.samples.len()))
            .collect();
        assert_eq!(shape, vec![(0, 1, 2), (1, 1, 1), (2, 2, 2)]);
        assert!(b[1].is_partial(2));
        assert!(!b[0].is_partial(2));
        assert_eq!(b[0].samples[0].feature_ids, vec![0]);
        assert_eq!(b[0].samples[1].feature_ids, vec![2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            preprocess(vec![], 2, 0),
            Err(MetaIoError::EmptyInput)
        ));
        assert!(matches!(
            preprocess(vec![sample(1, 1)], 1, 0),
            Err(MetaIoError::BatchSize(1))
        ));
    }

    #[test]
    fn shuffle_replays_under_seed() {
        let s: Vec<_> = (0..64).map(|i| sample(i % 8, i)).collect();
        let a = preprocess(s.clone(), 2, 11).unwrap();
        let b = preprocess(s.clone(), 2, 11).unwrap();
        let c = preprocess(s, 2, 12).unwrap();
        let ids = |p: &Preprocessed| p.batches.iter().map(|b| b.batch_id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
        let (mut x, mut y) = (ids(&a), ids(&c));
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }
}

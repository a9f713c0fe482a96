//! Tape-free evaluation of the model and of the one-step meta-objective.

use std::collections::{HashMap, HashSet};

use metashard::metaio::{MetaSample, TaskBatch};
use metashard::nn::{DenseParams, LossKind};
use metashard::tensor::{softplus, Tensor};
use metashard::trainer::{inner_step, GradMode, HyperParams, ModelSpec, PrefetchResult};

pub fn sample(task: u64, ids: &[u64], dense: &[f64], label: f64) -> MetaSample {
    MetaSample {
        task_id: task,
        feature_ids: ids.to_vec(),
        dense_features: dense.to_vec(),
        label,
    }
}

pub fn plain_loss(
    rows: &HashMap<u64, Vec<f64>>,
    dense: &DenseParams,
    samples: &[MetaSample],
    kind: LossKind,
) -> f64 {
    let dim = rows.values().next().map_or(0, Vec::len);
    let width = dim + samples[0].dense_features.len();
    let mut x = Vec::with_capacity(samples.len() * width);
    for s in samples {
        let mut pooled = vec![0.0; dim];
        let w = 1.0 / s.feature_ids.len() as f64;
        for id in &s.feature_ids {
            for (p, v) in pooled.iter_mut().zip(&rows[id]) {
                *p += w * v;
            }
        }
        x.extend(pooled);
        x.extend_from_slice(&s.dense_features);
    }
    let out = dense
        .forward(&Tensor::new(samples.len(), width, x).unwrap())
        .unwrap();
    let n = samples.len() as f64;
    out.data()
        .iter()
        .zip(samples)
        .map(|(&z, s)| match kind {
            LossKind::Bce => softplus(z) - s.label * z,
            LossKind::Mse => (z - s.label).powi(2),
        })
        .sum::<f64>()
        / n
}

/// Flat parameter vector: prefetched rows in prefetch order, then dense.
pub fn flatten(prefetch: &PrefetchResult, dense: &DenseParams) -> Vec<f64> {
    let mut v: Vec<f64> = prefetch
        .ids
        .iter()
        .flat_map(|id| prefetch.rows[id].clone())
        .collect();
    v.extend(dense.flatten());
    v
}

pub fn unflatten(
    flat: &[f64],
    like: &PrefetchResult,
    dense: &DenseParams,
    dim: usize,
) -> (PrefetchResult, DenseParams) {
    let mut p = like.clone();
    for (k, id) in like.ids.iter().enumerate() {
        p.rows.insert(*id, flat[k * dim..(k + 1) * dim].to_vec());
    }
    let mut d = dense.clone();
    d.assign_flat(&flat[like.ids.len() * dim..]).unwrap();
    (p, d)
}

/// Query loss after one inner step, with the inner step taken on values
/// only (no second-order information).
pub fn meta_objective(
    flat: &[f64],
    like: &PrefetchResult,
    dense: &DenseParams,
    batch: &TaskBatch,
    spec: &ModelSpec,
    hyper: &HyperParams,
) -> f64 {
    let (p, d) = unflatten(flat, like, dense, spec.embedding_dim);
    let values_only = HyperParams {
        mode: GradMode::FirstOrder,
        ..*hyper
    };
    let inner = inner_step(&p, &d, &batch.support, spec, &values_only).unwrap();
    let adapted = inner.adapted_rows(&p, &batch.support);
    let support: HashSet<u64> = adapted.keys().copied().collect();
    let view: HashMap<u64, Vec<f64>> = p
        .ids
        .iter()
        .map(|id| {
            let row = if support.contains(id) {
                &adapted[id]
            } else {
                &p.rows[id]
            };
            (*id, row.clone())
        })
        .collect();
    plain_loss(&view, &inner.adapted_dense(&d), &batch.query, spec.loss)
}

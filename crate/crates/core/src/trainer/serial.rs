use crate::embedding::EmbeddingShard;
use crate::nn::DenseParams;

use super::step::{prefetch_local, task_meta_gradient, TaskGradient};
use super::{HyperParams, ModelSpec, TaskBatch, TrainError};

/// Unsharded counterpart of the per-worker [`super::MetaModel`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialModel {
    pub table: EmbeddingShard,
    pub dense: DenseParams,
}

/// One meta update over `batches` (one per simulated worker) in a single
/// context: every task reads the same snapshot, the outer gradients are
/// summed, then a single step of size `beta` is applied.
pub fn serial_reference(
    batches: &[TaskBatch],
    model: &mut SerialModel,
    spec: &ModelSpec,
    hyper: &HyperParams,
) -> Result<Vec<TaskGradient>, TrainError> {
    // Rows every task will read, materialized before any update.
    let mut prefetched = Vec::with_capacity(batches.len());
    for b in batches {
        prefetched.push(prefetch_local(b, &mut model.table)?);
    }
    let mut grads = Vec::with_capacity(batches.len());
    for (b, p) in batches.iter().zip(&prefetched) {
        grads.push(task_meta_gradient(p, &model.dense, b, spec, hyper)?);
    }

    let mut dense_sum: Option<Vec<f64>> = None;
    let mut emb = Vec::new();
    for g in &grads {
        match dense_sum.as_mut() {
            None => dense_sum = Some(g.dense.clone()),
            Some(sum) => sum.iter_mut().zip(&g.dense).for_each(|(s, v)| *s += v),
        }
        emb.extend(g.embedding.iter().cloned());
    }
    model.table.apply_sparse_grads(&emb, hyper.beta)?;
    if let Some(sum) = dense_sum {
        let mut flat = model.dense.flatten();
        for (p, g) in flat.iter_mut().zip(&sum) {
            *p -= hyper.beta * g;
        }
        model.dense.assign_flat(&flat)?;
    }
    Ok(grads)
}

/// Mean query loss after one adaptation on each batch's support set, with
/// `table` and `dense` as the meta parameters. Nothing is updated.
pub fn adapted_query_loss(
    batches: &[TaskBatch],
    table: &EmbeddingShard,
    dense: &DenseParams,
    spec: &ModelSpec,
    hyper: &HyperParams,
) -> Result<f64, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::Config("no evaluation batches".into()));
    }
    let mut table = table.clone();
    let mut total = 0.0;
    for b in batches {
        let p = prefetch_local(b, &mut table)?;
        total += task_meta_gradient(&p, dense, b, spec, hyper)?.query_loss;
    }
    Ok(total / batches.len() as f64)
}

//! One meta-iteration, split into its stages.

use std::collections::{HashMap, HashSet};

use crate::autodiff::{Graph, NodeId};
use crate::collectives::{Communicator, Primitive};
use crate::embedding::{dedup_ids, EmbeddingError, EmbeddingShard, FeatureId, Origin};
use crate::metaio::MetaSample;
use crate::nn::{forward_mlp, loss, DenseNodes, DenseParams};
use crate::tensor::Tensor;

use super::{GradMode, HyperParams, ModelSpec, TaskBatch, TrainError};

/// This worker's meta parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub shard: EmbeddingShard,
    pub dense: DenseParams,
    pub hyper: HyperParams,
}

/// Rows for the union of support and query ids, fetched once.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchResult {
    /// Support ids first, then query-only ids, each once.
    pub ids: Vec<FeatureId>,
    pub rows: HashMap<FeatureId, Vec<f64>>,
    pub owners: HashMap<FeatureId, usize>,
}

impl PrefetchResult {
    fn positions(&self) -> HashMap<FeatureId, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    fn table(&self, dim: usize) -> Result<Tensor, TrainError> {
        let mut data = Vec::with_capacity(self.ids.len() * dim);
        for id in &self.ids {
            data.extend_from_slice(&self.rows[id]);
        }
        Ok(Tensor::new(self.ids.len(), dim, data)?)
    }
}

pub fn union_ids(batch: &TaskBatch) -> Vec<FeatureId> {
    dedup_ids(
        batch
            .support
            .iter()
            .chain(&batch.query)
            .flat_map(|s| s.feature_ids.iter().copied()),
    )
}

fn routing(e: EmbeddingError) -> TrainError {
    match e {
        EmbeddingError::WrongShard { .. } => TrainError::Routing(e.to_string()),
        other => TrainError::Embedding(other),
    }
}

/// Request/response all-to-all round trip for the deduplicated union of
/// support and query ids: exactly two all-to-all calls however much the
/// two sets overlap.
pub fn prefetch_embeddings(
    comm: &mut Communicator,
    batch: &TaskBatch,
    shard: &mut EmbeddingShard,
) -> Result<PrefetchResult, TrainError> {
    let n = comm.size();
    let map = shard.shard_map();
    if map.num_workers() != n {
        return Err(TrainError::Config(format!(
            "shard map has {} workers, group has {n}",
            map.num_workers()
        )));
    }
    let ids = union_ids(batch);
    let mut requests: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut owners = HashMap::with_capacity(ids.len());
    for &id in &ids {
        let owner = map.owner(id);
        requests[owner].push(id);
        owners.insert(id, owner);
    }

    let incoming = comm.all_to_all(requests.clone())?;
    let mut responses = Vec::with_capacity(n);
    for wanted in &incoming {
        let found = shard.local_lookup(wanted, Origin::Both).map_err(routing)?;
        responses.push(found.vectors);
    }
    let answered = comm.all_to_all(responses)?;

    let mut rows = HashMap::with_capacity(ids.len());
    for (asked, got) in requests.iter().zip(answered) {
        if asked.len() != got.len() {
            return Err(TrainError::Routing(format!(
                "asked for {} rows, received {}",
                asked.len(),
                got.len()
            )));
        }
        rows.extend(asked.iter().copied().zip(got));
    }
    Ok(PrefetchResult { ids, rows, owners })
}

/// Same result as [`prefetch_embeddings`] from a table in this context.
pub fn prefetch_local(
    batch: &TaskBatch,
    table: &mut EmbeddingShard,
) -> Result<PrefetchResult, TrainError> {
    let ids = union_ids(batch);
    let found = table.local_lookup(&ids, Origin::Both).map_err(routing)?;
    let map = table.shard_map();
    Ok(PrefetchResult {
        owners: ids.iter().map(|&id| (id, map.owner(id))).collect(),
        rows: found.ids.into_iter().zip(found.vectors).collect(),
        ids,
    })
}

/// Constant tensors describing one sample set against the prefetched rows.
struct SetInputs {
    /// `b x m` mean-pooling weights over prefetched rows.
    pool: Tensor,
    /// `b x dense_width`
    dense: Tensor,
    /// `b x 1`
    labels: Tensor,
}

fn set_inputs(
    samples: &[MetaSample],
    positions: &HashMap<FeatureId, usize>,
    dense_width: usize,
) -> Result<SetInputs, TrainError> {
    let (b, m) = (samples.len(), positions.len());
    let mut pool = Tensor::zeros(b, m);
    let mut dense = Vec::with_capacity(b * dense_width);
    let mut labels = Vec::with_capacity(b);
    for (r, s) in samples.iter().enumerate() {
        if s.dense_features.len() != dense_width {
            return Err(TrainError::Config(format!(
                "sample has {} dense features, model expects {dense_width}",
                s.dense_features.len()
            )));
        }
        let w = 1.0 / s.feature_ids.len() as f64;
        for id in &s.feature_ids {
            let c = *positions.get(id).ok_or(TrainError::MissingPrefetch(*id))?;
            pool.data_mut()[r * m + c] += w;
        }
        dense.extend_from_slice(&s.dense_features);
        labels.push(s.label);
    }
    Ok(SetInputs {
        pool,
        dense: Tensor::new(b, dense_width, dense)?,
        labels: Tensor::new(b, 1, labels)?,
    })
}

/// Column selectors placing pooled embeddings then dense features side by
/// side: `input = pooled * sel_emb + dense * sel_dense`.
struct Selectors {
    emb: NodeId,
    dense: Option<NodeId>,
}

fn selectors(graph: &mut Graph, dim: usize, dense_width: usize) -> Selectors {
    let width = dim + dense_width;
    let mut e = Tensor::zeros(dim, width);
    for i in 0..dim {
        e.data_mut()[i * width + i] = 1.0;
    }
    let emb = graph.constant(e);
    let dense = (dense_width > 0).then(|| {
        let mut d = Tensor::zeros(dense_width, width);
        for i in 0..dense_width {
            d.data_mut()[i * width + dim + i] = 1.0;
        }
        graph.constant(d)
    });
    Selectors { emb, dense }
}

fn set_loss(
    graph: &mut Graph,
    set: &SetInputs,
    table: NodeId,
    dense: &DenseNodes,
    sel: &Selectors,
    spec: &ModelSpec,
) -> Result<NodeId, TrainError> {
    let pool = graph.constant(set.pool.clone());
    let pooled = graph.matmul(pool, table)?;
    let mut input = graph.matmul(pooled, sel.emb)?;
    if let Some(sd) = sel.dense {
        let x = graph.constant(set.dense.clone());
        let placed = graph.matmul(x, sd)?;
        input = graph.add(input, placed)?;
    }
    let pred = forward_mlp(graph, dense, input)?;
    Ok(loss(spec.loss, graph, pred, &set.labels)?)
}

/// Tape state after the inner loop.
#[derive(Debug)]
pub struct InnerOutput {
    pub graph: Graph,
    /// Leaf holding the prefetched rows (`m x dim`, prefetch order).
    pub meta_table: NodeId,
    pub meta_dense: DenseNodes,
    pub adapted_table: NodeId,
    pub adapted_dense: DenseNodes,
    pub support_loss: f64,
    selectors_dim: (usize, usize),
}

impl InnerOutput {
    /// Adapted rows of the support ids.
    pub fn adapted_rows(
        &self,
        prefetch: &PrefetchResult,
        support: &[MetaSample],
    ) -> HashMap<FeatureId, Vec<f64>> {
        let table = self.graph.value(self.adapted_table);
        let positions = prefetch.positions();
        support
            .iter()
            .flat_map(|s| s.feature_ids.iter())
            .map(|id| (*id, table.row(positions[id]).to_vec()))
            .collect()
    }

    pub fn adapted_dense(&self, like: &DenseParams) -> DenseParams {
        let mut out = like.clone();
        for (layer, &(w, b, _)) in out.layers.iter_mut().zip(&self.adapted_dense.layers) {
            layer.weight = self.graph.value(w).clone();
            layer.bias = self.graph.value(b).clone();
        }
        out
    }
}

/// `inner_steps` SGD steps with step `alpha` on the support loss.
///
/// In full second-order mode the adapted values stay differentiable
/// functions of the meta leaves; in first-order mode each step subtracts a
/// constant, so the adapted values depend on the meta leaves with identity
/// Jacobian.
pub fn inner_step(
    prefetch: &PrefetchResult,
    dense: &DenseParams,
    support: &[MetaSample],
    spec: &ModelSpec,
    hyper: &HyperParams,
) -> Result<InnerOutput, TrainError> {
    let dim = spec.embedding_dim;
    let dense_width = spec.dense_width();
    let positions = prefetch.positions();
    let set = set_inputs(support, &positions, dense_width)?;

    let mut graph = Graph::new();
    let meta_table = graph.leaf(prefetch.table(dim)?);
    let meta_dense = dense.to_graph(&mut graph);
    let sel = selectors(&mut graph, dim, dense_width);
    let create_graph = hyper.mode == GradMode::FullSecondOrder;

    let mut table = meta_table;
    let mut params = meta_dense.clone();
    let mut support_loss = None;
    for _ in 0..hyper.inner_steps {
        let l = set_loss(&mut graph, &set, table, &params, &sel, spec)?;
        support_loss.get_or_insert(graph.value(l).item()?);
        let mut wrt = vec![table];
        wrt.extend(params.ids());
        let grads = graph.grad(l, &wrt, create_graph)?;
        let mut stepped = Vec::with_capacity(wrt.len());
        for id in wrt {
            let step = graph.scale(grads[&id], hyper.alpha)?;
            stepped.push(graph.sub(id, step)?);
        }
        table = stepped[0];
        params = params.with_ids(&stepped[1..]);
    }

    Ok(InnerOutput {
        graph,
        meta_table,
        meta_dense,
        adapted_table: table,
        adapted_dense: params,
        support_loss: support_loss.unwrap_or(f64::NAN),
        selectors_dim: (dim, dense_width),
    })
}

/// Query-view rows: adapted value for ids the support set touched, the
/// stale prefetched value otherwise.
pub fn overlap_update(
    prefetch: &PrefetchResult,
    adapted: &HashMap<FeatureId, Vec<f64>>,
    query: &[MetaSample],
) -> HashMap<FeatureId, Vec<f64>> {
    query
        .iter()
        .flat_map(|s| s.feature_ids.iter())
        .map(|id| {
            let row = adapted.get(id).unwrap_or(&prefetch.rows[id]);
            (*id, row.clone())
        })
        .collect()
}

/// Outer gradient of one task, with respect to the meta parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    /// One entry per distinct query id, in prefetch order.
    pub embedding: Vec<(FeatureId, Vec<f64>)>,
    /// Flattened like [`DenseParams::flatten`].
    pub dense: Vec<f64>,
    pub support_loss: f64,
    pub query_loss: f64,
}

impl TaskGradient {
    pub fn is_finite(&self) -> bool {
        self.dense.iter().all(|v| v.is_finite())
            && self
                .embedding
                .iter()
                .all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        let dense: f64 = self.dense.iter().map(|v| v * v).sum();
        let emb: f64 = self
            .embedding
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum();
        (dense + emb).sqrt()
    }

    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm {
            let s = max_norm / norm;
            self.dense.iter_mut().for_each(|v| *v *= s);
            self.embedding
                .iter_mut()
                .flat_map(|(_, g)| g.iter_mut())
                .for_each(|v| *v *= s);
        }
    }
}

/// Query loss on the query view and its gradient with respect to the meta
/// leaves. Only rows of query ids receive an embedding gradient; support-only
/// rows drop their inner adaptation after the iteration.
pub fn meta_gradient(
    mut inner: InnerOutput,
    prefetch: &PrefetchResult,
    batch: &TaskBatch,
    spec: &ModelSpec,
) -> Result<TaskGradient, TrainError> {
    let (dim, dense_width) = inner.selectors_dim;
    let positions = prefetch.positions();
    let set = set_inputs(&batch.query, &positions, dense_width)?;
    let graph = &mut inner.graph;

    let support_ids: HashSet<FeatureId> = batch
        .support
        .iter()
        .flat_map(|s| s.feature_ids.iter().copied())
        .collect();
    let m = prefetch.ids.len();
    let mut mask = Tensor::zeros(m, dim);
    for (r, id) in prefetch.ids.iter().enumerate() {
        if support_ids.contains(id) {
            mask.data_mut()[r * dim..(r + 1) * dim].fill(1.0);
        }
    }
    let keep = mask.map(|v| 1.0 - v);
    let mask = graph.constant(mask);
    let keep = graph.constant(keep);
    let adapted_part = graph.mul(mask, inner.adapted_table)?;
    let stale_part = graph.mul(keep, inner.meta_table)?;
    let query_view = graph.add(adapted_part, stale_part)?;

    #[cfg(debug_assertions)]
    {
        let adapted_table = graph.value(inner.adapted_table);
        let adapted: HashMap<FeatureId, Vec<f64>> = support_ids
            .iter()
            .map(|id| (*id, adapted_table.row(positions[id]).to_vec()))
            .collect();
        let view = graph.value(query_view);
        for (id, row) in overlap_update(prefetch, &adapted, &batch.query) {
            let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            debug_assert_eq!(bits(view.row(positions[&id])), bits(&row));
        }
    }

    let sel = selectors(graph, dim, dense_width);
    let l = set_loss(graph, &set, query_view, &inner.adapted_dense, &sel, spec)?;
    let query_loss = graph.value(l).item()?;

    let mut wrt = vec![inner.meta_table];
    wrt.extend(inner.meta_dense.ids());
    let grads = graph.grad(l, &wrt, false)?;

    let table_grad = graph.value(grads[&inner.meta_table]);
    let query_ids = dedup_ids(
        batch
            .query
            .iter()
            .flat_map(|s| s.feature_ids.iter().copied()),
    );
    let mut query_ids_sorted = query_ids;
    query_ids_sorted.sort_by_key(|id| positions[id]);
    let embedding = query_ids_sorted
        .into_iter()
        .map(|id| (id, table_grad.row(positions[&id]).to_vec()))
        .collect();
    let mut dense = Vec::new();
    for id in inner.meta_dense.ids() {
        dense.extend_from_slice(graph.value(grads[&id]).data());
    }

    Ok(TaskGradient {
        embedding,
        dense,
        support_loss: inner.support_loss,
        query_loss,
    })
}

/// Inner adaptation plus outer gradient for one task, no communication.
pub fn task_meta_gradient(
    prefetch: &PrefetchResult,
    dense: &DenseParams,
    batch: &TaskBatch,
    spec: &ModelSpec,
    hyper: &HyperParams,
) -> Result<TaskGradient, TrainError> {
    let inner = inner_step(prefetch, dense, &batch.support, spec, hyper)?;
    let mut g = meta_gradient(inner, prefetch, batch, spec)?;
    if let Some(max) = spec.clip_grad_norm {
        g.clip(max);
    }
    Ok(g)
}

/// Applies this worker's task gradient: embedding rows go to their owners
/// via all-to-all and are applied there with step `beta`; dense gradients
/// are summed by ring all-reduce and every replica steps identically.
pub fn outer_step(
    comm: &mut Communicator,
    model: &mut MetaModel,
    grad: TaskGradient,
) -> Result<(), TrainError> {
    if !grad.is_finite() {
        return Err(TrainError::NonFinite {
            worker: comm.rank(),
            what: "outer",
        });
    }
    let n = comm.size();
    let map = model.shard.shard_map();
    let mut buckets: Vec<Vec<(u64, Vec<f64>)>> = vec![Vec::new(); n];
    for (id, g) in grad.embedding {
        buckets[map.owner(id)].push((id, g));
    }
    let received = comm.all_to_all(buckets)?;
    let merged: Vec<(u64, Vec<f64>)> = received.into_iter().flatten().collect();
    model
        .shard
        .apply_sparse_grads(&merged, model.hyper.beta)
        .map_err(routing)?;

    let summed = comm.ring_all_reduce(grad.dense)?;
    let beta = model.hyper.beta;
    let mut flat = model.dense.flatten();
    for (p, g) in flat.iter_mut().zip(&summed) {
        *p -= beta * g;
    }
    model.dense.assign_flat(&flat)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOutput {
    pub support_loss: f64,
    pub query_loss: f64,
    pub samples: usize,
    /// All-to-all calls spent on the embedding lookup.
    pub lookup_calls: u64,
}

/// Prefetch, inner step, overlap, outer step.
pub fn meta_iteration(
    comm: &mut Communicator,
    model: &mut MetaModel,
    batch: &TaskBatch,
    spec: &ModelSpec,
) -> Result<IterationOutput, TrainError> {
    let before = comm.stats().get(Primitive::AllToAll).calls;
    let prefetch = prefetch_embeddings(comm, batch, &mut model.shard)?;
    let lookup_calls = comm.stats().get(Primitive::AllToAll).calls - before;
    let grad = task_meta_gradient(&prefetch, &model.dense, batch, spec, &model.hyper)?;
    let out = IterationOutput {
        support_loss: grad.support_loss,
        query_loss: grad.query_loss,
        samples: batch.len(),
        lookup_calls,
    };
    outer_step(comm, model, grad)?;
    Ok(out)
}

//! Mixture of domain adapters: per-task bottleneck adapters routed by
//! cosine matching between a learned global query and per-task keys.
//!
//! Training alternates two phases per task: fit a fresh adapter on the
//! task's data with the mask loss (backbone frozen, earlier adapters
//! untouched), then replay the whole memory bank to pull the global tokens
//! and keys into a discriminative arrangement with the key-matching
//! cross-entropy. At inference the query picks the best key; when even the
//! best similarity falls below a threshold the input is treated as
//! out-of-distribution and the bare backbone answers instead.

use crate::autograd::{Adam, AdamParams, Graph, NodeId, Param};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{self, BackboneWeights, TokenSet};
use crate::rng;
use crate::taskgen::{self, Sample, TaskStream};

/// A residual bottleneck: `h + gelu(h·W_down)·W_up`, applied to the token
/// sequence after every encoder block. `W_up` starts at zero, so a fresh
/// adapter is exactly the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub task_id: usize,
    pub rank: usize,
    pub w_down: Param,
    pub w_up: Param,
}

impl Adapter {
    pub fn init(task_id: usize, embed_dim: usize, rank: usize, seed: u64) -> Self {
        assert!(rank < embed_dim, "adapter rank must stay below the embed dim");
        let mut r = rng::rng_for(seed, "adapter-init");
        let std = 1.0 / (embed_dim as f64).sqrt();
        Adapter {
            task_id,
            rank,
            w_down: Param::normal(&format!("adapter{task_id}.w_down"), &[embed_dim, rank], std, &mut r),
            w_up: Param::zeros(&format!("adapter{task_id}.w_up"), &[rank, embed_dim]),
        }
    }

    pub fn leaf(&self, g: &mut Graph, trainable: bool) -> AdapterNodes {
        AdapterNodes { w_down: g.param(&self.w_down, trainable), w_up: g.param(&self.w_up, trainable) }
    }
}

pub struct AdapterNodes {
    pub w_down: NodeId,
    pub w_up: NodeId,
}

/// The adapter transform on a `[T×C]` sequence.
pub fn adapter_forward(g: &mut Graph, h: NodeId, adapter: &AdapterNodes) -> Result<NodeId> {
    let down = g.matmul(h, adapter.w_down)?;
    let act = g.gelu(down);
    let up = g.matmul(act, adapter.w_up)?;
    Ok(g.add(h, up))
}

/// Keys and adapters, parallel by task index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterPool {
    pub keys: Vec<Param>,
    pub adapters: Vec<Adapter>,
}

impl AdapterPool {
    pub fn new() -> Self {
        AdapterPool::default()
    }

    pub fn task_count(&self) -> usize {
        debug_assert_eq!(self.keys.len(), self.adapters.len());
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Per-task exemplar store. Entries are immutable once inserted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    pub capacity: usize,
    tasks: Vec<Vec<Sample>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank { capacity, tasks: Vec::new() }
    }

    pub fn insert_task(&mut self, task_idx: usize, exemplars: Vec<Sample>) {
        assert_eq!(task_idx, self.tasks.len(), "tasks must be inserted in order");
        assert!(exemplars.len() <= self.capacity, "bank capacity exceeded");
        self.tasks.push(exemplars);
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_exemplars(&self, task_idx: usize) -> &[Sample] {
        &self.tasks[task_idx]
    }

    pub fn total(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    /// All `(task index, sample)` pairs in insertion order.
    pub fn entries(&self) -> Vec<(usize, &Sample)> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, xs)| xs.iter().map(move |s| (t, s)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Routing outcome: a task's adapter, or the bare backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Task(usize),
    Base,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub chosen: Route,
    pub similarities: Vec<f64>,
}

impl RoutingDecision {
    pub fn task(&self) -> Option<usize> {
        match self.chosen {
            Route::Task(t) => Some(t),
            Route::Base => None,
        }
    }
}

/// Plain-data cosine similarity; errors on a zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector { op: "cosine" });
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Cross-entropy over cosine similarities:
/// `−log exp(s_gt) / Σ_i exp(s_i)`, differentiable in `q` and every key.
pub fn key_match_loss(g: &mut Graph, q: NodeId, keys: &[NodeId], gt: usize) -> Result<NodeId> {
    if gt >= keys.len() {
        return Err(Error::TaskOutOfRange { got: gt, count: keys.len() });
    }
    let sims: Vec<NodeId> = keys
        .iter()
        .map(|&k| g.cosine(q, k))
        .collect::<Result<_>>()?;
    let stack = g.concat_rows(&sims);
    let lse = g.logsumexp(stack);
    let sgt = g.slice_rows(stack, gt, 1);
    Ok(g.sub(lse, sgt))
}

/// Argmax-by-cosine over the pool keys; below-threshold maxima fall back
/// to the bare backbone. Ties break toward the lowest task index.
pub fn select_adapter(q: &[f64], pool: &AdapterPool, tau: f64) -> Result<RoutingDecision> {
    assert!(!pool.is_empty(), "select_adapter: empty pool");
    let mut sims = Vec::with_capacity(pool.task_count());
    for k in &pool.keys {
        sims.push(cosine_similarity(q, &k.data)?);
    }
    let mut best = 0usize;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    let chosen = if sims[best] >= tau { Route::Task(best) } else { Route::Base };
    Ok(RoutingDecision { chosen, similarities: sims })
}

/// Hyperparameters for the routed-adapter method.
#[derive(Clone, Copy, Debug)]
pub struct ModaConfig {
    pub n_assistant: usize,
    pub adapter_rank: usize,
    pub bank_capacity: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ModaConfig {
    fn default() -> Self {
        ModaConfig {
            n_assistant: 10,
            adapter_rank: 8,
            bank_capacity: 10,
            epochs: 24,
            lr: 1e-3,
            batch: 4,
            seed: 1,
        }
    }
}

/// Everything the method learns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModaState {
    pub pool: AdapterPool,
    pub tokens: TokenSet,
    pub bank: MemoryBank,
}

/// Loss bookkeeping per task, for logs and the monotonicity checks.
#[derive(Clone, Copy, Debug)]
pub struct TaskLog {
    pub task: usize,
    pub adapter_first_loss: f64,
    pub adapter_last_loss: f64,
    pub query_first_loss: f64,
    pub query_last_loss: f64,
}

/// Phase markers handed to the training observer, in per-task order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AdapterTrained,
    ExemplarsSelected,
    TokensTrained,
    TaskDone,
}

/// Mask logits with an optional forced adapter (no routing).
pub fn predict_logits(
    bw: &BackboneWeights,
    adapter: Option<&Adapter>,
    image: &[f64],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let patches = model::patch_embed(&mut g, &nodes, image, &bw.cfg)?;
    let logits = match adapter {
        Some(a) => {
            let an = a.leaf(&mut g, false);
            let hook = |g: &mut Graph, x: NodeId| adapter_forward(g, x, &an);
            let (_, feats) = model::encode(&mut g, &nodes, patches, Some(&hook), &bw.cfg)?;
            model::decode(&mut g, &nodes, feats, &bw.cfg)?
        }
        None => {
            let (_, feats) = model::encode(&mut g, &nodes, patches, None, &bw.cfg)?;
            model::decode(&mut g, &nodes, feats, &bw.cfg)?
        }
    };
    Ok(g.data(logits).to_vec())
}

/// The routing query for one image (forward only).
pub fn compute_query(bw: &BackboneWeights, tokens: &TokenSet, image: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let tf = g.param(&tokens.t_f, false);
    let ta = g.param(&tokens.t_a, false);
    let q = model::extract_query(&mut g, &nodes, tf, ta, image, &bw.cfg)?;
    Ok(g.data(q).to_vec())
}

/// Fit a fresh adapter on one task with the mask loss. Returns the adapter
/// plus first/last epoch mean losses.
pub fn train_task_adapter(
    bw: &BackboneWeights,
    data: &[Sample],
    cfg: &ModaConfig,
    task_id: usize,
) -> Result<(Adapter, f64, f64)> {
    assert!(bw.frozen, "backbone must be frozen before adapter training");
    let mut adapter = Adapter::init(
        task_id,
        bw.cfg.embed_dim,
        cfg.adapter_rank,
        rng::subseed(cfg.seed, &format!("adapter{task_id}")),
    );
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr), &[&adapter.w_down, &adapter.w_up]);
    let mut first = 0.0;
    let mut last = 0.0;
    for epoch in 0..cfg.epochs {
        let mut shuffle =
            rng::rng_for(cfg.seed, &format!("adapter{task_id}.epoch{epoch}"));
        let order = rng::shuffled_indices(&mut shuffle, data.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let snapshot = &adapter;
            let (loss, grads) = model::batch_grads(&batch, |s| {
                let mut g = Graph::new();
                let nodes = bw.leaf(&mut g, false);
                let an = snapshot.leaf(&mut g, true);
                let patches = model::patch_embed(&mut g, &nodes, &s.image, &bw.cfg)?;
                let hook = |g: &mut Graph, x: NodeId| adapter_forward(g, x, &an);
                let (_, feats) = model::encode(&mut g, &nodes, patches, Some(&hook), &bw.cfg)?;
                let logits = model::decode(&mut g, &nodes, feats, &bw.cfg)?;
                let target = s.mask.to_f64();
                let loss = losses::mask_loss(&mut g, logits, &target)?;
                g.backward(loss)?;
                Ok((
                    g.value(loss),
                    vec![
                        g.grad(an.w_down).expect("w_down grad").to_vec(),
                        g.grad(an.w_up).expect("w_up grad").to_vec(),
                    ],
                ))
            })?;
            adam.step(&mut [&mut adapter.w_down, &mut adapter.w_up], &grads);
            epoch_loss += loss;
            batches += 1.0;
        }
        let mean = epoch_loss / batches;
        if epoch == 0 {
            first = mean;
        }
        last = mean;
    }
    Ok((adapter, first, last))
}

/// Replay the full memory bank, updating only the global tokens and keys
/// with the key-matching loss. Returns first/last epoch mean losses.
pub fn train_query_tokens(
    bw: &BackboneWeights,
    tokens: &mut TokenSet,
    keys: &mut [Param],
    bank: &MemoryBank,
    cfg: &ModaConfig,
    task_idx: usize,
) -> Result<(f64, f64)> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("memory bank"));
    }
    let entries = bank.entries();
    let mut param_refs: Vec<&Param> = vec![&tokens.t_f, &tokens.t_a];
    param_refs.extend(keys.iter());
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr), &param_refs);

    let mut first = 0.0;
    let mut last = 0.0;
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::rng_for(cfg.seed, &format!("tokens{task_idx}.epoch{epoch}"));
        let order = rng::shuffled_indices(&mut shuffle, entries.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(usize, &Sample)> = chunk.iter().map(|&i| entries[i]).collect();
            let tokens_snap = &*tokens;
            let keys_snap = &*keys;
            let (loss, grads) = model::batch_grads(&batch, |(gt, s)| {
                let mut g = Graph::new();
                let nodes = bw.leaf(&mut g, false);
                let tf = g.param(&tokens_snap.t_f, true);
                let ta = g.param(&tokens_snap.t_a, true);
                let key_ids: Vec<NodeId> =
                    keys_snap.iter().map(|k| g.param(k, true)).collect();
                let q = model::extract_query(&mut g, &nodes, tf, ta, &s.image, &bw.cfg)?;
                let loss = key_match_loss(&mut g, q, &key_ids, *gt)?;
                g.backward(loss)?;
                let mut grads = vec![
                    g.grad(tf).expect("t_f grad").to_vec(),
                    g.grad(ta).expect("t_a grad").to_vec(),
                ];
                for id in key_ids {
                    grads.push(g.grad(id).expect("key grad").to_vec());
                }
                Ok((g.value(loss), grads))
            })?;
            let mut refs: Vec<&mut Param> = vec![&mut tokens.t_f, &mut tokens.t_a];
            refs.extend(keys.iter_mut());
            adam.step(&mut refs, &grads);
            epoch_loss += loss;
            batches += 1.0;
        }
        let mean = epoch_loss / batches;
        if epoch == 0 {
            first = mean;
        }
        last = mean;
    }
    Ok((first, last))
}

/// The full sequential procedure: per task, adapter fit → exemplar
/// selection → token/key replay. The observer fires after each phase with
/// a view of the whole state (the harness uses `TaskDone` to evaluate).
pub fn moda_train_observed<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &ModaConfig,
    mut observer: F,
) -> Result<(ModaState, Vec<TaskLog>)>
where
    F: FnMut(Phase, usize, &ModaState) -> Result<()>,
{
    assert!(bw.frozen, "backbone must be frozen");
    let mut state = ModaState {
        pool: AdapterPool::new(),
        tokens: TokenSet::init(
            bw.cfg.embed_dim,
            cfg.n_assistant,
            rng::subseed(cfg.seed, "tokens-init"),
        ),
        bank: MemoryBank::new(cfg.bank_capacity),
    };
    let mut logs = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        let key = Param::unit_norm(
            &format!("pool.key{t}"),
            bw.cfg.embed_dim,
            &mut rng::rng_for(cfg.seed, &format!("key{t}")),
        );
        let (adapter, a_first, a_last) = train_task_adapter(bw, &task.train, cfg, t)?;
        state.pool.keys.push(key);
        state.pool.adapters.push(adapter);
        observer(Phase::AdapterTrained, t, &state)?;

        let exemplars = taskgen::select_exemplars(
            &task.train,
            cfg.bank_capacity.min(task.train.len()),
            rng::subseed(cfg.seed, &format!("exemplars{t}")),
        )?;
        state.bank.insert_task(t, exemplars);
        observer(Phase::ExemplarsSelected, t, &state)?;

        let (q_first, q_last) = train_query_tokens(
            bw,
            &mut state.tokens,
            &mut state.pool.keys,
            &state.bank,
            cfg,
            t,
        )?;
        observer(Phase::TokensTrained, t, &state)?;

        logs.push(TaskLog {
            task: t,
            adapter_first_loss: a_first,
            adapter_last_loss: a_last,
            query_first_loss: q_first,
            query_last_loss: q_last,
        });
        observer(Phase::TaskDone, t, &state)?;
    }
    Ok((state, logs))
}

/// [`moda_train_observed`] without an observer.
pub fn moda_train(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &ModaConfig,
) -> Result<(ModaState, Vec<TaskLog>)> {
    moda_train_observed(bw, stream, cfg, |_, _, _| Ok(()))
}

/// Route, then decode: the chosen task's adapter, or the bare backbone
/// when the best similarity stays below `tau`.
pub fn moda_infer(
    bw: &BackboneWeights,
    state: &ModaState,
    image: &[f64],
    tau: f64,
) -> Result<(Vec<f64>, RoutingDecision)> {
    let q = compute_query(bw, &state.tokens, image)?;
    let decision = select_adapter(&q, &state.pool, tau)?;
    let adapter = decision.task().map(|t| &state.pool.adapters[t]);
    let logits = predict_logits(bw, adapter, image)?;
    Ok((logits, decision))
}

/// Threshold calibration: the `percentile` quantile (nearest-rank, lower)
/// of each bank exemplar's similarity to its own task key.
pub fn calibrate_tau(
    bw: &BackboneWeights,
    state: &ModaState,
    percentile: f64,
) -> Result<f64> {
    if state.bank.is_empty() {
        return Err(Error::EmptyInput("memory bank"));
    }
    let mut sims = Vec::with_capacity(state.bank.total());
    for (t, s) in state.bank.entries() {
        let q = compute_query(bw, &state.tokens, &s.image)?;
        sims.push(cosine_similarity(&q, &state.pool.keys[t].data)?);
    }
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sims.len() - 1) as f64 * percentile).floor() as usize;
    Ok(sims[idx])
}

/// Default calibration percentile for the out-of-distribution threshold.
pub const TAU_PERCENTILE: f64 = 0.05;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn unit_key(name: &str, dim: usize, axis: usize) -> Param {
        let mut p = Param::zeros(name, &[1, dim]);
        p.data[axis] = 1.0;
        p
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let a = Adapter::init(0, 16, 4, 9);
        let mut g = Graph::new();
        let mut data = vec![0.0; 3 * 16];
        rng::fill_normal(&mut rng::rng_for(1, "h"), &mut data, 1.0);
        let h = g.constant(data.clone(), &[3, 16]);
        let an = a.leaf(&mut g, false);
        let out = adapter_forward(&mut g, h, &an).unwrap();
        assert_eq!(g.data(out), data.as_slice());
    }

    #[test]
    fn adapter_zero_input_stays_zero() {
        let mut a = Adapter::init(0, 8, 2, 9);
        // give w_up some weight so the branch is live
        for v in a.w_up.data.iter_mut() {
            *v = 0.3;
        }
        let mut g = Graph::new();
        let h = g.constant(vec![0.0; 2 * 8], &[2, 8]);
        let an = a.leaf(&mut g, false);
        let out = adapter_forward(&mut g, h, &an).unwrap();
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_branch_has_rank_at_most_r() {
        let mut r = rng::rng_for(33, "rank");
        let mut a = Adapter::init(0, 16, 3, 5);
        rng::fill_normal(&mut r, &mut a.w_up.data, 0.5);
        let mut data = vec![0.0; 16 * 16];
        rng::fill_normal(&mut r, &mut data, 1.0);
        let mut g = Graph::new();
        let h = g.constant(data.clone(), &[16, 16]);
        let an = a.leaf(&mut g, false);
        let out = adapter_forward(&mut g, h, &an).unwrap();
        // branch = out − h
        let branch: Vec<f64> = g
            .data(out)
            .iter()
            .zip(data.iter())
            .map(|(o, h)| o - h)
            .collect();
        // numerical row rank by modified Gram-Schmidt
        let mut rows: Vec<Vec<f64>> = (0..16).map(|i| branch[i * 16..(i + 1) * 16].to_vec()).collect();
        let mut rank = 0;
        for i in 0..rows.len() {
            let (head, tail) = rows.split_at_mut(i + 1);
            let row = &head[i];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            rank += 1;
            let unit: Vec<f64> = row.iter().map(|v| v / norm).collect();
            for other in tail.iter_mut() {
                let dot: f64 = other.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
                for (o, u) in other.iter_mut().zip(unit.iter()) {
                    *o -= dot * u;
                }
            }
        }
        assert!(rank <= 3, "branch rank {rank} exceeds bottleneck 3");
    }

    #[test]
    fn cosine_similarity_hand_values() {
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[2.0, -1.0], &[2.0, -1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn key_match_loss_single_key_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(vec![0.3, -0.8], &[1, 2]);
        let k = g.constant(vec![1.0, 2.0], &[1, 2]);
        let l = key_match_loss(&mut g, q, &[k], 0).unwrap();
        assert!(g.value(l).abs() < 1e-15);
    }

    #[test]
    fn key_match_loss_closed_forms() {
        // s_gt = 1 vs one other key at s = 0 → ln(1 + e^{-1})
        let mut g = Graph::new();
        let q = g.constant(vec![1.0, 0.0], &[1, 2]);
        let k_same = g.constant(vec![2.0, 0.0], &[1, 2]);
        let k_orth = g.constant(vec![0.0, 5.0], &[1, 2]);
        let l = key_match_loss(&mut g, q, &[k_same, k_orth], 0).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((g.value(l) - expected).abs() < 1e-12, "{} vs {expected}", g.value(l));
        assert!((expected - 0.3133).abs() < 1e-4);

        // four identical similarities → ln 4
        let mut g2 = Graph::new();
        let q2 = g2.constant(vec![1.0, 1.0], &[1, 2]);
        let ks: Vec<NodeId> = (0..4).map(|_| g2.constant(vec![1.0, 1.0], &[1, 2])).collect();
        let l2 = key_match_loss(&mut g2, q2, &ks, 2).unwrap();
        assert!((g2.value(l2) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn key_match_loss_rejects_out_of_range_task() {
        let mut g = Graph::new();
        let q = g.constant(vec![1.0], &[1, 1]);
        let k = g.constant(vec![1.0], &[1, 1]);
        assert_eq!(
            key_match_loss(&mut g, q, &[k], 1).unwrap_err(),
            Error::TaskOutOfRange { got: 1, count: 1 }
        );
    }

    #[test]
    fn key_match_loss_gradients_pass_finite_diff() {
        let mut r = rng::rng_for(41, "kml-fd");
        let q = Param::normal("q", &[1, 6], 1.0, &mut r);
        let k1 = Param::normal("k1", &[1, 6], 1.0, &mut r);
        let k2 = Param::normal("k2", &[1, 6], 1.0, &mut r);
        let err = crate::autograd::finite_diff_check(&[q, k1, k2], 1e-5, |g, ids| {
            key_match_loss(g, ids[0], &ids[1..], 1)
        })
        .unwrap();
        assert!(err < 1e-7, "key match fd {err}");
    }

    fn three_key_pool(dim: usize) -> AdapterPool {
        let mut pool = AdapterPool::new();
        for i in 0..3 {
            pool.keys.push(unit_key(&format!("k{i}"), dim, i));
            pool.adapters.push(Adapter::init(i, dim, 2, i as u64));
        }
        pool
    }

    #[test]
    fn select_adapter_picks_exact_match() {
        let pool = three_key_pool(4);
        let q = vec![0.0, 2.0, 0.0, 0.0]; // aligned with key 1
        let d = select_adapter(&q, &pool, 0.5).unwrap();
        assert_eq!(d.chosen, Route::Task(1));
        assert!((d.similarities[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_adapter_below_threshold_goes_base() {
        let pool = three_key_pool(4);
        let q = vec![0.5, 0.5, 0.5, 0.5]; // cos = 0.5 to each axis key
        let d = select_adapter(&q, &pool, 0.9).unwrap();
        assert_eq!(d.chosen, Route::Base);
        assert_eq!(d.task(), None);
    }

    #[test]
    fn select_adapter_scale_invariant_and_tau_neg_one_never_base() {
        let pool = three_key_pool(4);
        let q = vec![0.1, 0.7, 0.2, 0.0];
        let a = select_adapter(&q, &pool, 0.3).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        let b = select_adapter(&scaled, &pool, 0.3).unwrap();
        assert_eq!(a.chosen, b.chosen);

        let far = vec![-1.0, -1.0, -1.0, -1.0];
        let c = select_adapter(&far, &pool, -1.0).unwrap();
        assert!(matches!(c.chosen, Route::Task(_)));
    }

    #[test]
    fn select_adapter_breaks_ties_toward_lowest_task() {
        let mut pool = AdapterPool::new();
        pool.keys.push(unit_key("k0", 2, 0));
        pool.keys.push(unit_key("k1", 2, 0)); // identical key
        pool.adapters.push(Adapter::init(0, 2, 1, 0));
        pool.adapters.push(Adapter::init(1, 2, 1, 1));
        let d = select_adapter(&[1.0, 0.0], &pool, 0.0).unwrap();
        assert_eq!(d.chosen, Route::Task(0));
    }

    #[test]
    fn bank_enforces_order_and_capacity() {
        let mut bank = MemoryBank::new(2);
        assert!(bank.is_empty());
        bank.insert_task(0, vec![]);
        assert_eq!(bank.task_count(), 1);
        assert_eq!(bank.total(), 0);
    }

    #[test]
    fn tiny_end_to_end_routing_is_consistent_with_forced_adapter() {
        // one-task system: routing must reproduce the forced-adapter mask
        let cfg = EncoderConfig::tiny();
        let mut bw = BackboneWeights::init(&cfg).unwrap();
        bw.frozen = true;
        let mcfg = ModaConfig {
            epochs: 1,
            n_assistant: 2,
            adapter_rank: 2,
            bank_capacity: 2,
            batch: 2,
            ..Default::default()
        };
        // tiny 16x16 synthetic data: bright square on dark background
        let mut samples = Vec::new();
        for i in 0..4 {
            let mut img = vec![0.1; 16 * 16];
            let mut mask = crate::metrics::Mask::new(16, 16);
            for y in 4 + i..8 + i {
                for x in 4..8 {
                    img[y * 16 + x] = 0.9;
                    mask.set(x, y, true);
                }
            }
            samples.push(Sample { image: img, mask, domain: 1 });
        }
        let stream = TaskStream {
            tasks: vec![crate::taskgen::Task {
                spec: crate::taskgen::DomainSpec {
                    family: crate::taskgen::Family::Ellipse,
                    seed: 0,
                    train_count: 3,
                    test_count: 1,
                },
                train: samples[0..3].to_vec(),
                test: samples[3..].to_vec(),
            }],
        };
        let (state, logs) = moda_train(&bw, &stream, &mcfg).unwrap();
        assert_eq!(state.pool.task_count(), 1);
        assert_eq!(logs.len(), 1);
        // single-task key loss is identically zero and tokens keep their init
        assert_eq!(logs[0].query_first_loss, 0.0);
        assert_eq!(logs[0].query_last_loss, 0.0);
        let fresh = TokenSet::init(
            bw.cfg.embed_dim,
            mcfg.n_assistant,
            rng::subseed(mcfg.seed, "tokens-init"),
        );
        assert_eq!(state.tokens, fresh);

        let img = &stream.tasks[0].test[0].image;
        let (routed, decision) = moda_infer(&bw, &state, img, -1.0).unwrap();
        assert_eq!(decision.chosen, Route::Task(0));
        let forced = predict_logits(&bw, Some(&state.pool.adapters[0]), img).unwrap();
        assert_eq!(routed, forced);
    }
}

//! The comparison methods: naive sequential tuning, the classic continual
//! learners (LwF, EWC, ER) fine-tuning a single shared adapter, and the
//! prompt-pool family (L2P, DualPrompt, CodaPrompt).
//!
//! The sequential methods share seed tags and batch order, so LwF at γ=0
//! and EWC at β=0 reproduce the naive run bit for bit. Prompt methods
//! query with the spatial mean of the promptless patch features, and the
//! decoder always consumes exactly the patch rows — prompt tokens act only
//! through attention inside the encoder.

use crate::autograd::{adam_step, Adam, AdamParams, AdamState, Graph, NodeId, Param};
use crate::error::Result;
use crate::losses;
use crate::model::{self, BackboneWeights};
use crate::moda::{adapter_forward, Adapter};
use crate::rng;
use crate::taskgen::{self, Sample, TaskStream};

/// Shared hyperparameters for every baseline.
#[derive(Clone, Copy, Debug)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub adapter_rank: usize,
    /// ER exemplars per task.
    pub bank_capacity: usize,
    /// LwF distillation weight.
    pub lwf_gamma: f64,
    /// EWC anchor penalty weight.
    pub ewc_beta: f64,
    /// Prompt token rows per pool entry.
    pub prompt_len: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 24,
            lr: 1e-3,
            batch: 4,
            seed: 1,
            adapter_rank: 8,
            bank_capacity: 10,
            lwf_gamma: 1.0,
            ewc_beta: 10.0,
            prompt_len: 4,
        }
    }
}

// ── Sequential single-adapter methods ────────────────────────────────

enum Regularizer {
    None,
    /// Frozen copy of the previous task's adapter.
    Distill { teacher: Adapter, gamma: f64 },
    /// Anchor and Fisher diagonal from the previous task.
    Anchor { anchor: Vec<Param>, fisher: Vec<Param>, beta: f64 },
}

/// One task's worth of updates on the shared adapter. `extra` is the
/// per-sample training pool beyond the task data (ER's replay buffer).
fn train_adapter_on(
    bw: &BackboneWeights,
    adapter: &mut Adapter,
    data: &[&Sample],
    reg: &Regularizer,
    cfg: &BaselineConfig,
    task_idx: usize,
) -> Result<()> {
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr), &[&adapter.w_down, &adapter.w_up]);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::rng_for(cfg.seed, &format!("seq.task{task_idx}.epoch{epoch}"));
        let order = rng::shuffled_indices(&mut shuffle, data.len());
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| data[i]).collect();
            let snapshot = &*adapter;
            let (_, grads) = model::batch_grads(&batch, |s| {
                // Teacher logits come from an independent frozen pass.
                let teacher_logits = match reg {
                    Regularizer::Distill { teacher, gamma } if *gamma > 0.0 => {
                        Some(crate::moda::predict_logits(bw, Some(teacher), &s.image)?)
                    }
                    _ => None,
                };
                let mut g = Graph::new();
                let nodes = bw.leaf(&mut g, false);
                let an = snapshot.leaf(&mut g, true);
                let patches = model::patch_embed(&mut g, &nodes, &s.image, &bw.cfg)?;
                let hook = |g: &mut Graph, x: NodeId| adapter_forward(g, x, &an);
                let (_, feats) = model::encode(&mut g, &nodes, patches, Some(&hook), &bw.cfg)?;
                let logits = model::decode(&mut g, &nodes, feats, &bw.cfg)?;
                let target = s.mask.to_f64();
                let mut loss = losses::mask_loss(&mut g, logits, &target)?;
                match reg {
                    Regularizer::None => {}
                    Regularizer::Distill { gamma, .. } => {
                        if let Some(tl) = &teacher_logits {
                            let d = losses::distill_loss(&mut g, logits, tl)?;
                            let d = g.scale(d, *gamma);
                            loss = g.add(loss, d);
                        }
                    }
                    Regularizer::Anchor { anchor, fisher, beta } => {
                        if *beta > 0.0 {
                            let current = vec![
                                (snapshot.w_down.name.clone(), an.w_down),
                                (snapshot.w_up.name.clone(), an.w_up),
                            ];
                            let pen =
                                losses::ewc_penalty(&mut g, &current, anchor, fisher, *beta)?;
                            loss = g.add(loss, pen);
                        }
                    }
                }
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
        }
    }
    Ok(())
}

fn init_sequential_adapter(bw: &BackboneWeights, cfg: &BaselineConfig) -> Adapter {
    Adapter::init(0, bw.cfg.embed_dim, cfg.adapter_rank, rng::subseed(cfg.seed, "seq-adapter"))
}

/// One adapter fine-tuned straight through the stream with the mask loss
/// only.
pub fn naive_sequential<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    mut after_task: F,
) -> Result<Adapter>
where
    F: FnMut(usize, &Adapter) -> Result<()>,
{
    let mut adapter = init_sequential_adapter(bw, cfg);
    for (t, task) in stream.tasks.iter().enumerate() {
        let data: Vec<&Sample> = task.train.iter().collect();
        train_adapter_on(bw, &mut adapter, &data, &Regularizer::None, cfg, t)?;
        after_task(t, &adapter)?;
    }
    Ok(adapter)
}

/// Continue fine-tuning, but distill the previous task's adapter into the
/// current one: from the second task on, the frozen pre-task copy acts as
/// teacher and its soft masks join the loss with weight γ.
pub fn lwf_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    mut after_task: F,
) -> Result<Adapter>
where
    F: FnMut(usize, &Adapter) -> Result<()>,
{
    assert!(cfg.lwf_gamma >= 0.0, "distillation weight must be nonnegative");
    let mut adapter = init_sequential_adapter(bw, cfg);
    for (t, task) in stream.tasks.iter().enumerate() {
        let reg = if t > 0 && cfg.lwf_gamma > 0.0 {
            Regularizer::Distill { teacher: adapter.clone(), gamma: cfg.lwf_gamma }
        } else {
            Regularizer::None
        };
        let data: Vec<&Sample> = task.train.iter().collect();
        train_adapter_on(bw, &mut adapter, &data, &reg, cfg, t)?;
        after_task(t, &adapter)?;
    }
    Ok(adapter)
}

/// Empirical diagonal Fisher: mean squared mask-loss gradient per adapter
/// parameter over the given samples.
pub fn fisher_diagonal(
    bw: &BackboneWeights,
    adapter: &Adapter,
    data: &[Sample],
) -> Result<Vec<Param>> {
    let refs: Vec<&Sample> = data.iter().collect();
    let (_, sq) = model::batch_grads(&refs, |s| {
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let an = adapter.leaf(&mut g, true);
        let patches = model::patch_embed(&mut g, &nodes, &s.image, &bw.cfg)?;
        let hook = |g: &mut Graph, x: NodeId| adapter_forward(g, x, &an);
        let (_, feats) = model::encode(&mut g, &nodes, patches, Some(&hook), &bw.cfg)?;
        let logits = model::decode(&mut g, &nodes, feats, &bw.cfg)?;
        let target = s.mask.to_f64();
        let loss = losses::mask_loss(&mut g, logits, &target)?;
        g.backward(loss)?;
        let square = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<f64>>();
        Ok((
            g.value(loss),
            vec![
                square(g.grad(an.w_down).expect("w_down grad")),
                square(g.grad(an.w_up).expect("w_up grad")),
            ],
        ))
    })?;
    Ok(vec![
        Param { name: adapter.w_down.name.clone(), shape: adapter.w_down.shape.clone(), data: sq[0].clone() },
        Param { name: adapter.w_up.name.clone(), shape: adapter.w_up.shape.clone(), data: sq[1].clone() },
    ])
}

/// Fine-tuning with a quadratic pull toward the previous task's weights,
/// weighted by that task's Fisher diagonal.
pub fn ewc_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    mut after_task: F,
) -> Result<Adapter>
where
    F: FnMut(usize, &Adapter) -> Result<()>,
{
    assert!(cfg.ewc_beta >= 0.0, "anchor weight must be nonnegative");
    let mut adapter = init_sequential_adapter(bw, cfg);
    let mut previous: Option<(Vec<Param>, Vec<Param>)> = None;
    for (t, task) in stream.tasks.iter().enumerate() {
        let reg = match (&previous, cfg.ewc_beta > 0.0) {
            (Some((anchor, fisher)), true) => Regularizer::Anchor {
                anchor: anchor.clone(),
                fisher: fisher.clone(),
                beta: cfg.ewc_beta,
            },
            _ => Regularizer::None,
        };
        let data: Vec<&Sample> = task.train.iter().collect();
        train_adapter_on(bw, &mut adapter, &data, &reg, cfg, t)?;
        if cfg.ewc_beta > 0.0 {
            let fisher = fisher_diagonal(bw, &adapter, &task.train)?;
            let anchor = vec![adapter.w_down.clone(), adapter.w_up.clone()];
            previous = Some((anchor, fisher));
        }
        after_task(t, &adapter)?;
    }
    Ok(adapter)
}

/// Experience replay: each task trains on its own data joined with every
/// banked exemplar; the bank grows by `bank_capacity` samples per task.
pub fn er_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    mut after_task: F,
) -> Result<(Adapter, Vec<Sample>)>
where
    F: FnMut(usize, &Adapter) -> Result<()>,
{
    let mut adapter = init_sequential_adapter(bw, cfg);
    let mut bank: Vec<Sample> = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        let mut data: Vec<&Sample> = task.train.iter().collect();
        data.extend(bank.iter());
        train_adapter_on(bw, &mut adapter, &data, &Regularizer::None, cfg, t)?;
        let picked = taskgen::select_exemplars(
            &task.train,
            cfg.bank_capacity.min(task.train.len()),
            rng::subseed(cfg.seed, &format!("er-exemplars{t}")),
        )?;
        bank.extend(picked);
        after_task(t, &adapter)?;
    }
    Ok((adapter, bank))
}

// ── Prompt-pool methods ──────────────────────────────────────────────

/// How a value token is chosen at the decoding pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Nearest key by MSE picks one value token.
    Hard,
    /// Hard expert selection plus an always-on general prompt.
    Dual,
    /// Softmax-weighted blend of every value token.
    Soft,
}

/// Key/value token pairs, plus the general prompt for the dual mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    pub keys: Vec<Param>,
    pub values: Vec<Param>,
    pub general: Option<Param>,
    pub mode: SelectionMode,
    pub prompt_len: usize,
}

impl PromptPool {
    pub fn init(
        mode: SelectionMode,
        pool_size: usize,
        prompt_len: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let mut keys = Vec::with_capacity(pool_size);
        let mut values = Vec::with_capacity(pool_size);
        for i in 0..pool_size {
            keys.push(Param::unit_norm(
                &format!("prompt.key{i}"),
                embed_dim,
                &mut rng::rng_for(seed, &format!("prompt-key{i}")),
            ));
            values.push(Param::normal(
                &format!("prompt.value{i}"),
                &[prompt_len, embed_dim],
                0.02,
                &mut rng::rng_for(seed, &format!("prompt-value{i}")),
            ));
        }
        let general = (mode == SelectionMode::Dual).then(|| {
            Param::normal(
                "prompt.general",
                &[prompt_len, embed_dim],
                0.02,
                &mut rng::rng_for(seed, "prompt-general"),
            )
        });
        PromptPool { keys, values, general, mode, prompt_len }
    }

    pub fn len(&self) -> usize {
        debug_assert_eq!(self.keys.len(), self.values.len());
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Index of the key nearest to `z` by MSE.
pub fn match_key(pool: &PromptPool, z: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..pool.len() {
        if mse(&pool.keys[i].data, z) < mse(&pool.keys[best].data, z) {
            best = i;
        }
    }
    best
}

/// Where prompts enter the encoder: block 0 for the hard/soft modes; for
/// the dual mode the general prompt enters at block 0 and the expert token
/// halfway up the stack.
fn expert_block(bw: &BackboneWeights, mode: SelectionMode) -> usize {
    match mode {
        SelectionMode::Dual => bw.cfg.depth / 2,
        _ => 0,
    }
}

/// MSE node pulling `key` toward the constant query `z`.
fn key_pull_loss(g: &mut Graph, key: NodeId, z: &[f64]) -> Result<NodeId> {
    let shape = g.shape(key).to_vec();
    let zc = g.constant(z.to_vec(), &shape);
    let d = g.sub(key, zc);
    let sq = g.mul(d, d);
    Ok(g.mean(sq))
}

/// Per-epoch log of the key-matching objective.
#[derive(Clone, Copy, Debug)]
pub struct PromptTaskLog {
    pub task: usize,
    pub first_key_mse: f64,
    pub last_key_mse: f64,
}

/// Skip Adam updates for parameters whose batch gradient is identically
/// zero — unmatched pool entries must not move.
fn step_matched(
    params: &mut [&mut Param],
    grads: &[Vec<f64>],
    states: &mut [AdamState],
    hp: &AdamParams,
) {
    for ((p, g), s) in params.iter_mut().zip(grads.iter()).zip(states.iter_mut()) {
        if g.iter().any(|&v| v != 0.0) {
            adam_step(&mut p.data, g, s, hp);
        }
    }
}

fn prompt_pool_train(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    mode: SelectionMode,
    mut after_task: impl FnMut(usize, &PromptPool) -> Result<()>,
) -> Result<(PromptPool, Vec<PromptTaskLog>)> {
    let mut pool = PromptPool::init(
        mode,
        stream.len(),
        cfg.prompt_len,
        bw.cfg.embed_dim,
        cfg.seed,
    );
    let hp = AdamParams::with_lr(cfg.lr);
    let mut logs = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        // param order: keys, values, then the general prompt if present
        let mut states: Vec<AdamState> = pool
            .keys
            .iter()
            .chain(pool.values.iter())
            .chain(pool.general.iter())
            .map(|p| AdamState::new(p.numel()))
            .collect();
        let mut first_mse = 0.0;
        let mut last_mse = 0.0;
        for epoch in 0..cfg.epochs {
            let mut shuffle =
                rng::rng_for(cfg.seed, &format!("prompt.task{t}.epoch{epoch}"));
            let order = rng::shuffled_indices(&mut shuffle, task.train.len());
            let mut epoch_mse = 0.0;
            let mut samples_seen = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
                let pool_snap = &pool;
                let (_, grads) = model::batch_grads(&batch, |s| {
                    prompt_sample_grads(bw, pool_snap, s, mode)
                })?;
                let mut refs: Vec<&mut Param> = pool
                    .keys
                    .iter_mut()
                    .chain(pool.values.iter_mut())
                    .chain(pool.general.iter_mut())
                    .collect();
                step_matched(&mut refs, &grads, &mut states, &hp);
                // track the matching objective on this batch (post-step
                // would double the forward cost; pre-step is fine for the
                // trend)
                if mode != SelectionMode::Soft {
                    for s in &batch {
                        let z = model::mean_patch_feature(bw, &s.image)?;
                        let id = match_key(&pool, &z);
                        epoch_mse += mse(&pool.keys[id].data, &z);
                        samples_seen += 1.0;
                    }
                }
            }
            let mean_mse = if samples_seen > 0.0 { epoch_mse / samples_seen } else { 0.0 };
            if epoch == 0 {
                first_mse = mean_mse;
            }
            last_mse = mean_mse;
        }
        logs.push(PromptTaskLog { task: t, first_key_mse: first_mse, last_key_mse: last_mse });
        after_task(t, &pool)?;
    }
    Ok((pool, logs))
}

/// One sample's gradients for every pool parameter (zeros for unmatched
/// entries), in the `keys..values..general` order.
fn prompt_sample_grads(
    bw: &BackboneWeights,
    pool: &PromptPool,
    s: &Sample,
    mode: SelectionMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let z = model::mean_patch_feature(bw, &s.image)?;
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let patches = model::patch_embed(&mut g, &nodes, &s.image, &bw.cfg)?;
    let target = s.mask.to_f64();

    let n = pool.len();
    let mut grads: Vec<Vec<f64>> = pool
        .keys
        .iter()
        .chain(pool.values.iter())
        .chain(pool.general.iter())
        .map(|p| vec![0.0; p.numel()])
        .collect();

    let loss_value = match mode {
        SelectionMode::Hard | SelectionMode::Dual => {
            let id = match_key(pool, &z);
            let key = g.param(&pool.keys[id], true);
            let value = g.param(&pool.values[id], true);
            let mut inserts = vec![(expert_block(bw, mode), value)];
            let general = pool.general.as_ref().map(|gp| g.param(gp, true));
            if let Some(gen) = general {
                inserts.insert(0, (0, gen));
            }
            let (_, feats) = model::encode_with(&mut g, &nodes, patches, &inserts, None, &bw.cfg)?;
            let logits = model::decode(&mut g, &nodes, feats, &bw.cfg)?;
            let mask = losses::mask_loss(&mut g, logits, &target)?;
            let pull = key_pull_loss(&mut g, key, &z)?;
            let loss = g.add(mask, pull);
            g.backward(loss)?;
            grads[id] = g.grad(key).expect("key grad").to_vec();
            grads[n + id] = g.grad(value).expect("value grad").to_vec();
            if let Some(gen) = general {
                grads[2 * n] = g.grad(gen).expect("general grad").to_vec();
            }
            g.value(loss)
        }
        SelectionMode::Soft => {
            let key_ids: Vec<NodeId> = pool.keys.iter().map(|k| g.param(k, true)).collect();
            let value_ids: Vec<NodeId> = pool.values.iter().map(|v| g.param(v, true)).collect();
            let prompt = soft_prompt(&mut g, pool, &key_ids, &value_ids, &z)?;
            let (_, feats) =
                model::encode_with(&mut g, &nodes, patches, &[(0, prompt)], None, &bw.cfg)?;
            let logits = model::decode(&mut g, &nodes, feats, &bw.cfg)?;
            let loss = losses::mask_loss(&mut g, logits, &target)?;
            g.backward(loss)?;
            for (i, id) in key_ids.iter().enumerate() {
                grads[i] = g.grad(*id).expect("key grad").to_vec();
            }
            for (i, id) in value_ids.iter().enumerate() {
                grads[n + i] = g.grad(*id).expect("value grad").to_vec();
            }
            g.value(loss)
        }
    };
    Ok((loss_value, grads))
}

/// Softmax-attention blend: `w = softmax(z·Kᵀ)`, prompt `= Σ w_i V_i`.
fn soft_prompt(
    g: &mut Graph,
    pool: &PromptPool,
    key_ids: &[NodeId],
    value_ids: &[NodeId],
    z: &[f64],
) -> Result<NodeId> {
    let zc = g.constant(z.to_vec(), &[1, z.len()]);
    let stack = g.concat_rows(key_ids);
    let stack_t = g.transpose(stack);
    let scores = g.matmul(zc, stack_t)?;
    let w = g.softmax(scores, 1)?;
    let flat: Vec<NodeId> = value_ids
        .iter()
        .map(|&v| {
            let rows = g.shape(v)[0];
            let cols = g.shape(v)[1];
            g.reshape(v, &[1, rows * cols])
        })
        .collect();
    let vmat = g.concat_rows(&flat);
    let blended = g.matmul(w, vmat)?;
    Ok(g.reshape(blended, &[pool.prompt_len, z.len()]))
}

pub fn l2p_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    after_task: F,
) -> Result<(PromptPool, Vec<PromptTaskLog>)>
where
    F: FnMut(usize, &PromptPool) -> Result<()>,
{
    prompt_pool_train(bw, stream, cfg, SelectionMode::Hard, after_task)
}

pub fn dualprompt_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    after_task: F,
) -> Result<(PromptPool, Vec<PromptTaskLog>)>
where
    F: FnMut(usize, &PromptPool) -> Result<()>,
{
    prompt_pool_train(bw, stream, cfg, SelectionMode::Dual, after_task)
}

pub fn codaprompt_train<F>(
    bw: &BackboneWeights,
    stream: &TaskStream,
    cfg: &BaselineConfig,
    after_task: F,
) -> Result<(PromptPool, Vec<PromptTaskLog>)>
where
    F: FnMut(usize, &PromptPool) -> Result<()>,
{
    prompt_pool_train(bw, stream, cfg, SelectionMode::Soft, after_task)
}

/// Forward pass for the hard/dual modes; returns logits and the matched id.
pub fn prompt_predict(
    bw: &BackboneWeights,
    pool: &PromptPool,
    image: &[f64],
) -> Result<(Vec<f64>, Option<usize>)> {
    let z = model::mean_patch_feature(bw, image)?;
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let patches = model::patch_embed(&mut g, &nodes, image, &bw.cfg)?;
    let (logits, matched) = match pool.mode {
        SelectionMode::Hard | SelectionMode::Dual => {
            let id = match_key(pool, &z);
            let value = g.param(&pool.values[id], false);
            let mut inserts = vec![(expert_block(bw, pool.mode), value)];
            if let Some(gp) = &pool.general {
                let gen = g.param(gp, false);
                inserts.insert(0, (0, gen));
            }
            let (_, feats) = model::encode_with(&mut g, &nodes, patches, &inserts, None, &bw.cfg)?;
            (model::decode(&mut g, &nodes, feats, &bw.cfg)?, Some(id))
        }
        SelectionMode::Soft => {
            let key_ids: Vec<NodeId> = pool.keys.iter().map(|k| g.param(k, false)).collect();
            let value_ids: Vec<NodeId> = pool.values.iter().map(|v| g.param(v, false)).collect();
            let prompt = soft_prompt(&mut g, pool, &key_ids, &value_ids, &z)?;
            let (_, feats) =
                model::encode_with(&mut g, &nodes, patches, &[(0, prompt)], None, &bw.cfg)?;
            (model::decode(&mut g, &nodes, feats, &bw.cfg)?, None)
        }
    };
    Ok((g.data(logits).to_vec(), matched))
}

pub fn l2p_infer(bw: &BackboneWeights, pool: &PromptPool, image: &[f64]) -> Result<(Vec<f64>, usize)> {
    assert_eq!(pool.mode, SelectionMode::Hard);
    let (logits, id) = prompt_predict(bw, pool, image)?;
    Ok((logits, id.expect("hard mode always matches")))
}

pub fn dualprompt_infer(
    bw: &BackboneWeights,
    pool: &PromptPool,
    image: &[f64],
) -> Result<(Vec<f64>, usize)> {
    assert_eq!(pool.mode, SelectionMode::Dual);
    let (logits, id) = prompt_predict(bw, pool, image)?;
    Ok((logits, id.expect("dual mode always matches")))
}

pub fn codaprompt_infer(bw: &BackboneWeights, pool: &PromptPool, image: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(pool.mode, SelectionMode::Soft);
    Ok(prompt_predict(bw, pool, image)?.0)
}

/// The soft-selection weights for one query, for tests and diagnostics.
pub fn soft_weights(pool: &PromptPool, z: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let key_ids: Vec<NodeId> = pool.keys.iter().map(|k| g.param(k, false)).collect();
    let zc = g.constant(z.to_vec(), &[1, z.len()]);
    let stack = g.concat_rows(&key_ids);
    let stack_t = g.transpose(stack);
    let scores = g.matmul(zc, stack_t)?;
    let w = g.softmax(scores, 1)?;
    Ok(g.data(w).to_vec())
}

//! The toy frozen segmentation backbone.
//!
//! A small vision transformer stands in for a large promptable model:
//! patch embedding, pre-norm encoder blocks with full self-attention over
//! whatever token sequence they are given, and a per-patch linear mask
//! decoder. Two hooks make it adaptable without touching its weights:
//!
//! - an *adapter hook* applied to the token sequence after each block;
//! - *prefix inserts* that prepend extra token rows in front of chosen
//!   blocks (used by the prompt-pool baselines).
//!
//! The token order contract is fixed: any learnable global tokens occupy
//! the leading rows, patch tokens always come last, and the decoder only
//! ever consumes the final `L` rows.

use crate::autograd::{Adam, AdamParams, Graph, NodeId, Param};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, Mask};
use crate::rng;
use crate::taskgen::Sample;
use rayon::prelude::*;

pub const LN_EPS: f64 = 1e-5;

/// Geometry of the encoder. `toy()` is the default desk-scale model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// 64×64 single-channel images, 8×8 patches (64 tokens), width 64,
    /// 4 blocks of 4 heads, MLP ratio 2. Minutes-scale on a laptop CPU.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            seed: 7,
        }
    }

    /// Miniature variant for fast gradient checks and unit tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("depth and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens L.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length fed to the projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// The learnable global tokens: one feature token (the routing query
/// position) plus `n_a` assistant tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub t_f: Param,
    pub t_a: Param,
}

impl TokenSet {
    pub fn init(embed_dim: usize, n_assistant: usize, seed: u64) -> Self {
        let mut r = rng::rng_for(seed, "tokens");
        TokenSet {
            t_f: Param::normal("tokens.t_f", &[1, embed_dim], 0.02, &mut r),
            t_a: Param::normal("tokens.t_a", &[n_assistant, embed_dim], 0.02, &mut r),
        }
    }

    pub fn n_assistant(&self) -> usize {
        self.t_a.shape[0]
    }
}

/// All backbone parameters, by name, plus the frozen flag. Once frozen,
/// downstream training only ever borrows the weights immutably.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub cfg: EncoderConfig,
    pub params: Vec<Param>,
    pub frozen: bool,
}

impl BackboneWeights {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng_for(cfg.seed, "backbone");
        let c = cfg.embed_dim;
        let mut params = Vec::new();
        params.push(Param::xavier("patch.weight", cfg.patch_dim(), c, &mut r));
        params.push(Param::zeros("patch.bias", &[1, c]));
        params.push(Param::normal("pos", &[cfg.num_patches(), c], 0.02, &mut r));
        for i in 0..cfg.depth {
            let p = |s: &str| format!("block{i}.{s}");
            params.push(Param::ones(&p("ln1.gamma"), &[1, c]));
            params.push(Param::zeros(&p("ln1.beta"), &[1, c]));
            params.push(Param::xavier(&p("attn.wq"), c, c, &mut r));
            params.push(Param::zeros(&p("attn.bq"), &[1, c]));
            params.push(Param::xavier(&p("attn.wk"), c, c, &mut r));
            params.push(Param::zeros(&p("attn.bk"), &[1, c]));
            params.push(Param::xavier(&p("attn.wv"), c, c, &mut r));
            params.push(Param::zeros(&p("attn.bv"), &[1, c]));
            params.push(Param::xavier(&p("attn.wo"), c, c, &mut r));
            params.push(Param::zeros(&p("attn.bo"), &[1, c]));
            params.push(Param::ones(&p("ln2.gamma"), &[1, c]));
            params.push(Param::zeros(&p("ln2.beta"), &[1, c]));
            params.push(Param::xavier(&p("mlp.w1"), c, cfg.hidden_dim(), &mut r));
            params.push(Param::zeros(&p("mlp.b1"), &[1, cfg.hidden_dim()]));
            params.push(Param::xavier(&p("mlp.w2"), cfg.hidden_dim(), c, &mut r));
            params.push(Param::zeros(&p("mlp.b2"), &[1, c]));
        }
        params.push(Param::xavier("decoder.weight", c, cfg.patch_size * cfg.patch_size, &mut r));
        params.push(Param::zeros("decoder.bias", &[1, cfg.patch_size * cfg.patch_size]));
        Ok(BackboneWeights { cfg: *cfg, params, frozen: false })
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown backbone parameter {name}"))
    }

    /// Leaf every parameter into `g` (in `params` order) and return typed
    /// handles. `trainable` is only ever true during pretraining.
    pub fn leaf(&self, g: &mut Graph, trainable: bool) -> BackboneNodes {
        assert!(
            !(trainable && self.frozen),
            "frozen backbone cannot be leafed as trainable"
        );
        let all: Vec<NodeId> = self.params.iter().map(|p| g.param(p, trainable)).collect();
        let at = |name: &str| -> NodeId {
            let idx = self.params.iter().position(|p| p.name == name).unwrap();
            all[idx]
        };
        let blocks = (0..self.cfg.depth)
            .map(|i| {
                let p = |s: &str| format!("block{i}.{s}");
                BlockNodes {
                    ln1_gamma: at(&p("ln1.gamma")),
                    ln1_beta: at(&p("ln1.beta")),
                    wq: at(&p("attn.wq")),
                    bq: at(&p("attn.bq")),
                    wk: at(&p("attn.wk")),
                    bk: at(&p("attn.bk")),
                    wv: at(&p("attn.wv")),
                    bv: at(&p("attn.bv")),
                    wo: at(&p("attn.wo")),
                    bo: at(&p("attn.bo")),
                    ln2_gamma: at(&p("ln2.gamma")),
                    ln2_beta: at(&p("ln2.beta")),
                    w1: at(&p("mlp.w1")),
                    b1: at(&p("mlp.b1")),
                    w2: at(&p("mlp.w2")),
                    b2: at(&p("mlp.b2")),
                }
            })
            .collect();
        BackboneNodes {
            patch_weight: at("patch.weight"),
            patch_bias: at("patch.bias"),
            pos: at("pos"),
            blocks,
            decoder_weight: at("decoder.weight"),
            decoder_bias: at("decoder.bias"),
            all,
        }
    }
}

pub struct BlockNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct BackboneNodes {
    pub patch_weight: NodeId,
    pub patch_bias: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub decoder_weight: NodeId,
    pub decoder_bias: NodeId,
    /// Every leafed parameter, aligned with `BackboneWeights::params`.
    pub all: Vec<NodeId>,
}

/// A per-block transform applied to the token sequence (the adapter hook).
pub type TokenHook<'a> = &'a dyn Fn(&mut Graph, NodeId) -> Result<NodeId>;

/// Cut the image into non-overlapping patches, row-major over the patch
/// grid, each flattened channel-major.
pub fn im2patches(image: &[f64], cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let expected = cfg.channels * cfg.image_size * cfg.image_size;
    if image.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: vec![image.len()],
            right: vec![cfg.channels, cfg.image_size, cfg.image_size],
        });
    }
    let (n, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = vec![0.0; cfg.num_patches() * cfg.patch_dim()];
    let mut row = 0;
    for gy in 0..g {
        for gx in 0..g {
            let mut col = 0;
            for ch in 0..cfg.channels {
                let plane = &image[ch * n * n..(ch + 1) * n * n];
                for py in 0..p {
                    for px in 0..p {
                        out[row * cfg.patch_dim() + col] =
                            plane[(gy * p + py) * n + gx * p + px];
                        col += 1;
                    }
                }
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Linear patch projection: `[L × patch_dim] · W + b`, no positions yet.
pub fn patchify(
    g: &mut Graph,
    bw: &BackboneNodes,
    image: &[f64],
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let patches = im2patches(image, cfg)?;
    let x = g.constant(patches, &[cfg.num_patches(), cfg.patch_dim()]);
    let proj = g.matmul(x, bw.patch_weight)?;
    Ok(g.add_row(proj, bw.patch_bias))
}

/// Patch embedding with learned absolute positions added. Global tokens
/// never receive positions; they are position-free queries.
pub fn patch_embed(
    g: &mut Graph,
    bw: &BackboneNodes,
    image: &[f64],
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let tokens = patchify(g, bw, image, cfg)?;
    Ok(g.add(tokens, bw.pos))
}

fn attention(
    g: &mut Graph,
    blk: &BlockNodes,
    x: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let q = g.matmul(x, blk.wq)?;
    let q = g.add_row(q, blk.bq);
    let k = g.matmul(x, blk.wk)?;
    let k = g.add_row(k, blk.bk);
    let v = g.matmul(x, blk.wv)?;
    let v = g.add_row(v, blk.bv);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let att = g.softmax(scores, 1)?;
        heads.push(g.matmul(att, vh)?);
    }
    let cat = g.concat_cols(&heads);
    let out = g.matmul(cat, blk.wo)?;
    Ok(g.add_row(out, blk.bo))
}

fn block_forward(
    g: &mut Graph,
    blk: &BlockNodes,
    x: NodeId,
    cfg: &EncoderConfig,
    adapter: Option<TokenHook>,
) -> Result<NodeId> {
    let n1 = g.layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
    let att = attention(g, blk, n1, cfg)?;
    let x = g.add(x, att);
    let n2 = g.layer_norm(x, blk.ln2_gamma, blk.ln2_beta, LN_EPS)?;
    let h = g.matmul(n2, blk.w1)?;
    let h = g.add_row(h, blk.b1);
    let h = g.gelu(h);
    let h = g.matmul(h, blk.w2)?;
    let h = g.add_row(h, blk.b2);
    let x = g.add(x, h);
    match adapter {
        Some(hook) => hook(g, x),
        None => Ok(x),
    }
}

/// Run the encoder over an arbitrary token sequence.
///
/// `inserts` prepends extra token rows immediately before the named block
/// (indices must be non-decreasing); the final `num_patches` rows are the
/// patch features regardless of how many rows were prepended.
pub fn encode_with(
    g: &mut Graph,
    bw: &BackboneNodes,
    seq: NodeId,
    inserts: &[(usize, NodeId)],
    adapter: Option<TokenHook>,
    cfg: &EncoderConfig,
) -> Result<(NodeId, NodeId)> {
    if g.shape(seq)[1] != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: g.shape(seq).to_vec(),
            right: vec![0, cfg.embed_dim],
        });
    }
    let mut x = seq;
    for (b, blk) in bw.blocks.iter().enumerate() {
        for (at, tokens) in inserts.iter().filter(|(at, _)| *at == b) {
            debug_assert_eq!(*at, b);
            x = g.concat_rows(&[*tokens, x]);
        }
        x = block_forward(g, blk, x, cfg, adapter)?;
    }
    let rows = g.shape(x)[0];
    let l = cfg.num_patches();
    assert!(rows >= l, "encoded sequence shorter than the patch count");
    let patch_feats = g.slice_rows(x, rows - l, l);
    Ok((x, patch_feats))
}

/// Plain full-attention pass over `seq` (no prefix inserts).
pub fn encode(
    g: &mut Graph,
    bw: &BackboneNodes,
    seq: NodeId,
    adapter: Option<TokenHook>,
    cfg: &EncoderConfig,
) -> Result<(NodeId, NodeId)> {
    encode_with(g, bw, seq, &[], adapter, cfg)
}

/// Encode `[T_f; T_a; P_img]` with the frozen backbone (no adapter) and
/// return row 0 — the transformed feature-token position.
pub fn extract_query(
    g: &mut Graph,
    bw: &BackboneNodes,
    t_f: NodeId,
    t_a: NodeId,
    image: &[f64],
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let patches = patch_embed(g, bw, image, cfg)?;
    let seq = if g.shape(t_a)[0] > 0 {
        g.concat_rows(&[t_f, t_a, patches])
    } else {
        g.concat_rows(&[t_f, patches])
    };
    let (full, _) = encode(g, bw, seq, None, cfg)?;
    Ok(g.slice_rows(full, 0, 1))
}

/// Per-patch linear head: `C → patch_size²` logits per token, reassembled
/// into the image plane. No cross-patch mixing.
pub fn decode(
    g: &mut Graph,
    bw: &BackboneNodes,
    patch_feats: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let logits = g.matmul(patch_feats, bw.decoder_weight)?;
    let logits = g.add_row(logits, bw.decoder_bias);
    Ok(g.patch_assemble(logits, cfg.grid(), cfg.patch_size))
}

/// Spatial mean of the patch features from a bare promptless pass — the
/// query the prompt-pool baselines match against.
pub fn mean_patch_feature(bw: &BackboneWeights, image: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let patches = patch_embed(&mut g, &nodes, image, &bw.cfg)?;
    let (_, feats) = encode(&mut g, &nodes, patches, None, &bw.cfg)?;
    let data = g.data(feats);
    let (l, c) = (bw.cfg.num_patches(), bw.cfg.embed_dim);
    let mut mean = vec![0.0; c];
    for row in 0..l {
        for j in 0..c {
            mean[j] += data[row * c + j];
        }
    }
    for v in mean.iter_mut() {
        *v /= l as f64;
    }
    Ok(mean)
}

/// Forward-only mask logits with the bare backbone (no adapter, no tokens).
pub fn plain_predict(bw: &BackboneWeights, image: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = bw.leaf(&mut g, false);
    let patches = patch_embed(&mut g, &nodes, image, &bw.cfg)?;
    let (_, feats) = encode(&mut g, &nodes, patches, None, &bw.cfg)?;
    let logits = decode(&mut g, &nodes, feats, &bw.cfg)?;
    Ok(g.data(logits).to_vec())
}

/// Mean IoU of thresholded plain predictions over a sample set.
pub fn plain_mean_iou(bw: &BackboneWeights, samples: &[Sample]) -> Result<f64> {
    let scores: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let logits = plain_predict(bw, &s.image)?;
            let pred = Mask::from_logits(bw.cfg.image_size, bw.cfg.image_size, &logits);
            metrics::iou(&pred, &s.mask)
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mean loss and mean per-parameter gradients over a batch, computed on
/// independent per-sample graphs in parallel and reduced in sample order.
pub fn batch_grads<S: Sync, F>(samples: &[S], per_sample: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&S) -> Result<(f64, Vec<Vec<f64>>)> + Sync,
{
    assert!(!samples.is_empty(), "batch_grads: empty batch");
    let results: Vec<Result<(f64, Vec<Vec<f64>>)>> =
        samples.par_iter().map(&per_sample).collect();
    let inv = 1.0 / samples.len() as f64;
    let mut iter = results.into_iter();
    let (loss0, mut acc) = iter.next().unwrap()?;
    let mut loss = loss0;
    for r in iter {
        let (l, gs) = r?;
        loss += l;
        for (a, g) in acc.iter_mut().zip(gs.iter()) {
            for (av, gv) in a.iter_mut().zip(g.iter()) {
                *av += gv;
            }
        }
    }
    for g in acc.iter_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss * inv, acc))
}

/// Pretraining hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub target_iou: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, lr: 1e-3, batch: 4, target_iou: 0.6 }
    }
}

/// Train backbone + decoder on the generic mixture, then freeze.
///
/// Fails with a diagnostic when the held-out mean IoU stays below
/// `target_iou`.
pub fn pretrain_backbone(
    cfg: &EncoderConfig,
    train: &[Sample],
    heldout: &[Sample],
    pc: &PretrainConfig,
) -> Result<BackboneWeights> {
    let mut bw = BackboneWeights::init(cfg)?;
    let n_params = bw.params.len();
    let mut adam = Adam::new(
        AdamParams::with_lr(pc.lr),
        &bw.params.iter().collect::<Vec<_>>(),
    );
    for epoch in 0..pc.epochs {
        let mut shuffle_rng = rng::rng_for(cfg.seed, &format!("pretrain.epoch{epoch}"));
        let order = rng::shuffled_indices(&mut shuffle_rng, train.len());
        for chunk in order.chunks(pc.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let snapshot = &bw;
            let (_, grads) = batch_grads(&batch, |s| {
                let mut g = Graph::new();
                let nodes = snapshot.leaf(&mut g, true);
                let patches = patch_embed(&mut g, &nodes, &s.image, cfg)?;
                let (_, feats) = encode(&mut g, &nodes, patches, None, cfg)?;
                let logits = decode(&mut g, &nodes, feats, cfg)?;
                let target = s.mask.to_f64();
                let loss = losses::mask_loss(&mut g, logits, &target)?;
                g.backward(loss)?;
                let grads: Vec<Vec<f64>> = nodes
                    .all
                    .iter()
                    .map(|&id| g.grad(id).expect("trainable leaf").to_vec())
                    .collect();
                Ok((g.value(loss), grads))
            })?;
            debug_assert_eq!(grads.len(), n_params);
            let mut refs: Vec<&mut Param> = bw.params.iter_mut().collect();
            adam.step(&mut refs, &grads);
        }
    }
    let iou = plain_mean_iou(&bw, heldout)?;
    if iou < pc.target_iou {
        return Err(Error::PretrainBelowTarget { iou, target: pc.target_iou });
    }
    bw.frozen = true;
    Ok(bw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen;

    fn zero_image(cfg: &EncoderConfig) -> Vec<f64> {
        vec![0.0; cfg.channels * cfg.image_size * cfg.image_size]
    }

    #[test]
    fn patch_counts_follow_geometry() {
        let mut c32 = EncoderConfig::toy();
        c32.image_size = 32;
        assert_eq!(c32.num_patches(), 16);
        let c64 = EncoderConfig::toy();
        assert_eq!(c64.num_patches(), 64);
    }

    #[test]
    fn patchify_zero_image_zero_bias_gives_zero_tokens() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let tokens = patchify(&mut g, &nodes, &zero_image(&cfg), &cfg).unwrap();
        assert_eq!(g.shape(tokens), &[cfg.num_patches(), cfg.embed_dim]);
        assert!(g.data(tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let bad = vec![0.0; 10];
        assert!(matches!(
            patchify(&mut g, &nodes, &bad, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = EncoderConfig::toy();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg2 = EncoderConfig::toy();
        cfg2.heads = 5;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn encode_preserves_shape_and_is_deterministic() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let mix = taskgen::generate_pretrain_mix(3, 1);
        let run = || {
            let mut g = Graph::new();
            let nodes = bw.leaf(&mut g, false);
            // 16x16 crop of the 64x64 sample keeps the test image non-trivial
            let img: Vec<f64> = (0..16 * 16)
                .map(|i| mix[0].image[(i / 16) * 64 + (i % 16)])
                .collect();
            let patches = patch_embed(&mut g, &nodes, &img, &cfg).unwrap();
            let (seq, feats) = encode(&mut g, &nodes, patches, None, &cfg).unwrap();
            assert_eq!(g.shape(seq), &[cfg.num_patches(), cfg.embed_dim]);
            (g.data(seq).to_vec(), g.data(feats).to_vec())
        };
        let (s1, f1) = run();
        let (s2, f2) = run();
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn query_has_unit_row_shape_and_row_zero_is_feature_token_position() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let tokens = TokenSet::init(cfg.embed_dim, 3, 11);
        let img = vec![0.25; 16 * 16];
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let tf = g.param(&tokens.t_f, false);
        let ta = g.param(&tokens.t_a, false);
        let q = extract_query(&mut g, &nodes, tf, ta, &img, &cfg).unwrap();
        assert_eq!(g.shape(q), &[1, cfg.embed_dim]);

        // identical inputs give identical queries
        let mut g2 = Graph::new();
        let nodes2 = bw.leaf(&mut g2, false);
        let tf2 = g2.param(&tokens.t_f, false);
        let ta2 = g2.param(&tokens.t_a, false);
        let q2 = extract_query(&mut g2, &nodes2, tf2, ta2, &img, &cfg).unwrap();
        assert_eq!(g.data(q), g2.data(q2));
    }

    #[test]
    fn query_with_no_assistant_tokens_degenerates_cleanly() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let tokens = TokenSet::init(cfg.embed_dim, 0, 11);
        let img = vec![0.5; 16 * 16];
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let tf = g.param(&tokens.t_f, false);
        let ta = g.param(&tokens.t_a, false);
        let q = extract_query(&mut g, &nodes, tf, ta, &img, &cfg).unwrap();
        assert_eq!(g.shape(q), &[1, cfg.embed_dim]);
    }

    #[test]
    fn query_gradients_pass_finite_diff() {
        use crate::autograd;
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let tokens = TokenSet::init(cfg.embed_dim, 2, 13);
        let mix = taskgen::generate_pretrain_mix(5, 1);
        let img: Vec<f64> = (0..16 * 16)
            .map(|i| mix[0].image[(i / 16) * 64 + (i % 16)])
            .collect();
        let err = autograd::finite_diff_check(
            &[tokens.t_f.clone(), tokens.t_a.clone()],
            1e-5,
            |g, ids| {
                let nodes = bw.leaf(g, false);
                let q = extract_query(g, &nodes, ids[0], ids[1], &img, &cfg)?;
                let sq = g.mul(q, q);
                Ok(g.sum(sq))
            },
        )
        .unwrap();
        assert!(err < 1e-5, "query fd err {err}");
    }

    #[test]
    fn decode_zero_features_zero_bias_gives_zero_logits() {
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = bw.leaf(&mut g, false);
        let feats = g.constant(
            vec![0.0; cfg.num_patches() * cfg.embed_dim],
            &[cfg.num_patches(), cfg.embed_dim],
        );
        let logits = decode(&mut g, &nodes, feats, &cfg).unwrap();
        assert_eq!(g.shape(logits), &[cfg.image_size, cfg.image_size]);
        assert!(g.data(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_is_per_patch_local() {
        // Permuting two patch-feature rows permutes exactly the two
        // corresponding spatial blocks.
        let cfg = EncoderConfig::tiny();
        let bw = BackboneWeights::init(&cfg).unwrap();
        let l = cfg.num_patches();
        let c = cfg.embed_dim;
        let mut r = rng::rng_for(17, "decode-local");
        let mut feats = vec![0.0; l * c];
        rng::fill_normal(&mut r, &mut feats, 1.0);

        let decode_img = |data: Vec<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let nodes = bw.leaf(&mut g, false);
            let f = g.constant(data, &[l, c]);
            let out = decode(&mut g, &nodes, f, &cfg).unwrap();
            g.data(out).to_vec()
        };
        let base = decode_img(feats.clone());
        let (a, b) = (1usize, 6usize);
        let mut swapped = feats.clone();
        for j in 0..c {
            swapped.swap(a * c + j, b * c + j);
        }
        let out = decode_img(swapped);

        let grid = cfg.grid();
        let p = cfg.patch_size;
        let block = |img: &[f64], l_idx: usize| -> Vec<f64> {
            let (gy, gx) = (l_idx / grid, l_idx % grid);
            let mut v = Vec::new();
            for py in 0..p {
                for px in 0..p {
                    v.push(img[(gy * p + py) * cfg.image_size + gx * p + px]);
                }
            }
            v
        };
        assert_eq!(block(&base, a), block(&out, b));
        assert_eq!(block(&base, b), block(&out, a));
        // untouched patch stays identical
        assert_eq!(block(&base, 3), block(&out, 3));
    }

    #[test]
    fn backbone_init_is_seed_deterministic() {
        let cfg = EncoderConfig::tiny();
        let a = BackboneWeights::init(&cfg).unwrap();
        let b = BackboneWeights::init(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg;
        cfg2.seed = 8;
        let c = BackboneWeights::init(&cfg2).unwrap();
        assert_ne!(a.params[0].data, c.params[0].data);
    }

    #[test]
    fn frozen_backbone_rejects_trainable_leafing() {
        let cfg = EncoderConfig::tiny();
        let mut bw = BackboneWeights::init(&cfg).unwrap();
        bw.frozen = true;
        let mut g = Graph::new();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            bw.leaf(&mut g, true);
        }));
        assert!(result.is_err());
    }
}

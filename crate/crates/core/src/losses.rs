//! Mask losses and the regularizers the continual baselines use.
//!
//! All losses are built as graph nodes over prediction logits, so they are
//! differentiable end to end. Targets are constants: hard 0/1 masks, or
//! teacher probabilities for distillation. A batch loss is the mean of the
//! per-sample losses.

use crate::autograd::{Graph, NodeId, Param};
use crate::error::{Error, Result};

/// Dice smoothing term; makes the empty-prediction/empty-target pair a
/// zero-loss fixed point.
pub const DICE_EPS: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_target(g: &Graph, logits: NodeId, target: &[f64]) -> Result<()> {
    if g.data(logits).len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "mask loss target",
            left: g.shape(logits).to_vec(),
            right: vec![target.len()],
        });
    }
    Ok(())
}

/// Soft Dice loss on sigmoid probabilities:
/// `1 − (2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(g: &mut Graph, logits: NodeId, target: &[f64]) -> Result<NodeId> {
    check_target(g, logits, target)?;
    let p = g.sigmoid(logits);
    let shape = g.shape(p).to_vec();
    let t = g.constant(target.to_vec(), &shape);
    let pg = g.mul(p, t);
    let inter = g.sum(pg);
    let sum_p = g.sum(p);
    let sum_g: f64 = target.iter().sum();

    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let den = g.add_scalar(sum_p, sum_g + DICE_EPS);
    let dice = g.div(num, den);
    let neg = g.scale(dice, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean per-pixel binary cross-entropy on sigmoid probabilities, in the
/// numerically stable softplus form `softplus(−z) + (1−y)·z`. Targets may
/// be soft (used for distillation).
pub fn pixel_ce_loss(g: &mut Graph, logits: NodeId, target: &[f64]) -> Result<NodeId> {
    check_target(g, logits, target)?;
    let shape = g.shape(logits).to_vec();
    let one_minus_y: Vec<f64> = target.iter().map(|y| 1.0 - y).collect();
    let w = g.constant(one_minus_y, &shape);
    let neg = g.scale(logits, -1.0);
    let sp = g.softplus(neg);
    let lin = g.mul(w, logits);
    let per_pixel = g.add(sp, lin);
    Ok(g.mean(per_pixel))
}

/// The segmentation training loss: Dice plus pixel cross-entropy.
pub fn mask_loss(g: &mut Graph, logits: NodeId, target: &[f64]) -> Result<NodeId> {
    let d = dice_loss(g, logits, target)?;
    let ce = pixel_ce_loss(g, logits, target)?;
    Ok(g.add(d, ce))
}

/// Mean of per-sample mask losses over a batch.
pub fn mask_loss_batch(g: &mut Graph, items: &[(NodeId, &[f64])]) -> Result<NodeId> {
    assert!(!items.is_empty(), "mask_loss_batch: empty batch");
    let mut acc: Option<NodeId> = None;
    for (logits, target) in items {
        let l = mask_loss(g, *logits, target)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l),
            None => l,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / items.len() as f64))
}

/// Distillation: the mask loss with the teacher's sigmoid probabilities as
/// soft targets. Teacher logits are plain data, so no gradient flows back
/// into the teacher.
pub fn distill_loss(g: &mut Graph, student_logits: NodeId, teacher_logits: &[f64]) -> Result<NodeId> {
    let soft: Vec<f64> = teacher_logits.iter().map(|&z| sigmoid(z)).collect();
    mask_loss(g, student_logits, &soft)
}

/// Quadratic importance-weighted anchor penalty:
/// `β · Σ_i F_i (θ_i − θ*_i)²`, aligned by parameter name.
pub fn ewc_penalty(
    g: &mut Graph,
    current: &[(String, NodeId)],
    anchor: &[Param],
    fisher: &[Param],
    beta: f64,
) -> Result<NodeId> {
    let find = |set: &[Param], name: &str| -> Option<usize> {
        set.iter().position(|p| p.name == name)
    };
    let mut missing = Vec::new();
    for (name, _) in current {
        if find(anchor, name).is_none() {
            missing.push(format!("anchor:{name}"));
        }
        if find(fisher, name).is_none() {
            missing.push(format!("fisher:{name}"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::ParamMismatch { missing });
    }

    let mut acc: Option<NodeId> = None;
    for (name, id) in current {
        let a = &anchor[find(anchor, name).unwrap()];
        let f = &fisher[find(fisher, name).unwrap()];
        if a.shape != g.shape(*id) || f.shape != g.shape(*id) {
            return Err(Error::ShapeMismatch {
                op: "ewc_penalty",
                left: g.shape(*id).to_vec(),
                right: a.shape.clone(),
            });
        }
        let anchor_node = g.constant(a.data.clone(), &a.shape);
        let fisher_node = g.constant(f.data.clone(), &f.shape);
        let delta = g.sub(*id, anchor_node);
        let sq = g.mul(delta, delta);
        let weighted = g.mul(fisher_node, sq);
        let s = g.sum(weighted);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s),
            None => s,
        });
    }
    let total = acc.ok_or(Error::EmptyInput("ewc_penalty"))?;
    Ok(g.scale(total, beta))
}
